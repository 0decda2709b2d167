#include "mvcca/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mvcca/rng.hpp"

namespace mvcca::train {

namespace {

std::string view_tag(std::size_t m) { return std::to_string(m + 1); }

template <typename T>
Dense<T> gather_rows(const Mat& src, const std::vector<std::uint32_t>& order, std::size_t begin,
                     std::size_t end) {
  Dense<T> out(end - begin, src.cols);
  for (std::size_t r = begin; r < end; ++r) {
    const double* row = src.row(order[r]);
    T* dst = out.row(r - begin);
    for (std::size_t j = 0; j < src.cols; ++j) dst[j] = static_cast<T>(row[j]);
  }
  return out;
}

template <typename T>
Dense<T> take_rows(const Mat& src, std::size_t begin, std::size_t end) {
  Dense<T> out(end - begin, src.cols);
  for (std::size_t r = begin; r < end; ++r)
    for (std::size_t j = 0; j < src.cols; ++j)
      out(r - begin, j) = static_cast<T>(src(r, j));
  return out;
}

template <typename T>
Dense<T> normal_noise(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Dense<T> m(rows, cols);
  rng::fill_normal(m, seed);
  return m;
}

nets::ParamStore<double> widen_store(const nets::ParamStore<float>& s) {
  nets::ParamStore<double> out;
  out.step = s.step;
  for (const auto& e : s.entries) {
    Dense<double> v(e.value.rows, e.value.cols);
    for (std::size_t i = 0; i < v.size(); ++i) v.v[i] = static_cast<double>(e.value.v[i]);
    out.add(e.name, std::move(v));
    auto& w = out.at(e.name);
    for (std::size_t i = 0; i < w.m1.size(); ++i) {
      w.m1.v[i] = static_cast<double>(e.m1.v[i]);
      w.m2.v[i] = static_cast<double>(e.m2.v[i]);
    }
  }
  return out;
}

nets::ParamStore<double> widen_store(const nets::ParamStore<double>& s) { return s; }

// Hidden stacks serialize as a count-prefixed vector so empty stacks avoid
// zero-length records.
std::vector<double> pack_widths(const std::vector<std::size_t>& widths) {
  std::vector<double> out{static_cast<double>(widths.size())};
  for (std::size_t w : widths) out.push_back(static_cast<double>(w));
  return out;
}

std::vector<std::size_t> unpack_widths(const std::vector<double>& data) {
  require(!data.empty(), "model checkpoint: malformed width record");
  const auto count = static_cast<std::size_t>(data[0]);
  require(data.size() == count + 1, "model checkpoint: malformed width record");
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(static_cast<std::size_t>(data[i + 1]));
  return out;
}

void add_widths(dataio::TensorContainer& c, const std::string& name,
                const std::vector<std::size_t>& widths) {
  const std::vector<double> packed = pack_widths(widths);
  c.add(name, {static_cast<std::uint32_t>(packed.size())}, packed, true);
}

std::vector<std::size_t> get_widths(const dataio::TensorContainer& c, const std::string& name) {
  return unpack_widths(c.get(name).data);
}

void encode_config(dataio::TensorContainer& c, const TrainConfig& cfg,
                   const std::vector<std::size_t>& x_dim) {
  const std::size_t m = x_dim.size();
  c.add_scalar("cfg.views", static_cast<double>(m));
  c.add_scalar("cfg.d0", static_cast<double>(cfg.d0));
  add_widths(c, "cfg.d", cfg.d);
  add_widths(c, "cfg.f0_hidden", cfg.f0_hidden);
  for (std::size_t v = 0; v < m; ++v) {
    add_widths(c, "cfg.enc_hidden." + view_tag(v), cfg.enc_hidden[v]);
    add_widths(c, "cfg.dec_hidden." + view_tag(v), cfg.dec_hidden[v]);
  }
  std::vector<double> lik;
  for (Likelihood l : cfg.likelihood) lik.push_back(l == Likelihood::kGaussian ? 1.0 : 0.0);
  c.add("cfg.likelihood", {static_cast<std::uint32_t>(lik.size())}, lik, true);
  c.add_scalar("cfg.lambda0", cfg.lambda0);
  c.add("cfg.lambda", {static_cast<std::uint32_t>(cfg.lambda.size())}, cfg.lambda, true);
  c.add_scalar("cfg.mu0_mode", cfg.mu0_mode == mvlayer::Mu0Mode::kPrimary ? 1.0 : 0.0);
  c.add_scalar("cfg.x_star", cfg.x_star == XStar::kConcat ? 1.0 : 0.0);
  c.add_scalar("cfg.mc_samples", static_cast<double>(cfg.mc_samples));
  c.add_scalar("cfg.batch", static_cast<double>(cfg.batch));
  c.add_scalar("cfg.lr", cfg.lr);
  c.add_scalar("cfg.epochs", static_cast<double>(cfg.epochs));
  c.add_scalar("cfg.dropout", cfg.dropout);
  c.add_scalar("cfg.dropout_f0", cfg.dropout_f0 ? 1.0 : 0.0);
  c.add_scalar("cfg.weight_decay", cfg.weight_decay);
  c.add_scalar("cfg.seed_lo", static_cast<double>(cfg.seed & 0xffffffffULL));
  c.add_scalar("cfg.seed_hi", static_cast<double>(cfg.seed >> 32));
  c.add_scalar("cfg.baseline", cfg.baseline == Baseline::kVcca ? 1.0 : 0.0);
  c.add_scalar("cfg.precision", cfg.precision == Precision::kFloat64 ? 1.0 : 0.0);
  std::vector<double> xd;
  for (std::size_t d : x_dim) xd.push_back(static_cast<double>(d));
  c.add("x_dim", {static_cast<std::uint32_t>(xd.size())}, xd, true);
}

void decode_config(const dataio::TensorContainer& c, TrainConfig& cfg,
                   std::vector<std::size_t>& x_dim) {
  const auto m = static_cast<std::size_t>(c.get_scalar("cfg.views"));
  cfg.d0 = static_cast<std::size_t>(c.get_scalar("cfg.d0"));
  cfg.d = get_widths(c, "cfg.d");
  cfg.f0_hidden = get_widths(c, "cfg.f0_hidden");
  cfg.enc_hidden.clear();
  cfg.dec_hidden.clear();
  for (std::size_t v = 0; v < m; ++v) {
    cfg.enc_hidden.push_back(get_widths(c, "cfg.enc_hidden." + view_tag(v)));
    cfg.dec_hidden.push_back(get_widths(c, "cfg.dec_hidden." + view_tag(v)));
  }
  cfg.likelihood.clear();
  for (double l : c.get("cfg.likelihood").data)
    cfg.likelihood.push_back(l == 1.0 ? Likelihood::kGaussian : Likelihood::kBernoulli);
  cfg.lambda0 = c.get_scalar("cfg.lambda0");
  cfg.lambda = c.get("cfg.lambda").data;
  cfg.mu0_mode = c.get_scalar("cfg.mu0_mode") == 1.0 ? mvlayer::Mu0Mode::kPrimary
                                                     : mvlayer::Mu0Mode::kMultimodal;
  cfg.x_star = c.get_scalar("cfg.x_star") == 1.0 ? XStar::kConcat : XStar::kPrimary;
  cfg.mc_samples = static_cast<std::size_t>(c.get_scalar("cfg.mc_samples"));
  cfg.batch = static_cast<std::size_t>(c.get_scalar("cfg.batch"));
  cfg.lr = c.get_scalar("cfg.lr");
  cfg.epochs = static_cast<std::size_t>(c.get_scalar("cfg.epochs"));
  cfg.dropout = c.get_scalar("cfg.dropout");
  cfg.dropout_f0 = c.get_scalar("cfg.dropout_f0") == 1.0;
  cfg.weight_decay = c.get_scalar("cfg.weight_decay");
  cfg.seed = static_cast<std::uint64_t>(c.get_scalar("cfg.seed_lo")) |
             (static_cast<std::uint64_t>(c.get_scalar("cfg.seed_hi")) << 32);
  cfg.baseline = c.get_scalar("cfg.baseline") == 1.0 ? Baseline::kVcca : Baseline::kVpcca;
  cfg.precision = c.get_scalar("cfg.precision") == 1.0 ? Precision::kFloat64
                                                       : Precision::kFloat32;
  x_dim.clear();
  for (double d : c.get("x_dim").data) x_dim.push_back(static_cast<std::size_t>(d));
}

}  // namespace

void TrainConfig::validate(std::size_t views) const {
  require(views >= 1, "train config: at least one view required");
  require(d0 >= 1, "train config: d0 must be positive");
  require(d.size() == views, "train config: one latent width per view required");
  require(enc_hidden.size() == views, "train config: one encoder stack per view required");
  require(dec_hidden.size() == views, "train config: one decoder stack per view required");
  require(likelihood.size() == views, "train config: one likelihood per view required");
  require(lambda.size() == views, "train config: one lambda per view required");
  require(lambda0 > 0.0, "train config: lambda0 must be positive");
  for (double l : lambda) require(l > 0.0, "train config: lambda must be positive");
  for (std::size_t m = 0; m < views; ++m)
    require(d[m] >= d0, "train config: latent width below d0 for view " + view_tag(m));
  if (baseline == Baseline::kVcca)
    for (std::size_t m = 0; m < views; ++m)
      require(d[m] == d0, "train config: the vcca baseline needs d_m == d0");
  require(mc_samples >= 1, "train config: mc_samples must be positive");
  require(batch >= 1, "train config: batch must be positive");
  require(lr > 0.0, "train config: lr must be positive");
  require(epochs >= 1, "train config: epochs must be positive");
  require(dropout >= 0.0 && dropout < 1.0, "train config: dropout must lie in [0, 1)");
  require(weight_decay >= 0.0, "train config: weight_decay must be non-negative");
}

nets::MlpSpec encoder_spec(const TrainConfig& cfg, std::size_t view, std::size_t x_dim) {
  nets::MlpSpec s;
  s.in_dim = x_dim;
  s.hidden = cfg.enc_hidden[view];
  s.heads = {{"mu", cfg.d[view], nets::Gate::kLinear},
             {"var", cfg.d[view], nets::Gate::kSoftplus}};
  s.dropout = cfg.dropout;
  return s;
}

nets::MlpSpec decoder_spec(const TrainConfig& cfg, std::size_t view, std::size_t x_dim) {
  nets::MlpSpec s;
  s.in_dim = cfg.d[view];
  s.hidden = cfg.dec_hidden[view];
  if (cfg.likelihood[view] == Likelihood::kBernoulli) {
    s.heads = {{"mean", x_dim, nets::Gate::kSigmoid}};
  } else {
    s.heads = {{"mean", x_dim, nets::Gate::kLinear}, {"var", x_dim, nets::Gate::kSoftplus}};
  }
  s.dropout = cfg.dropout;
  return s;
}

nets::MlpSpec f0_spec(const TrainConfig& cfg, const std::vector<std::size_t>& x_dim) {
  nets::MlpSpec s;
  s.in_dim = cfg.x_star == XStar::kPrimary
                 ? x_dim[0]
                 : std::accumulate(x_dim.begin(), x_dim.end(), std::size_t(0));
  s.hidden = cfg.f0_hidden;
  if (cfg.baseline == Baseline::kVpcca) {
    s.heads = {{"p", cfg.d0, nets::Gate::kSigmoid}};
  } else {
    s.heads = {{"mu0", cfg.d0, nets::Gate::kLinear}};
  }
  s.dropout = cfg.dropout_f0 ? cfg.dropout : 0.0;
  return s;
}

template <typename T>
void init_model_params(nets::ParamStore<T>& store, const TrainConfig& cfg,
                       const std::vector<std::size_t>& x_dim) {
  cfg.validate(x_dim.size());
  for (std::size_t m = 0; m < x_dim.size(); ++m) {
    const std::string tag = view_tag(m);
    nets::init_mlp(store, encoder_spec(cfg, m, x_dim[m]), "enc" + tag,
                   rng::derive(cfg.seed, "init.enc" + tag));
    nets::init_mlp(store, decoder_spec(cfg, m, x_dim[m]), "dec" + tag,
                   rng::derive(cfg.seed, "init.dec" + tag));
  }
  nets::init_mlp(store, f0_spec(cfg, x_dim), "f0", rng::derive(cfg.seed, "init.f0"));
}

template <typename T>
void build_elbo(ElboGraph<T>& eg, const std::vector<Dense<T>>& views,
                const nets::ParamStore<T>& store, const TrainConfig& cfg, std::uint64_t seed,
                bool train_mode) {
  const std::size_t mviews = views.size();
  cfg.validate(mviews);
  require(!views.empty() && views[0].rows > 0, "elbo: empty batch");
  const std::size_t n = views[0].rows;
  std::vector<std::size_t> x_dim(mviews);
  for (std::size_t m = 0; m < mviews; ++m) {
    require(views[m].rows == n, "elbo: view row counts disagree");
    require(views[m].cols > 0, "elbo: view " + view_tag(m) + " has no columns");
    x_dim[m] = views[m].cols;
    if (cfg.likelihood[m] == Likelihood::kBernoulli)
      for (T v : views[m].v)
        require(v >= T(0) && v <= T(1),
                "elbo: view " + view_tag(m) + " data outside [0, 1] for the bernoulli "
                "likelihood");
  }

  auto& g = eg.g;
  const auto lam0 = static_cast<T>(cfg.lambda0);
  const std::size_t d0 = cfg.d0;
  const bool vpcca = cfg.baseline == Baseline::kVpcca;

  std::vector<int> xin(mviews);
  for (std::size_t m = 0; m < mviews; ++m) xin[m] = g.value(views[m]);
  int xstar = xin[0];
  if (cfg.x_star == XStar::kConcat)
    for (std::size_t m = 1; m < mviews; ++m) xstar = g.concat_cols(xstar, xin[m]);

  std::vector<int> mu(mviews), var(mviews), mu_lead(mviews), var_lead(mviews);
  for (std::size_t m = 0; m < mviews; ++m) {
    const std::string tag = view_tag(m);
    const auto heads = nets::mlp_forward(g, store, eg.binding, encoder_spec(cfg, m, x_dim[m]),
                                         "enc" + tag, xin[m], train_mode,
                                         rng::derive(seed, "enc" + tag));
    mu[m] = heads[0];
    var[m] = g.clamp_min(heads[1], static_cast<T>(mvlayer::kVarMin));
    mu_lead[m] = g.slice_cols(mu[m], 0, d0);
    var_lead[m] = g.slice_cols(var[m], 0, d0);
  }

  const auto fheads = nets::mlp_forward(g, store, eg.binding, f0_spec(cfg, x_dim), "f0", xstar,
                                        train_mode, rng::derive(seed, "f0"));

  eg.w.assign(mviews, -1);
  eg.psi.assign(mviews, -1);
  eg.mu_eps.assign(mviews, -1);

  int sqrtp = -1, one_minus_p = -1;
  if (vpcca) {
    eg.p = g.clamp(fheads[0], static_cast<T>(mvlayer::kPMin),
                   T(1) - static_cast<T>(mvlayer::kPMin));
    sqrtp = g.sqrt(eg.p);
    one_minus_p = g.affine(eg.p, T(-1), T(1));
  }

  for (std::size_t m = 0; m < mviews; ++m) {
    if (vpcca) {
      eg.w[m] = g.mul(g.sqrt(var_lead[m]), sqrtp);
      const int psi_lead =
          g.clamp_min(g.mul(var_lead[m], one_minus_p), static_cast<T>(mvlayer::kPsiMin));
      eg.psi[m] = cfg.d[m] > d0 ? g.concat_cols(psi_lead, g.slice_cols(var[m], d0, cfg.d[m]))
                                : psi_lead;
    } else {
      eg.w[m] = g.value(Dense<T>(n, d0, T(1)));
      eg.psi[m] = var[m];
    }
  }

  if (vpcca) {
    const std::size_t use = cfg.mu0_mode == mvlayer::Mu0Mode::kPrimary ? 1 : mviews;
    int numer = -1, denom = -1;
    for (std::size_t m = 0; m < use; ++m) {
      const auto lm = static_cast<T>(cfg.lambda[m]);
      const int t = g.affine(g.mul(eg.w[m], mu_lead[m]), lm, T(0));
      numer = m == 0 ? t : g.add(numer, t);
      const int s = g.affine(g.square(eg.w[m]), lm, m == 0 ? lam0 : T(0));
      denom = m == 0 ? s : g.add(denom, s);
    }
    eg.mu0 = g.div(numer, denom);
  } else {
    eg.mu0 = fheads[0];
  }

  for (std::size_t m = 0; m < mviews; ++m) {
    const int lead = g.sub(mu_lead[m], g.mul(eg.w[m], eg.mu0));
    eg.mu_eps[m] =
        cfg.d[m] > d0 ? g.concat_cols(lead, g.slice_cols(mu[m], d0, cfg.d[m])) : lead;
  }

  eg.kl_phi_sum = g.kl_phi_sum(eg.mu0, lam0);
  eg.kl_eps_sum.assign(mviews, -1);
  for (std::size_t m = 0; m < mviews; ++m)
    eg.kl_eps_sum[m] = g.kl_eps_sum(eg.mu_eps[m], eg.psi[m], static_cast<T>(cfg.lambda[m]));

  std::vector<int> sqrt_psi(mviews);
  for (std::size_t m = 0; m < mviews; ++m) sqrt_psi[m] = g.sqrt(eg.psi[m]);

  std::vector<std::vector<int>> lls(mviews);
  for (std::size_t l = 0; l < cfg.mc_samples; ++l) {
    const std::string ltag = std::to_string(l);
    const int xi0 = g.value(normal_noise<T>(n, d0, rng::derive(seed, "xi.phi." + ltag)));
    const int phi = g.add(eg.mu0, xi0);
    for (std::size_t m = 0; m < mviews; ++m) {
      const std::string tag = view_tag(m);
      const int xi = g.value(
          normal_noise<T>(n, cfg.d[m], rng::derive(seed, "xi.eps." + tag + "." + ltag)));
      const int eps = g.add(eg.mu_eps[m], g.mul(sqrt_psi[m], xi));
      const int z_lead = g.add(g.mul(eg.w[m], phi), g.slice_cols(eps, 0, d0));
      const int z = cfg.d[m] > d0 ? g.concat_cols(z_lead, g.slice_cols(eps, d0, cfg.d[m]))
                                  : z_lead;
      const auto dh = nets::mlp_forward(g, store, eg.binding, decoder_spec(cfg, m, x_dim[m]),
                                        "dec" + tag, z, train_mode,
                                        rng::derive(seed, "dec" + tag + "." + ltag));
      int ll;
      if (cfg.likelihood[m] == Likelihood::kBernoulli) {
        ll = g.bernoulli_ll(dh[0], views[m]);
      } else {
        ll = g.gaussian_ll(dh[0], g.clamp_min(dh[1], static_cast<T>(mvlayer::kVarMin)),
                           views[m]);
      }
      lls[m].push_back(ll);
    }
  }

  eg.recon_sum.assign(mviews, -1);
  for (std::size_t m = 0; m < mviews; ++m) {
    int acc = lls[m][0];
    for (std::size_t l = 1; l < cfg.mc_samples; ++l) acc = g.add(acc, lls[m][l]);
    eg.recon_sum[m] = g.affine(acc, T(1) / static_cast<T>(cfg.mc_samples), T(0));
  }

  for (std::size_t m = 0; m < mviews; ++m)
    if (!std::isfinite(static_cast<double>(g.scalar(eg.recon_sum[m]))))
      throw std::runtime_error("elbo: non-finite reconstruction for view " + view_tag(m));
  if (!std::isfinite(static_cast<double>(g.scalar(eg.kl_phi_sum))))
    throw std::runtime_error("elbo: non-finite shared-representation kl");
  for (std::size_t m = 0; m < mviews; ++m)
    if (!std::isfinite(static_cast<double>(g.scalar(eg.kl_eps_sum[m]))))
      throw std::runtime_error("elbo: non-finite noise kl for view " + view_tag(m));

  int tot = eg.recon_sum[0];
  for (std::size_t m = 1; m < mviews; ++m) tot = g.add(tot, eg.recon_sum[m]);
  int kl = eg.kl_phi_sum;
  for (std::size_t m = 0; m < mviews; ++m) kl = g.add(kl, eg.kl_eps_sum[m]);
  eg.root = g.affine(g.sub(tot, kl), T(1) / static_cast<T>(n), T(0));
}

template <typename T>
ElboBreakdown ElboGraph<T>::breakdown(std::size_t n) const {
  require(root >= 0, "elbo graph: not built");
  const auto dn = static_cast<double>(n);
  ElboBreakdown bd;
  for (int id : recon_sum) bd.recon.push_back(static_cast<double>(g.scalar(id)) / dn);
  bd.kl_phi = static_cast<double>(g.scalar(kl_phi_sum)) / dn;
  for (int id : kl_eps_sum) bd.kl_eps.push_back(static_cast<double>(g.scalar(id)) / dn);
  double s = 0;
  for (double r : bd.recon) s += r;
  s -= bd.kl_phi;
  for (double k : bd.kl_eps) s -= k;
  bd.total = s;
  return bd;
}

ElboBreakdown elbo(const dataio::MultiViewBatch& batch, const nets::ParamStore<double>& params,
                   const TrainConfig& cfg, std::uint64_t seed) {
  batch.validate();
  std::vector<Dense<double>> views(batch.views.begin(), batch.views.end());
  ElboGraph<double> eg;
  build_elbo(eg, views, params, cfg, seed, false);
  return eg.breakdown(batch.n());
}

std::string format_log_line(std::size_t epoch, const std::string& split,
                            const ElboBreakdown& bd) {
  std::string out = std::to_string(epoch) + ", " + split;
  char buf[64];
  const auto push = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.9g", v);
    out += ", ";
    out += buf;
  };
  for (double r : bd.recon) push(r);
  push(bd.kl_phi);
  for (double k : bd.kl_eps) push(k);
  push(bd.total);
  return out;
}

namespace {

// Accumulates per-datum-average parts weighted by batch rows; finalizes to
// the split-wide breakdown with the exact part-sum total.
struct PartAccumulator {
  std::vector<double> recon;
  double kl_phi = 0;
  std::vector<double> kl_eps;
  double rows = 0;

  explicit PartAccumulator(std::size_t views) : recon(views, 0.0), kl_eps(views, 0.0) {}

  void add(const ElboBreakdown& bd, double weight) {
    for (std::size_t m = 0; m < recon.size(); ++m) recon[m] += bd.recon[m] * weight;
    kl_phi += bd.kl_phi * weight;
    for (std::size_t m = 0; m < kl_eps.size(); ++m) kl_eps[m] += bd.kl_eps[m] * weight;
    rows += weight;
  }

  ElboBreakdown finalize() const {
    ElboBreakdown bd;
    for (double r : recon) bd.recon.push_back(r / rows);
    bd.kl_phi = kl_phi / rows;
    for (double k : kl_eps) bd.kl_eps.push_back(k / rows);
    double s = 0;
    for (double r : bd.recon) s += r;
    s -= bd.kl_phi;
    for (double k : bd.kl_eps) s -= k;
    bd.total = s;
    return bd;
  }
};

template <typename T>
ElboBreakdown evaluate_split(const nets::ParamStore<T>& store, const std::vector<Mat>& views,
                             const TrainConfig& cfg, std::uint64_t seed) {
  const std::size_t n = views[0].rows;
  const std::size_t chunk = 512;
  PartAccumulator acc(views.size());
  std::size_t ci = 0;
  for (std::size_t c0 = 0; c0 < n; c0 += chunk, ++ci) {
    const std::size_t c1 = std::min(n, c0 + chunk);
    std::vector<Dense<T>> vb;
    vb.reserve(views.size());
    for (const Mat& v : views) vb.push_back(take_rows<T>(v, c0, c1));
    ElboGraph<T> eg;
    build_elbo(eg, vb, store, cfg, rng::derive(seed, "chunk." + std::to_string(ci)), false);
    acc.add(eg.breakdown(c1 - c0), static_cast<double>(c1 - c0));
  }
  return acc.finalize();
}

template <typename T>
TrainResult train_impl(const dataio::MultiViewBatch& train_set,
                       const dataio::MultiViewBatch& valid_set, const TrainConfig& cfg) {
  train_set.validate();
  valid_set.validate();
  require(train_set.n() > 0 && valid_set.n() > 0, "train_model: empty split");
  const std::size_t mviews = train_set.views.size();
  require(valid_set.views.size() == mviews, "train_model: split view counts disagree");
  cfg.validate(mviews);
  std::vector<std::size_t> x_dim(mviews);
  for (std::size_t m = 0; m < mviews; ++m) {
    x_dim[m] = train_set.views[m].cols;
    require(valid_set.views[m].cols == x_dim[m], "train_model: split view widths disagree");
  }

  nets::ParamStore<T> store;
  init_model_params(store, cfg, x_dim);
  nets::ParamStore<T> best = store;

  nets::AdamConfig adam;
  adam.lr = cfg.lr;
  adam.weight_decay = cfg.weight_decay;

  TrainResult res;
  const std::size_t n = train_set.n();
  std::vector<std::uint32_t> order(n);
  int strikes = 0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    bool failed = false;
    try {
      std::iota(order.begin(), order.end(), 0u);
      rng::SeqRng shuf(rng::derive(cfg.seed, "shuffle." + std::to_string(epoch)));
      rng::shuffle(order.begin(), order.end(), shuf);

      PartAccumulator train_acc(mviews);
      std::size_t bi = 0;
      for (std::size_t b0 = 0; b0 < n; b0 += cfg.batch, ++bi) {
        const std::size_t b1 = std::min(n, b0 + cfg.batch);
        std::vector<Dense<T>> vb;
        vb.reserve(mviews);
        for (std::size_t m = 0; m < mviews; ++m)
          vb.push_back(gather_rows<T>(train_set.views[m], order, b0, b1));
        ElboGraph<T> eg;
        const std::uint64_t bseed = rng::derive(
            cfg.seed, "mc." + std::to_string(epoch) + "." + std::to_string(bi));
        build_elbo(eg, vb, store, cfg, bseed, true);
        train_acc.add(eg.breakdown(b1 - b0), static_cast<double>(b1 - b0));
        const int loss = eg.g.affine(eg.root, T(-1), T(0));
        eg.g.backward(loss);
        nets::adam_step(store, eg.g, eg.binding, adam);
      }
      const ElboBreakdown tbd = train_acc.finalize();
      res.train_history.push_back(tbd);
      res.log_lines.push_back(format_log_line(epoch, "train", tbd));

      const ElboBreakdown vbd = evaluate_split(
          store, valid_set.views, cfg, rng::derive(cfg.seed, "val." + std::to_string(epoch)));
      res.val_history.push_back(vbd);
      res.log_lines.push_back(format_log_line(epoch, "valid", vbd));

      const double v = vbd.total;
      const bool regressed =
          !std::isfinite(v) ||
          (res.best_epoch > 0 &&
           v < res.best_val_elbo - 10.0 * std::max(1.0, std::abs(res.best_val_elbo)));
      strikes = regressed ? strikes + 1 : 0;
      if (std::isfinite(v) && (res.best_epoch == 0 || v > res.best_val_elbo)) {
        res.best_val_elbo = v;
        res.best_epoch = epoch;
        best = store;
      }
    } catch (const std::exception&) {
      failed = true;
    }
    if (failed) {
      ++strikes;
      store = best;  // rewind to known-good parameters
    }
    if (strikes >= 3) {
      res.halted = true;
      break;
    }
  }

  res.model.cfg = cfg;
  res.model.x_dim = x_dim;
  res.model.params = widen_store(best);
  return res;
}

}  // namespace

TrainResult train_model(const dataio::MultiViewBatch& train_set,
                        const dataio::MultiViewBatch& valid_set, const TrainConfig& cfg) {
  return cfg.precision == Precision::kFloat64 ? train_impl<double>(train_set, valid_set, cfg)
                                              : train_impl<float>(train_set, valid_set, cfg);
}

Mat embed(const VpccaModel& model, const dataio::MultiViewBatch& batch, mvlayer::Mu0Mode mode,
          std::vector<mvlayer::PosteriorMoments>* moments_out) {
  const TrainConfig& cfg = model.cfg;
  const std::size_t mviews = model.x_dim.size();
  cfg.validate(mviews);
  batch.validate();
  require(!batch.views.empty(), "embed: empty batch");

  const bool vcca = cfg.baseline == Baseline::kVcca;
  const bool need_all = cfg.x_star == XStar::kConcat ||
                        (!vcca && mode == mvlayer::Mu0Mode::kMultimodal);

  bool all_views;
  if (batch.views.size() == mviews) {
    for (std::size_t m = 0; m < mviews; ++m)
      require(batch.views[m].cols == model.x_dim[m],
              "embed: view " + view_tag(m) + " width mismatch");
    all_views = true;
  } else {
    require(!need_all, "embed: this mode needs every view");
    require(batch.views.size() == 1, "embed: pass every view or just the primary one");
    require(batch.views[0].cols == model.x_dim[0],
            "embed: the only supplied view does not match the primary view width");
    all_views = false;
  }

  const std::size_t n = batch.n();
  const std::size_t d0 = cfg.d0;
  const std::size_t in_views = all_views ? mviews : 1;
  const std::size_t enc_views = vcca && !moments_out ? 0 : in_views;
  Mat out(n, d0);
  if (moments_out) {
    moments_out->clear();
    moments_out->resize(n);
  }

  const std::size_t chunk = 512;
  for (std::size_t c0 = 0; c0 < n; c0 += chunk) {
    const std::size_t c1 = std::min(n, c0 + chunk);
    const std::size_t rows = c1 - c0;

    std::vector<Dense<double>> x(in_views);
    for (std::size_t m = 0; m < in_views; ++m)
      x[m] = take_rows<double>(batch.views[m], c0, c1);

    std::vector<std::vector<Dense<double>>> enc(enc_views);
    for (std::size_t m = 0; m < enc_views; ++m)
      enc[m] = nets::mlp_apply(model.params, encoder_spec(cfg, m, model.x_dim[m]),
                               "enc" + view_tag(m), x[m], false, 0);

    Dense<double> xstar;
    if (cfg.x_star == XStar::kPrimary) {
      xstar = x[0];
    } else {
      std::size_t total = 0;
      for (std::size_t m = 0; m < mviews; ++m) total += model.x_dim[m];
      xstar = Dense<double>(rows, total);
      std::size_t off = 0;
      for (std::size_t m = 0; m < mviews; ++m) {
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < model.x_dim[m]; ++j) xstar(r, off + j) = x[m](r, j);
        off += model.x_dim[m];
      }
    }
    const auto f0 = nets::mlp_apply(model.params, f0_spec(cfg, model.x_dim), "f0", xstar,
                                    false, 0);

    const std::size_t solve_views =
        vcca ? 0 : (mode == mvlayer::Mu0Mode::kPrimary ? 1 : mviews);
    for (std::size_t r = 0; r < rows; ++r) {
      if (vcca) {
        for (std::size_t i = 0; i < d0; ++i) out(c0 + r, i) = f0[0](r, i);
      } else {
        for (std::size_t i = 0; i < d0; ++i) {
          const double praw = f0[0](r, i);
          const double p =
              std::min(std::max(praw, mvlayer::kPMin), 1.0 - mvlayer::kPMin);
          double denom = cfg.lambda0, numer = 0.0;
          for (std::size_t v = 0; v < solve_views; ++v) {
            const double var = std::max(enc[v][1](r, i), mvlayer::kVarMin);
            const double w = std::sqrt(var) * std::sqrt(p);
            denom += cfg.lambda[v] * w * w;
            numer += cfg.lambda[v] * w * enc[v][0](r, i);
          }
          out(c0 + r, i) = numer / denom;
        }
      }
      if (moments_out) {
        mvlayer::PosteriorMoments& mm = (*moments_out)[c0 + r];
        for (std::size_t m = 0; m < enc_views; ++m) {
          Vec mu(enc[m][0].cols), var(enc[m][0].cols);
          for (std::size_t j = 0; j < mu.size(); ++j) {
            mu[j] = enc[m][0](r, j);
            var[j] = enc[m][1](r, j);
          }
          mm.mu.push_back(std::move(mu));
          mm.var.push_back(std::move(var));
        }
        mm.p = Vec(d0);
        if (!vcca)
          for (std::size_t i = 0; i < d0; ++i) mm.p[i] = f0[0](r, i);
      }
    }
  }
  return out;
}

void save_model(const VpccaModel& model, const std::string& path) {
  model.cfg.validate(model.x_dim.size());
  dataio::TensorContainer c;
  encode_config(c, model.cfg, model.x_dim);
  nets::append_params(c, model.params);
  c.save(path);
}

VpccaModel load_model(const std::string& path) {
  const dataio::TensorContainer c = dataio::TensorContainer::load(path);
  VpccaModel model;
  decode_config(c, model.cfg, model.x_dim);
  model.params = nets::extract_params<double>(c);
  model.cfg.validate(model.x_dim.size());
  return model;
}

template void init_model_params<float>(nets::ParamStore<float>&, const TrainConfig&,
                                       const std::vector<std::size_t>&);
template void init_model_params<double>(nets::ParamStore<double>&, const TrainConfig&,
                                        const std::vector<std::size_t>&);
template void build_elbo<float>(ElboGraph<float>&, const std::vector<Dense<float>>&,
                                const nets::ParamStore<float>&, const TrainConfig&,
                                std::uint64_t, bool);
template void build_elbo<double>(ElboGraph<double>&, const std::vector<Dense<double>>&,
                                 const nets::ParamStore<double>&, const TrainConfig&,
                                 std::uint64_t, bool);
template struct ElboGraph<float>;
template struct ElboGraph<double>;

}  // namespace mvcca::train
