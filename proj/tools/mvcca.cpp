#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "mvcca/config.hpp"
#include "mvcca/dataio.hpp"
#include "mvcca/evalkit.hpp"
#include "mvcca/kernels.hpp"
#include "mvcca/numkit.hpp"
#include "mvcca/pcca.hpp"
#include "mvcca/rng.hpp"
#include "mvcca/train.hpp"

namespace fs = std::filesystem;
using namespace mvcca;

namespace {

/// Files registered here are deleted unless commit() runs: a failing
/// command must not leave partial outputs behind.
class OutputGuard {
 public:
  OutputGuard() = default;
  OutputGuard(const OutputGuard&) = delete;
  OutputGuard& operator=(const OutputGuard&) = delete;
  ~OutputGuard() {
    for (const auto& p : paths_) {
      std::error_code ec;
      fs::remove(p, ec);
    }
  }
  void track(const fs::path& p) { paths_.push_back(p); }
  void commit() { paths_.clear(); }

 private:
  std::vector<fs::path> paths_;
};

struct Common {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out_dir = ".";
  std::uint64_t seed = 0;
  bool seed_given = false;
  int threads = 0;
};

const std::vector<std::string>& known_keys() {
  static const std::vector<std::string> keys = {
      "seed",
      "gen.views", "gen.d", "gen.d0", "gen.p", "gen.n_train", "gen.n_valid", "gen.n_test",
      "gen.k", "gen.separation",
      "fit.d0",
      "model.d0", "model.d", "model.likelihood", "model.baseline", "model.precision",
      "net.enc_hidden", "net.dec_hidden", "net.f0_hidden", "net.dropout", "net.dropout_f0",
      "layer.lambda0", "layer.lambda", "layer.mu0_mode", "layer.x_star",
      "train.mc_samples", "train.batch", "train.lr", "train.epochs", "train.weight_decay",
      "train.seed", "train.valid_frac",
      "sample.n",
      "eval.clusters", "eval.method", "eval.knn",
  };
  return keys;
}

config::Config load_config(const Common& c) {
  config::Config cfg;
  if (!c.config_path.empty()) {
    if (!fs::exists(c.config_path))
      throw std::invalid_argument("no such config file: '" + c.config_path + "'");
    cfg = config::Config::parse_file(c.config_path);
  }
  for (const auto& s : c.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0)
      throw std::invalid_argument("--set expects key=value, got '" + s + "'");
    cfg.set(s.substr(0, eq), s.substr(eq + 1));
  }
  cfg.reject_unknown(known_keys());
  return cfg;
}

std::uint64_t master_seed(const config::Config& cfg, const Common& c) {
  return c.seed_given ? c.seed : cfg.get_u64("seed", 0);
}

std::uint64_t training_seed(const config::Config& cfg, const Common& c) {
  if (c.seed_given) return c.seed;
  return cfg.get_u64("train.seed", cfg.get_u64("seed", 0));
}

std::size_t as_size(std::int64_t v, const std::string& what, std::int64_t min_value) {
  if (v < min_value)
    throw std::invalid_argument("'" + what + "' must be at least " + std::to_string(min_value));
  return static_cast<std::size_t>(v);
}

void require_exists(const std::string& path, const std::string& what) {
  if (!fs::exists(path)) throw std::invalid_argument(what + ": no such file '" + path + "'");
}

void say_wrote(const fs::path& p) { std::printf("wrote %s\n", p.string().c_str()); }

std::vector<std::size_t> parse_sizes(const std::string& text, const std::string& what) {
  std::vector<std::size_t> out;
  for (const auto& piece : config::split_list(text, ','))
    out.push_back(as_size(config::parse_int(piece, what), what, 0));
  return out;
}

/// Single entry replicates across views; otherwise one entry per view.
template <typename T>
std::vector<T> replicate(std::vector<T> v, std::size_t views, const std::string& what) {
  if (v.size() == 1 && views > 1) return std::vector<T>(views, v[0]);
  if (v.size() != views)
    throw std::invalid_argument("'" + what + "' needs one entry or one per view");
  return v;
}

/// Hidden stacks: per-view lists separated by ';', widths by ','. A lone
/// list applies to every view; an empty piece means no hidden layers.
std::vector<std::vector<std::size_t>> parse_stacks(const std::string& text, std::size_t views,
                                                   const std::string& what) {
  std::vector<std::vector<std::size_t>> stacks;
  const auto pieces = config::split_list(text, ';');
  if (pieces.empty()) stacks.push_back({});
  for (const auto& piece : pieces) {
    std::vector<std::size_t> widths;
    for (const auto& w : config::split_list(piece, ','))
      widths.push_back(as_size(config::parse_int(w, what), what, 1));
    stacks.push_back(std::move(widths));
  }
  return replicate(std::move(stacks), views, what);
}

train::Likelihood parse_likelihood(const std::string& s, const std::string& what) {
  if (s == "bernoulli") return train::Likelihood::kBernoulli;
  if (s == "gaussian") return train::Likelihood::kGaussian;
  throw std::invalid_argument("'" + what + "' must be bernoulli or gaussian, got '" + s + "'");
}

train::TrainConfig build_train_config(const config::Config& cfg, std::size_t views,
                                      std::uint64_t seed) {
  train::TrainConfig tc;
  tc.d0 = as_size(cfg.get_int("model.d0"), "model.d0", 1);
  tc.d = replicate(parse_sizes(cfg.get_str("model.d"), "model.d"), views, "model.d");
  tc.enc_hidden = parse_stacks(cfg.get_str("net.enc_hidden", "64"), views, "net.enc_hidden");
  tc.dec_hidden = parse_stacks(cfg.get_str("net.dec_hidden", "64"), views, "net.dec_hidden");
  tc.f0_hidden = parse_sizes(cfg.get_str("net.f0_hidden", "64"), "net.f0_hidden");
  std::vector<train::Likelihood> lik;
  for (const auto& s : config::split_list(cfg.get_str("model.likelihood", "gaussian"), ','))
    lik.push_back(parse_likelihood(s, "model.likelihood"));
  tc.likelihood = replicate(std::move(lik), views, "model.likelihood");
  tc.lambda0 = cfg.get_num("layer.lambda0", 1.0);
  tc.lambda = replicate(cfg.get_num_list("layer.lambda", {1.0}), views, "layer.lambda");
  const std::string mode = cfg.get_str("layer.mu0_mode", "multimodal");
  if (mode == "multimodal") tc.mu0_mode = mvlayer::Mu0Mode::kMultimodal;
  else if (mode == "primary") tc.mu0_mode = mvlayer::Mu0Mode::kPrimary;
  else throw std::invalid_argument("'layer.mu0_mode' must be multimodal or primary");
  const std::string xs = cfg.get_str("layer.x_star", "primary");
  if (xs == "primary") tc.x_star = train::XStar::kPrimary;
  else if (xs == "concat") tc.x_star = train::XStar::kConcat;
  else throw std::invalid_argument("'layer.x_star' must be primary or concat");
  tc.mc_samples = as_size(cfg.get_int("train.mc_samples", 1), "train.mc_samples", 1);
  tc.batch = as_size(cfg.get_int("train.batch", 200), "train.batch", 1);
  tc.lr = cfg.get_num("train.lr", 2e-4);
  tc.epochs = as_size(cfg.get_int("train.epochs", 10), "train.epochs", 1);
  tc.dropout = cfg.get_num("net.dropout", 0.0);
  tc.dropout_f0 = cfg.get_flag("net.dropout_f0", true);
  tc.weight_decay = cfg.get_num("train.weight_decay", 1e-4);
  tc.seed = seed;
  const std::string bl = cfg.get_str("model.baseline", "vpcca");
  if (bl == "vpcca") tc.baseline = train::Baseline::kVpcca;
  else if (bl == "vcca") tc.baseline = train::Baseline::kVcca;
  else throw std::invalid_argument("'model.baseline' must be vpcca or vcca");
  const std::string prec = cfg.get_str("model.precision", "float32");
  if (prec == "float32") tc.precision = train::Precision::kFloat32;
  else if (prec == "float64") tc.precision = train::Precision::kFloat64;
  else throw std::invalid_argument("'model.precision' must be float32 or float64");
  tc.validate(views);
  return tc;
}

/// Random well-conditioned model with prescribed canonical correlations:
/// W_m = Sigma_mm^{1/2} U_m P^{1/2} for random SPD Sigma_mm and random
/// orthonormal U_m, so the implied joint Gaussian has correlations p.
pcca::LinearPccaModel make_linear_model(std::size_t views, const std::vector<std::size_t>& dims,
                                        std::size_t d0, Vec p, std::uint64_t master) {
  for (double v : p)
    if (!(v > 0.0 && v < 1.0))
      throw std::invalid_argument("'gen.p' entries must lie strictly inside (0, 1)");
  std::sort(p.begin(), p.end(), std::greater<>());
  pcca::LinearPccaModel model;
  model.m_views = views;
  model.d0 = d0;
  model.mu0 = Vec(d0, 0.0);
  model.p = p;
  for (std::size_t m = 0; m < views; ++m) {
    const std::size_t d = dims[m];
    if (d < d0) throw std::invalid_argument("'gen.d' entries must be at least gen.d0");
    rng::SeqRng r(rng::derive(master, "gen.view." + std::to_string(m + 1)));
    Mat b(d, d);
    for (auto& v : b.v) v = 0.5 * r.normal();
    Mat sigma = kernels::matmul_nt(b, b);
    for (std::size_t i = 0; i < d; ++i) sigma(i, i) += 1.0;
    Mat g(d, d0);
    for (auto& v : g.v) v = r.normal();
    const Mat u = numkit::svd(g).u;
    Mat up = u;
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d0; ++j) up(i, j) *= std::sqrt(p[j]);
    Mat w = kernels::matmul(numkit::spd_sqrt(sigma), up);
    Mat psi = sigma;
    const Mat wwt = kernels::matmul_nt(w, w);
    for (std::size_t i = 0; i < psi.v.size(); ++i) psi.v[i] -= wwt.v[i];
    Vec mu_eps(d, 0.0);
    for (auto& v : mu_eps) v = 0.5 * r.normal();
    model.w.push_back(std::move(w));
    model.psi.push_back(std::move(psi));
    model.mu_eps.push_back(std::move(mu_eps));
  }
  model.validate();
  return model;
}

void save_split(OutputGuard& guard, const dataio::MultiViewBatch& all, std::size_t begin,
                std::size_t count, const fs::path& path) {
  if (count == 0) return;
  guard.track(path);
  dataio::save_batch(path.string(), dataio::slice(all, begin, begin + count));
  say_wrote(path);
}

void cmd_gen_synth(const config::Config& cfg, const fs::path& out, std::uint64_t master) {
  const std::size_t views = as_size(cfg.get_int("gen.views", 2), "gen.views", 1);
  const auto dims = replicate(parse_sizes(cfg.get_str("gen.d"), "gen.d"), views, "gen.d");
  const std::size_t d0 = as_size(cfg.get_int("gen.d0"), "gen.d0", 1);
  const Vec p = cfg.get_num_list("gen.p");
  if (p.size() != d0) throw std::invalid_argument("'gen.p' needs exactly gen.d0 entries");
  const std::size_t n_train = as_size(cfg.get_int("gen.n_train"), "gen.n_train", 1);
  const std::size_t n_valid = as_size(cfg.get_int("gen.n_valid", 0), "gen.n_valid", 0);
  const std::size_t n_test = as_size(cfg.get_int("gen.n_test", 0), "gen.n_test", 0);
  const std::size_t k = as_size(cfg.get_int("gen.k", 0), "gen.k", 0);
  const double separation = cfg.get_num("gen.separation", 8.0);

  const auto model = make_linear_model(views, dims, d0, p, master);
  OutputGuard guard;
  const fs::path model_path = out / "model.mvt";
  guard.track(model_path);
  pcca::save_model(model_path.string(), model);
  say_wrote(model_path);

  const std::size_t total = n_train + n_valid + n_test;
  const std::uint64_t data_seed = rng::derive(master, "gen.data");
  const dataio::MultiViewBatch all =
      k >= 1 ? dataio::gen_synthetic_planted(model, total, k, separation, data_seed)
             : dataio::gen_synthetic(model, total, data_seed);
  save_split(guard, all, 0, n_train, out / "train.mvt");
  save_split(guard, all, n_train, n_valid, out / "valid.mvt");
  save_split(guard, all, n_train + n_valid, n_test, out / "test.mvt");
  guard.commit();
}

void cmd_make_views(const fs::path& out, std::uint64_t master, const std::string& images,
                    const std::string& labels, std::size_t digits) {
  const bool idx_given = !images.empty() || !labels.empty();
  if (idx_given == (digits > 0))
    throw std::invalid_argument("make-views: pass either --images with --labels, or --digits");
  dataio::MultiViewBatch base;
  if (idx_given) {
    if (images.empty() || labels.empty())
      throw std::invalid_argument("make-views: --images and --labels go together");
    require_exists(images, "make-views");
    require_exists(labels, "make-views");
    base = dataio::load_idx(images, labels);
  } else {
    base = dataio::make_digit_corpus(digits, rng::derive(master, "digits"));
  }
  const auto two = dataio::make_two_view(base, rng::derive(master, "views"));
  OutputGuard guard;
  const fs::path path = out / "views.mvt";
  guard.track(path);
  dataio::save_batch(path.string(), two);
  say_wrote(path);
  guard.commit();
}

void cmd_fit_linear(const config::Config& cfg, const fs::path& out, const std::string& data) {
  require_exists(data, "fit-linear");
  const auto batch = dataio::load_batch(data);
  batch.validate();
  if (batch.views.size() < 2)
    throw std::invalid_argument("fit-linear: the dataset needs at least two views");
  const std::size_t d0 = as_size(cfg.get_int("fit.d0"), "fit.d0", 1);
  const auto model = batch.views.size() == 2
                         ? pcca::fit_pcca_ml(batch.views[0], batch.views[1], d0)
                         : pcca::fit_mv_ml(batch.views, d0);
  OutputGuard guard;
  const fs::path path = out / "linear_model.mvt";
  guard.track(path);
  pcca::save_model(path.string(), model);
  say_wrote(path);
  std::vector<std::pair<std::string, double>> metrics;
  for (std::size_t i = 0; i < model.p.size(); ++i)
    metrics.emplace_back("p_" + std::to_string(i), model.p[i]);
  metrics.emplace_back("clipped_p", static_cast<double>(model.clipped_p));
  std::fputs(evalkit::metric_report(metrics).c_str(), stdout);
  guard.commit();
}

/// Returns train/validation sets: an explicit --valid file, or a held-out
/// tail fraction of the train file.
std::pair<dataio::MultiViewBatch, dataio::MultiViewBatch> load_split(const config::Config& cfg,
                                                                     const std::string& data,
                                                                     const std::string& valid) {
  require_exists(data, "train");
  auto train_set = dataio::load_batch(data);
  train_set.validate();
  if (!valid.empty()) {
    require_exists(valid, "train");
    auto valid_set = dataio::load_batch(valid);
    valid_set.validate();
    return {std::move(train_set), std::move(valid_set)};
  }
  const double frac = cfg.get_num("train.valid_frac", 0.2);
  if (!(frac > 0.0 && frac < 1.0))
    throw std::invalid_argument("'train.valid_frac' must lie in (0, 1) when --valid is absent");
  const std::size_t n = train_set.n();
  std::size_t held = static_cast<std::size_t>(frac * static_cast<double>(n) + 0.5);
  held = std::min(std::max<std::size_t>(held, 1), n - 1);
  auto valid_set = dataio::slice(train_set, n - held, n);
  train_set = dataio::slice(train_set, 0, n - held);
  return {std::move(train_set), std::move(valid_set)};
}

void cmd_train(const config::Config& cfg, const fs::path& out, std::uint64_t seed,
               const std::string& data, const std::string& valid) {
  const auto [train_set, valid_set] = load_split(cfg, data, valid);
  const auto tc = build_train_config(cfg, train_set.views.size(), seed);
  const auto result = train::train_model(train_set, valid_set, tc);

  OutputGuard guard;
  const fs::path ckpt = out / "checkpoint.mvt";
  guard.track(ckpt);
  train::save_model(result.model, ckpt.string());
  say_wrote(ckpt);
  const fs::path logp = out / "train_log.txt";
  guard.track(logp);
  {
    std::ofstream lf(logp, std::ios::binary);
    for (const auto& line : result.log_lines) lf << line << '\n';
    if (!lf.good()) throw std::runtime_error("train: cannot write '" + logp.string() + "'");
  }
  say_wrote(logp);
  std::fputs(evalkit::metric_report({{"best_epoch", static_cast<double>(result.best_epoch)},
                                     {"best_val_elbo", result.best_val_elbo},
                                     {"halted", result.halted ? 1.0 : 0.0}})
                 .c_str(),
             stdout);
  guard.commit();
}

void cmd_embed(const fs::path& out, const std::string& model_path, const std::string& data,
               const std::string& mode_flag) {
  require_exists(model_path, "embed");
  require_exists(data, "embed");
  const auto model = train::load_model(model_path);
  const auto batch = dataio::load_batch(data);
  batch.validate();
  mvlayer::Mu0Mode mode = model.cfg.mu0_mode;
  if (mode_flag == "multimodal") mode = mvlayer::Mu0Mode::kMultimodal;
  else if (mode_flag == "primary") mode = mvlayer::Mu0Mode::kPrimary;
  else if (!mode_flag.empty())
    throw std::invalid_argument("embed: --mode must be multimodal or primary");
  const Mat z = train::embed(model, batch, mode);

  dataio::TensorContainer t;
  t.add_mat("z", z);
  if (batch.has_labels()) {
    Vec lv(batch.labels.size());
    for (std::size_t i = 0; i < lv.size(); ++i) lv[i] = static_cast<double>(batch.labels[i]);
    t.add_vec("labels", lv);
  }
  OutputGuard guard;
  const fs::path path = out / "embeddings.mvt";
  guard.track(path);
  t.save(path.string());
  say_wrote(path);
  guard.commit();
}

void cmd_sample(const config::Config& cfg, const fs::path& out, std::uint64_t master,
                const std::string& model_path) {
  require_exists(model_path, "sample");
  const auto model = pcca::load_model(model_path);
  const std::size_t n = as_size(cfg.get_int("sample.n"), "sample.n", 1);
  const auto batch = pcca::sample_generative(model, n, rng::derive(master, "sample"));
  OutputGuard guard;
  const fs::path path = out / "samples.mvt";
  guard.track(path);
  dataio::save_batch(path.string(), batch);
  say_wrote(path);
  guard.commit();
}

void cmd_eval(const config::Config& cfg, std::uint64_t master, const std::string& embeddings) {
  require_exists(embeddings, "eval");
  const auto t = dataio::TensorContainer::load(embeddings);
  const Mat z = t.get_mat("z");
  if (!t.has("labels"))
    throw std::invalid_argument("eval: the embeddings file carries no labels record");
  const Vec lv = t.get_vec("labels");
  if (lv.size() != z.rows)
    throw std::invalid_argument("eval: label count differs from embedding rows");
  std::vector<int> labels(lv.size());
  for (std::size_t i = 0; i < lv.size(); ++i) labels[i] = static_cast<int>(std::llround(lv[i]));
  const std::size_t distinct = std::set<int>(labels.begin(), labels.end()).size();

  const std::size_t k = as_size(cfg.get_int("eval.clusters", static_cast<std::int64_t>(distinct)),
                                "eval.clusters", 1);
  const std::string method = cfg.get_str("eval.method", "kmeans");
  const std::size_t knn = as_size(cfg.get_int("eval.knn", 10), "eval.knn", 1);
  const std::uint64_t seed = rng::derive(master, "eval");
  evalkit::ClusteringResult res;
  if (method == "kmeans") res = evalkit::kmeans(z, k, seed);
  else if (method == "spectral") res = evalkit::spectral_cluster(z, k, knn, seed);
  else throw std::invalid_argument("'eval.method' must be kmeans or spectral");

  std::fputs(evalkit::metric_report({{"nmi", evalkit::nmi(labels, res.assignments)},
                                     {"acc", evalkit::acc(labels, res.assignments)},
                                     {"ari", evalkit::ari(labels, res.assignments)},
                                     {"inertia", res.inertia}})
                 .c_str(),
             stdout);
}

void cmd_grid(const config::Config& cfg, const fs::path& out, std::uint64_t seed,
              const std::string& data, const std::string& valid) {
  const auto [train_set, valid_set] = load_split(cfg, data, valid);

  std::vector<std::pair<std::string, std::vector<std::string>>> sweeps;
  for (const auto& kv : cfg.entries()) {
    if (kv.first.rfind("grid.", 0) != 0) continue;
    auto values = config::split_list(kv.second, ',');
    if (values.empty())
      throw std::invalid_argument("grid: '" + kv.first + "' lists no values");
    sweeps.emplace_back(kv.first.substr(5), std::move(values));
  }
  if (sweeps.empty()) throw std::invalid_argument("grid: no grid.* keys configured");

  std::vector<std::pair<double, std::string>> rows;
  std::vector<std::size_t> idx(sweeps.size(), 0);
  while (true) {
    config::Config run_cfg = cfg;
    std::string combo;
    for (std::size_t s = 0; s < sweeps.size(); ++s) {
      const auto& [key, values] = sweeps[s];
      run_cfg.set(key, values[idx[s]]);
      combo += (combo.empty() ? "" : " ") + key + "=" + values[idx[s]];
    }
    const auto tc = build_train_config(run_cfg, train_set.views.size(),
                                       rng::derive(seed, "grid " + combo));
    const auto result = train::train_model(train_set, valid_set, tc);
    rows.emplace_back(result.best_val_elbo, combo);

    std::size_t pos = 0;
    while (pos < idx.size()) {
      if (++idx[pos] < sweeps[pos].second.size()) break;
      idx[pos] = 0;
      ++pos;
    }
    if (pos == idx.size()) break;
  }
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });

  std::string table;
  char buf[64];
  for (const auto& [elbo, combo] : rows) {
    std::snprintf(buf, sizeof buf, "%.9g", elbo);
    table += "best_val_elbo=" + std::string(buf) + " " + combo + "\n";
  }
  OutputGuard guard;
  const fs::path path = out / "grid.txt";
  guard.track(path);
  {
    std::ofstream gf(path, std::ios::binary);
    gf << table;
    if (!gf.good()) throw std::runtime_error("grid: cannot write '" + path.string() + "'");
  }
  std::fputs(table.c_str(), stdout);
  guard.commit();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deep probabilistic multi-view toolkit"};
  app.require_subcommand(1);

  Common c;
  app.add_option("--config", c.config_path, "key=value configuration file");
  app.add_option("--set", c.sets, "override one config key, key=value (repeatable)");
  auto* seed_opt = app.add_option("--seed", c.seed, "master seed");
  app.add_option("--out", c.out_dir, "output directory (created when missing)");
  app.add_option("--threads", c.threads, "worker thread count");

  std::string data_path, valid_path, model_path, embeddings_path, images_path, labels_path;
  std::string mode_flag;
  std::size_t digits_n = 0;

  auto* gen = app.add_subcommand("gen-synth", "sample synthetic datasets from a linear model");
  auto* mkv = app.add_subcommand("make-views", "build the rotated/noisy two-view dataset");
  mkv->add_option("--images", images_path, "IDX image file");
  mkv->add_option("--labels", labels_path, "IDX label file");
  mkv->add_option("--digits", digits_n, "render n procedural digits instead of reading IDX");
  auto* fit = app.add_subcommand("fit-linear", "closed-form linear fit and correlation report");
  fit->add_option("--data", data_path, "dataset container")->required();
  auto* trn = app.add_subcommand("train", "minibatch variational training");
  trn->add_option("--data", data_path, "training dataset")->required();
  trn->add_option("--valid", valid_path, "validation dataset (default: held-out tail)");
  auto* emb = app.add_subcommand("embed", "shared-representation means from a checkpoint");
  emb->add_option("--model", model_path, "checkpoint file")->required();
  emb->add_option("--data", data_path, "dataset container")->required();
  emb->add_option("--mode", mode_flag, "multimodal|primary (default: checkpoint setting)");
  auto* smp = app.add_subcommand("sample", "draw observations from a linear model file");
  smp->add_option("--model", model_path, "linear model file")->required();
  auto* evl = app.add_subcommand("eval", "cluster embeddings and score against labels");
  evl->add_option("--embeddings", embeddings_path, "embeddings container")->required();
  auto* grd = app.add_subcommand("grid", "grid search over grid.* config sweeps");
  grd->add_option("--data", data_path, "training dataset")->required();
  grd->add_option("--valid", valid_path, "validation dataset (default: held-out tail)");

  for (auto* sub : {gen, mkv, fit, trn, emb, smp, evl, grd}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    c.seed_given = seed_opt->count() > 0;
    const config::Config cfg = load_config(c);
    if (c.threads > 0) kernels::set_threads(c.threads);
    const fs::path out = c.out_dir;
    fs::create_directories(out);

    if (gen->parsed()) cmd_gen_synth(cfg, out, master_seed(cfg, c));
    else if (mkv->parsed()) cmd_make_views(out, master_seed(cfg, c), images_path, labels_path, digits_n);
    else if (fit->parsed()) cmd_fit_linear(cfg, out, data_path);
    else if (trn->parsed()) cmd_train(cfg, out, training_seed(cfg, c), data_path, valid_path);
    else if (emb->parsed()) cmd_embed(out, model_path, data_path, mode_flag);
    else if (smp->parsed()) cmd_sample(cfg, out, master_seed(cfg, c), model_path);
    else if (evl->parsed()) cmd_eval(cfg, master_seed(cfg, c), embeddings_path);
    else if (grd->parsed()) cmd_grid(cfg, out, training_seed(cfg, c), data_path, valid_path);
    return 0;
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (auto& ch : msg)
      if (ch == '\n') ch = ' ';
    std::fprintf(stderr, "error: %s\n", msg.c_str());
    return 1;
  }
}
