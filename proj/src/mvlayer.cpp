#include "mvcca/mvlayer.hpp"

#include <algorithm>

#include "mvcca/rng.hpp"

namespace mvcca::mvlayer {

namespace {

Vec floored_var(const Vec& var) {
  Vec out = var;
  for (auto& v : out) v = std::max(v, kVarMin);
  return out;
}

Vec clamped_p(const Vec& p) {
  Vec out = p;
  for (auto& x : out) x = std::clamp(x, kPMin, 1.0 - kPMin);
  return out;
}

Vec solve_mu0(const PosteriorMoments& m, const MvLayerParams& params, std::size_t views) {
  const std::size_t d0 = params.w_diag.front().size();
  Vec mu0(d0);
  for (std::size_t i = 0; i < d0; ++i) {
    double denom = params.lambda0, numer = 0.0;
    for (std::size_t v = 0; v < views; ++v) {
      const double w = params.w_diag[v][i];
      denom += params.lambda[v] * w * w;
      numer += params.lambda[v] * w * m.mu[v][i];
    }
    mu0[i] = numer / denom;
  }
  return mu0;
}

}  // namespace

void PosteriorMoments::validate() const {
  require(!mu.empty() && mu.size() == var.size(), "moments: mu/var view counts disagree");
  std::size_t dmin = mu.front().size();
  for (std::size_t v = 0; v < mu.size(); ++v) {
    require(mu[v].size() == var[v].size(), "moments: mu/var lengths disagree");
    dmin = std::min(dmin, mu[v].size());
    for (double x : mu[v]) require(std::isfinite(x), "moments: non-finite mean");
    for (double x : var[v]) require(std::isfinite(x), "moments: non-finite variance");
  }
  require(p.size() <= dmin, "moments: d0 exceeds the smallest view dimension");
}

MvLayerParams build_params(const PosteriorMoments& m, double lambda0, const Vec& lambda,
                           Mu0Mode mode) {
  m.validate();
  require(lambda0 > 0.0, "build_params: lambda0 must be positive");
  require(lambda.size() == m.mu.size(), "build_params: one lambda per view required");
  for (double l : lambda) require(l > 0.0, "build_params: lambda must be positive");

  const std::size_t views = m.mu.size(), d0 = m.p.size();
  MvLayerParams params;
  params.lambda0 = lambda0;
  params.lambda = lambda;
  const Vec p = clamped_p(m.p);

  for (std::size_t v = 0; v < views; ++v) {
    const Vec var = floored_var(m.var[v]);
    Vec w(d0), psi(var.size());
    for (std::size_t i = 0; i < var.size(); ++i) {
      if (i < d0) {
        w[i] = std::sqrt(var[i]) * std::sqrt(p[i]);
        psi[i] = std::max(var[i] * (1.0 - p[i]), kPsiMin);
      } else {
        psi[i] = var[i];
      }
    }
    params.w_diag.push_back(std::move(w));
    params.psi_diag.push_back(std::move(psi));
  }

  params.mu0 = mode == Mu0Mode::kMultimodal ? solve_mu0_multimodal(m, params)
                                            : solve_mu0_primary(m, params);
  for (std::size_t v = 0; v < views; ++v) {
    Vec eps = m.mu[v];
    for (std::size_t i = 0; i < d0; ++i) eps[i] -= params.w_diag[v][i] * params.mu0[i];
    params.mu_eps.push_back(std::move(eps));
  }
  return params;
}

Vec solve_mu0_multimodal(const PosteriorMoments& m, const MvLayerParams& params) {
  require(params.lambda0 > 0.0, "solve_mu0: lambda0 must be positive");
  return solve_mu0(m, params, params.views());
}

Vec solve_mu0_primary(const PosteriorMoments& m, const MvLayerParams& params) {
  require(params.lambda0 > 0.0, "solve_mu0: lambda0 must be positive");
  return solve_mu0(m, params, 1);
}

double kl_phi(const Vec& mu0, double lambda0) {
  require(lambda0 > 0.0, "kl_phi: lambda0 must be positive");
  return kl_phi_core(mu0.data(), mu0.size(), lambda0);
}

double kl_eps(const Vec& mu_eps, const Vec& psi_diag, double lambda) {
  require(lambda > 0.0, "kl_eps: lambda must be positive");
  require(mu_eps.size() == psi_diag.size(), "kl_eps: length mismatch");
  for (double x : psi_diag) require(x > 0.0, "kl_eps: psi must be positive");
  return kl_eps_core(mu_eps.data(), psi_diag.data(), mu_eps.size(), lambda);
}

LatentDraw sample_latents(const MvLayerParams& params, std::size_t n, std::uint64_t seed) {
  const std::size_t views = params.views(), d0 = params.d0();
  LatentDraw draw;
  draw.phi = Mat(n, d0);
  const std::uint64_t sphi = rng::derive(seed, "phi");
  const auto rows = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < d0; ++j)
      draw.phi(i, j) = params.mu0[j] + rng::normal_at(sphi, static_cast<std::uint64_t>(i) * d0 + j);

  for (std::size_t v = 0; v < views; ++v) {
    const std::size_t dm = params.psi_diag[v].size();
    Mat eps(n, dm), z(n, dm);
    const std::uint64_t sv = rng::derive(seed, "eps." + std::to_string(v));
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < dm; ++j) {
        const double xi = rng::normal_at(sv, static_cast<std::uint64_t>(i) * dm + j);
        eps(i, j) = params.mu_eps[v][j] + std::sqrt(params.psi_diag[v][j]) * xi;
        z(i, j) = (j < d0 ? params.w_diag[v][j] * draw.phi(i, j) : 0.0) + eps(i, j);
      }
    draw.eps.push_back(std::move(eps));
    draw.z.push_back(std::move(z));
  }
  return draw;
}

}  // namespace mvcca::mvlayer
