#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "common.hpp"
#include "mvcca/mvlayer.hpp"

using namespace mvcca;
using mvlayer::Mu0Mode;

namespace {

mvlayer::PosteriorMoments random_moments(std::size_t views, const std::vector<std::size_t>& dims,
                                         std::size_t d0, std::uint64_t seed) {
  mvlayer::PosteriorMoments m;
  rng::SeqRng r(seed);
  for (std::size_t v = 0; v < views; ++v) {
    Vec mu(dims[v]), var(dims[v]);
    for (auto& x : mu) x = 2.0 * r.normal();
    for (auto& x : var) x = 0.3 + 2.0 * r.uniform();
    m.mu.push_back(std::move(mu));
    m.var.push_back(std::move(var));
  }
  m.p.resize(d0);
  for (auto& x : m.p) x = 0.05 + 0.9 * r.uniform();
  return m;
}

/// The mean-optimization objective: 1/2 lambda0 |mu0|^2
/// + 1/2 sum_m lambda_m |mu_m - W_m mu0|^2 over the selected views.
double mu0_objective(const mvlayer::PosteriorMoments& m, const mvlayer::MvLayerParams& p,
                     const Vec& mu0, bool primary_only) {
  double obj = 0.0;
  for (double x : mu0) obj += 0.5 * p.lambda0 * x * x;
  const std::size_t views = primary_only ? 1 : p.views();
  for (std::size_t v = 0; v < views; ++v) {
    for (std::size_t i = 0; i < m.mu[v].size(); ++i) {
      const double wmu = i < mu0.size() ? p.w_diag[v][i] * mu0[i] : 0.0;
      const double r = m.mu[v][i] - wmu;
      obj += 0.5 * p.lambda[v] * r * r;
    }
  }
  return obj;
}

/// Gradient-descent minimizer of the same objective, to gradient norm 1e-10.
Vec mu0_by_descent(const mvlayer::PosteriorMoments& m, const mvlayer::MvLayerParams& p,
                   bool primary_only) {
  const std::size_t d0 = p.d0();
  Vec mu0(d0, 0.0);
  double lip = p.lambda0;
  const std::size_t views = primary_only ? 1 : p.views();
  for (std::size_t v = 0; v < views; ++v) {
    double wmax = 0.0;
    for (double w : p.w_diag[v]) wmax = std::max(wmax, w * w);
    lip += p.lambda[v] * wmax;
  }
  const double step = 1.0 / lip;
  for (int it = 0; it < 200000; ++it) {
    Vec grad(d0);
    for (std::size_t i = 0; i < d0; ++i) grad[i] = p.lambda0 * mu0[i];
    for (std::size_t v = 0; v < views; ++v)
      for (std::size_t i = 0; i < d0; ++i)
        grad[i] -= p.lambda[v] * p.w_diag[v][i] * (m.mu[v][i] - p.w_diag[v][i] * mu0[i]);
    double gn = 0.0;
    for (double g : grad) gn += g * g;
    if (std::sqrt(gn) <= 1e-10) break;
    for (std::size_t i = 0; i < d0; ++i) mu0[i] -= step * grad[i];
  }
  return mu0;
}

double mc_kl_phi(const Vec& mu0, double lambda0, std::size_t samples, std::uint64_t seed) {
  const std::size_t d0 = mu0.size();
  double acc = 0.0;
  for (std::size_t s = 0; s < samples; ++s) {
    double term = 0.0;
    for (std::size_t i = 0; i < d0; ++i) {
      const double xi = rng::normal_at(seed, s * d0 + i);
      const double x = mu0[i] + xi;
      term += 0.5 * (lambda0 * x * x - xi * xi - std::log(lambda0));
    }
    acc += term;
  }
  return acc / static_cast<double>(samples);
}

double mc_kl_eps(const Vec& mu, const Vec& psi, double lambda, std::size_t samples,
                 std::uint64_t seed) {
  const std::size_t d = mu.size();
  double acc = 0.0;
  for (std::size_t s = 0; s < samples; ++s) {
    double term = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double xi = rng::normal_at(seed, s * d + i);
      const double x = mu[i] + std::sqrt(psi[i]) * xi;
      term += 0.5 * (lambda * x * x - xi * xi - std::log(lambda * psi[i]));
    }
    acc += term;
  }
  return acc / static_cast<double>(samples);
}

}  // namespace

TEST_CASE("build_params edge cases follow the diagonal construction") {
  mvlayer::PosteriorMoments m;
  m.mu = {{1.0, -2.0, 0.5}, {0.25, 0.0, 3.0, -1.0}};
  m.var = {{1.0, 1.0, 1.0}, {1.0, 1.0, 1.0, 1.0}};
  m.p = {0.0, 0.0};  // floored to p_min inside

  auto params = mvlayer::build_params(m, 1.0, {1.0, 1.0}, Mu0Mode::kMultimodal);
  for (std::size_t v = 0; v < 2; ++v) {
    for (double w : params.w_diag[v]) CHECK(std::abs(w) <= 0.02);
    for (std::size_t i = 0; i < m.mu[v].size(); ++i) {
      CHECK(params.psi_diag[v][i] == doctest::Approx(1.0).epsilon(2e-4));
      CHECK(params.mu_eps[v][i] == doctest::Approx(m.mu[v][i]).epsilon(1e-3));
    }
  }

  m.p = {1.0, 1.0};  // clamped to 1 - p_min
  params = mvlayer::build_params(m, 1.0, {1.0, 1.0}, Mu0Mode::kMultimodal);
  for (std::size_t v = 0; v < 2; ++v) {
    for (double w : params.w_diag[v]) CHECK(w == doctest::Approx(1.0).epsilon(2e-4));
    for (std::size_t i = 0; i < 2; ++i) CHECK(params.psi_diag[v][i] <= 2e-4);
    for (std::size_t i = 2; i < m.mu[v].size(); ++i)
      CHECK(params.psi_diag[v][i] == doctest::Approx(1.0).epsilon(1e-12));
  }

  // W W^T + Psi = diag(var) holds exactly on every coordinate
  const auto rm = random_moments(2, {5, 7}, 3, 9);
  const auto rp = mvlayer::build_params(rm, 0.7, {1.3, 0.8}, Mu0Mode::kMultimodal);
  for (std::size_t v = 0; v < 2; ++v)
    for (std::size_t i = 0; i < rm.var[v].size(); ++i) {
      const double w = i < 3 ? rp.w_diag[v][i] : 0.0;
      CHECK(w * w + rp.psi_diag[v][i] == doctest::Approx(rm.var[v][i]).epsilon(1e-12));
    }
}

TEST_CASE("mu0 solvers match closed-form examples and the descent oracle") {
  // M = 1, lambda0 = lambda1 = 1, W = I: mu0 = v / 2
  mvlayer::PosteriorMoments m;
  m.mu = {{2.0, -4.0}};
  m.var = {{1.0, 1.0}};
  m.p = {1.0, 1.0};
  auto p = mvlayer::build_params(m, 1.0, {1.0}, Mu0Mode::kMultimodal);
  p.w_diag[0] = {1.0, 1.0};  // exact identity loading for the closed form
  const Vec v2 = mvlayer::solve_mu0_multimodal(m, p);
  CHECK(v2[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(v2[1] == doctest::Approx(-2.0).epsilon(1e-12));
  const Vec v2p = mvlayer::solve_mu0_primary(m, p);
  CHECK(v2p[0] == doctest::Approx(v2[0]).epsilon(1e-12));

  // dominant prior shrinks mu0 to zero
  auto strong = p;
  strong.lambda0 = 1e6;
  const Vec shrunk = mvlayer::solve_mu0_multimodal(m, strong);
  double wm = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < 2; ++i) {
    wm += std::abs(strong.w_diag[0][i] * m.mu[0][i]);
    nn += std::abs(shrunk[i]);
  }
  CHECK(nn <= 1e-4 * wm);

  // random instances against gradient descent on the objective
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    const auto rm = random_moments(3, {4, 6, 5}, 4, seed);
    const auto rp = mvlayer::build_params(rm, 0.5 + 0.1 * seed, {1.0, 2.0, 0.5},
                                          Mu0Mode::kMultimodal);
    const Vec want = mu0_by_descent(rm, rp, false);
    const Vec got = mvlayer::solve_mu0_multimodal(rm, rp);
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got[i] - want[i]) <= 1e-6);

    const Vec wantp = mu0_by_descent(rm, rp, true);
    const Vec gotp = mvlayer::solve_mu0_primary(rm, rp);
    for (std::size_t i = 0; i < gotp.size(); ++i) CHECK(std::abs(gotp[i] - wantp[i]) <= 1e-6);

    // global-minimizer dominance on the full objective
    CHECK(mu0_objective(rm, rp, got, false) <= mu0_objective(rm, rp, gotp, false) + 1e-12);
  }
}

TEST_CASE("closed-form kl_phi matches examples and Monte Carlo") {
  CHECK(mvlayer::kl_phi({0.0, 0.0}, 1.0) == 0.0);
  CHECK(mvlayer::kl_phi({1.0, 0.0}, 1.0) == doctest::Approx(0.5).epsilon(1e-12));

  const Vec mu0 = {0.7, -0.4, 0.2};
  const double lambda0 = 1.8;
  const double exact = mvlayer::kl_phi(mu0, lambda0);
  CHECK(exact > 0.0);
  const double mc = mc_kl_phi(mu0, lambda0, 1000000, 5);
  CHECK(testutil::rel_err(mc, exact) <= 0.01);
}

TEST_CASE("closed-form kl_eps matches examples and Monte Carlo") {
  CHECK(mvlayer::kl_eps({0.0, 0.0, 0.0}, {0.5, 0.5, 0.5}, 2.0) <= 1e-15);
  CHECK(mvlayer::kl_eps({0.0}, {2.0}, 1.0) ==
        doctest::Approx(0.5 * (2.0 - std::log(2.0) - 1.0)).epsilon(1e-12));

  const Vec mu = {0.3, -0.6};
  const Vec psi = {0.4, 2.5};
  const double lambda = 1.3;
  const double exact = mvlayer::kl_eps(mu, psi, lambda);
  const double mc = mc_kl_eps(mu, psi, lambda, 1000000, 6);
  CHECK(testutil::rel_err(mc, exact) <= 0.01);
}

TEST_CASE("total KL decomposes additively over the factored posterior") {
  const auto m = random_moments(2, {3, 4}, 2, 21);
  const auto p = mvlayer::build_params(m, 1.4, {0.9, 1.1}, Mu0Mode::kMultimodal);
  const double closed = mvlayer::kl_phi(p.mu0, p.lambda0) +
                        mvlayer::kl_eps(p.mu_eps[0], p.psi_diag[0], p.lambda[0]) +
                        mvlayer::kl_eps(p.mu_eps[1], p.psi_diag[1], p.lambda[1]);
  // joint MC over (phi, eps_1, eps_2) drawn together
  const std::size_t samples = 400000;
  double acc = 0.0;
  rng::SeqRng r(22);
  for (std::size_t s = 0; s < samples; ++s) {
    double term = 0.0;
    for (std::size_t i = 0; i < p.d0(); ++i) {
      const double xi = r.normal();
      const double x = p.mu0[i] + xi;
      term += 0.5 * (p.lambda0 * x * x - xi * xi - std::log(p.lambda0));
    }
    for (std::size_t v = 0; v < 2; ++v)
      for (std::size_t i = 0; i < p.mu_eps[v].size(); ++i) {
        const double xi = r.normal();
        const double x = p.mu_eps[v][i] + std::sqrt(p.psi_diag[v][i]) * xi;
        term += 0.5 * (p.lambda[v] * x * x - xi * xi - std::log(p.lambda[v] * p.psi_diag[v][i]));
      }
    acc += term;
  }
  CHECK(testutil::rel_err(acc / samples, closed) <= 0.02);
}

TEST_CASE("sample_latents honors the construction and its moments") {
  const auto m = random_moments(2, {4, 4}, 3, 31);
  const auto p = mvlayer::build_params(m, 1.0, {1.0, 1.0}, Mu0Mode::kMultimodal);

  const auto draw = mvlayer::sample_latents(p, 200000, 41);
  REQUIRE(draw.phi.rows == 200000);
  // z = phi W^T + eps holds exactly
  for (std::size_t v = 0; v < 2; ++v)
    for (std::size_t i = 0; i < 50; ++i)
      for (std::size_t j = 0; j < 4; ++j) {
        const double wphi = j < 3 ? p.w_diag[v][j] * draw.phi(i, j) : 0.0;
        CHECK(draw.z[v](i, j) == wphi + draw.eps[v](i, j));
      }

  // empirical mean of z_m near mu_m (3 standard errors)
  for (std::size_t v = 0; v < 2; ++v) {
    const Vec mean = testutil::colmean(draw.z[v]);
    for (std::size_t j = 0; j < 4; ++j) {
      const double se = std::sqrt(m.var[v][j] / 200000.0);
      CHECK(std::abs(mean[j] - m.mu[v][j]) <= 3.5 * se);
    }
  }

  // per-view covariance diag(var) within 2%, correlations near p
  for (std::size_t v = 0; v < 2; ++v) {
    const Mat cov = testutil::sample_cov(draw.z[v], draw.z[v]);
    for (std::size_t j = 0; j < 4; ++j)
      CHECK(testutil::rel_err(cov(j, j), m.var[v][j]) <= 0.02);
  }
  const Mat cross = testutil::sample_cov(draw.z[0], draw.z[1]);
  for (std::size_t j = 0; j < 3; ++j) {
    const double corr = cross(j, j) / std::sqrt(m.var[0][j] * m.var[1][j]);
    CHECK(std::abs(corr - p.w_diag[0][j] * p.w_diag[1][j] /
                              std::sqrt(m.var[0][j] * m.var[1][j])) <= 0.02);
    CHECK(std::abs(corr - m.p[j]) <= 0.02);
  }

  // determinism per seed
  const auto again = mvlayer::sample_latents(p, 100, 41);
  CHECK(again.z[0].v == std::vector<double>(draw.z[0].v.begin(), draw.z[0].v.begin() + 400));
}

TEST_CASE("collapsed posterior pins z to the view means") {
  mvlayer::PosteriorMoments m;
  m.mu = {{0.5, -1.5}, {2.0, 0.0}};
  m.var = {{0.0, 0.0}, {0.0, 0.0}};  // floored to var_min
  m.p = {0.0};
  const auto p = mvlayer::build_params(m, 1.0, {1.0, 1.0}, Mu0Mode::kMultimodal);
  const auto draw = mvlayer::sample_latents(p, 200, 4);
  for (std::size_t v = 0; v < 2; ++v)
    for (std::size_t i = 0; i < 200; ++i)
      for (std::size_t j = 0; j < 2; ++j)
        CHECK(std::abs(draw.z[v](i, j) - m.mu[v][j]) <= 0.02);
}

TEST_CASE("pathwise derivatives match finite differences") {
  const auto m = random_moments(2, {3, 3}, 2, 51);
  auto p = mvlayer::build_params(m, 1.3, {0.8, 1.2}, Mu0Mode::kMultimodal);

  // kl_phi gradient wrt mu0: lambda0 * mu0
  for (std::size_t i = 0; i < p.d0(); ++i) {
    const double h = 1e-6;
    Vec lo = p.mu0, hi = p.mu0;
    hi[i] += h;
    lo[i] -= h;
    const double fd = (mvlayer::kl_phi(hi, p.lambda0) - mvlayer::kl_phi(lo, p.lambda0)) / (2 * h);
    CHECK(testutil::rel_err(fd, p.lambda0 * p.mu0[i]) <= 1e-5);
  }

  // kl_eps gradients wrt mu and psi
  const Vec mu = p.mu_eps[0], psi = p.psi_diag[0];
  const double lam = p.lambda[0];
  for (std::size_t i = 0; i < mu.size(); ++i) {
    const double h = 1e-6;
    Vec mh = mu, ml = mu;
    mh[i] += h;
    ml[i] -= h;
    double fd = (mvlayer::kl_eps(mh, psi, lam) - mvlayer::kl_eps(ml, psi, lam)) / (2 * h);
    CHECK(testutil::rel_err(fd, lam * mu[i]) <= 1e-5);
    Vec ph = psi, pl = psi;
    ph[i] += h;
    pl[i] -= h;
    fd = (mvlayer::kl_eps(mu, ph, lam) - mvlayer::kl_eps(mu, pl, lam)) / (2 * h);
    CHECK(testutil::rel_err(fd, 0.5 * (lam - 1.0 / psi[i])) <= 1e-5);
  }

  // z depends on (w, mu_eps, psi) pathwise with xi held fixed by the seed
  const std::uint64_t seed = 61;
  const std::size_t row = 3, col = 1;
  auto z_at = [&](const mvlayer::MvLayerParams& q) {
    return mvlayer::sample_latents(q, 8, seed).z[0](row, col);
  };
  const auto draw = mvlayer::sample_latents(p, 8, seed);
  const double h = 1e-6;

  auto ph = p, pl = p;
  ph.w_diag[0][col] += h;
  pl.w_diag[0][col] -= h;
  CHECK(testutil::rel_err((z_at(ph) - z_at(pl)) / (2 * h), draw.phi(row, col)) <= 1e-5);

  ph = pl = p;
  ph.mu_eps[0][col] += h;
  pl.mu_eps[0][col] -= h;
  CHECK(testutil::rel_err((z_at(ph) - z_at(pl)) / (2 * h), 1.0) <= 1e-5);

  ph = pl = p;
  ph.psi_diag[0][col] += h;
  pl.psi_diag[0][col] -= h;
  const double xi = (draw.eps[0](row, col) - p.mu_eps[0][col]) / std::sqrt(p.psi_diag[0][col]);
  CHECK(testutil::rel_err((z_at(ph) - z_at(pl)) / (2 * h),
                          0.5 * xi / std::sqrt(p.psi_diag[0][col])) <= 1e-4);
}
