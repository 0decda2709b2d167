#include "mvcca/pcca.hpp"

#include <algorithm>
#include <cmath>

#include "mvcca/kernels.hpp"
#include "mvcca/numkit.hpp"
#include "mvcca/rng.hpp"

namespace mvcca::pcca {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

Vec colmean(const Mat& x) {
  Mat s = kernels::colsum(x);
  for (auto& v : s.v) v /= static_cast<double>(x.rows);
  return s.v;
}

Mat centered(const Mat& x, const Vec& mu) {
  Mat c = x;
  for (std::size_t i = 0; i < c.rows; ++i)
    for (std::size_t j = 0; j < c.cols; ++j) c(i, j) -= mu[j];
  return c;
}

// Sample covariance (1/N) with relative ridge on the diagonal. Rejects
// spectra the ridge cannot repair (directions with no real data variance).
struct CovWhiten {
  Mat sigma;      // ridged covariance
  Mat inv_sqrt;   // sigma^{-1/2}
  Mat sqrt;       // sigma^{1/2}
};

CovWhiten cov_whiten(const Mat& xc, const std::string& who) {
  const std::size_t n = xc.rows, d = xc.cols;
  Mat s = kernels::matmul_tn(xc, xc);
  for (auto& v : s.v) v /= static_cast<double>(n);
  double trace = 0.0;
  for (std::size_t i = 0; i < d; ++i) trace += s(i, i);
  const double ridge = 1e-8 * trace / static_cast<double>(d);
  for (std::size_t i = 0; i < d; ++i) s(i, i) += ridge;

  const auto e = numkit::sym_eig(s);
  if (!(e.values.back() > 2.0 * ridge))
    throw std::invalid_argument(who + ": covariance rank deficient beyond ridge repair, eigenvalue " +
                                std::to_string(e.values.back()));
  Mat vi = e.vectors, vs = e.vectors;
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      vi(i, j) /= std::sqrt(e.values[j]);
      vs(i, j) *= std::sqrt(e.values[j]);
    }
  CovWhiten out;
  out.sigma = std::move(s);
  out.inv_sqrt = kernels::matmul_nt(vi, e.vectors);
  out.sqrt = kernels::matmul_nt(vs, e.vectors);
  return out;
}

Mat cross_cov(const Mat& x1c, const Mat& x2c) {
  Mat s = kernels::matmul_tn(x1c, x2c);
  for (auto& v : s.v) v /= static_cast<double>(x1c.rows);
  return s;
}

Mat head_cols(const Mat& m, std::size_t k) {
  Mat out(m.rows, k);
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t j = 0; j < k; ++j) out(i, j) = m(i, j);
  return out;
}

Mat scale_cols_sqrt(const Mat& m, const Vec& p) {
  Mat out = m;
  for (std::size_t i = 0; i < out.rows; ++i)
    for (std::size_t j = 0; j < out.cols; ++j) out(i, j) *= std::sqrt(p[j]);
  return out;
}

}  // namespace

void LinearPccaModel::validate() const {
  require(m_views >= 1 && w.size() == m_views && psi.size() == m_views && mu_eps.size() == m_views,
          "model: per-view parameter lists disagree with view count");
  require(mu0.size() == d0, "model: mu0 length differs from d0");
  for (std::size_t m = 0; m < m_views; ++m) {
    const std::size_t dm = w[m].rows;
    require(w[m].cols == d0 && d0 <= dm, "model: loading shape violates d0 <= d_m");
    require(psi[m].rows == dm && psi[m].cols == dm, "model: psi shape mismatch");
    require(mu_eps[m].size() == dm, "model: mu_eps length mismatch");
    require(w[m].all_finite() && psi[m].all_finite(), "model: non-finite parameters");
    require(max_abs_diff(psi[m], transpose(psi[m])) <= 1e-9 * (1.0 + max_abs(psi[m])),
            "model: psi not symmetric");
  }
}

CcaSolution fit_cca(const Mat& x1, const Mat& x2, std::size_t d0) {
  require(x1.rows == x2.rows, "fit_cca: row counts differ");
  require(x1.rows > std::max(x1.cols, x2.cols), "fit_cca: need more rows than columns");
  require(d0 >= 1 && d0 <= std::min(x1.cols, x2.cols), "fit_cca: d0 out of range");
  require(x1.all_finite() && x2.all_finite(), "fit_cca: non-finite data");

  CcaSolution sol;
  sol.mu1 = colmean(x1);
  sol.mu2 = colmean(x2);
  const Mat x1c = centered(x1, sol.mu1), x2c = centered(x2, sol.mu2);
  const CovWhiten c1 = cov_whiten(x1c, "fit_cca view 1");
  const CovWhiten c2 = cov_whiten(x2c, "fit_cca view 2");
  sol.sigma11 = c1.sigma;
  sol.sigma22 = c2.sigma;
  sol.sigma12 = cross_cov(x1c, x2c);

  const Mat corr = kernels::matmul(kernels::matmul(c1.inv_sqrt, sol.sigma12), c2.inv_sqrt);
  const auto dec = numkit::svd(corr);
  sol.p.resize(d0);
  for (std::size_t i = 0; i < d0; ++i) {
    sol.p[i] = dec.s[i];
    if (sol.p[i] > 1.0) {
      sol.p[i] = 1.0;
      ++sol.clipped_p;
    }
  }
  sol.u1 = kernels::matmul(c1.inv_sqrt, head_cols(dec.u, d0));
  sol.u2 = kernels::matmul(c2.inv_sqrt, head_cols(transpose(dec.vt), d0));
  return sol;
}

LinearPccaModel fit_pcca_ml(const Mat& x1, const Mat& x2, std::size_t d0) {
  const CcaSolution sol = fit_cca(x1, x2, d0);
  LinearPccaModel m;
  m.m_views = 2;
  m.d0 = d0;
  m.p = sol.p;
  m.clipped_p = sol.clipped_p;
  m.mu0 = Vec(d0, 0.0);
  const Mat* sigma[2] = {&sol.sigma11, &sol.sigma22};
  const Mat* dirs[2] = {&sol.u1, &sol.u2};
  const Vec* mu[2] = {&sol.mu1, &sol.mu2};
  for (int v = 0; v < 2; ++v) {
    Mat w = scale_cols_sqrt(kernels::matmul(*sigma[v], *dirs[v]), sol.p);
    Mat psi = *sigma[v];
    const Mat wwt = kernels::matmul_nt(w, w);
    for (std::size_t i = 0; i < psi.size(); ++i) psi.v[i] -= wwt.v[i];
    m.w.push_back(std::move(w));
    m.psi.push_back(std::move(psi));
    m.mu_eps.push_back(*mu[v]);
  }
  return m;
}

LinearPccaModel fit_mv_ml(const std::vector<Mat>& x, std::size_t d0) {
  const std::size_t views = x.size();
  require(views >= 2, "fit_mv_ml: need at least two views");
  const std::size_t d = x[0].cols, n = x[0].rows;
  for (const auto& xm : x) {
    require(xm.rows == n, "fit_mv_ml: row counts differ");
    require(xm.cols == d, "fit_mv_ml: shared directions need equal view dimensions");
    require(xm.all_finite(), "fit_mv_ml: non-finite data");
  }
  require(n > d, "fit_mv_ml: need more rows than columns");
  require(d0 >= 1 && d0 <= d, "fit_mv_ml: d0 out of range");

  std::vector<Vec> mu(views);
  std::vector<Mat> xc(views);
  std::vector<CovWhiten> cw(views);
  for (std::size_t m = 0; m < views; ++m) {
    mu[m] = colmean(x[m]);
    xc[m] = centered(x[m], mu[m]);
    cw[m] = cov_whiten(xc[m], "fit_mv_ml view " + std::to_string(m + 1));
  }

  // average of symmetrized whitened pairwise correlation matrices
  Mat acc(d, d);
  std::size_t pairs = 0;
  for (std::size_t l = 0; l < views; ++l)
    for (std::size_t m = l + 1; m < views; ++m) {
      const Mat c = kernels::matmul(kernels::matmul(cw[l].inv_sqrt, cross_cov(xc[l], xc[m])),
                                    cw[m].inv_sqrt);
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) acc(i, j) += 0.5 * (c(i, j) + c(j, i));
      ++pairs;
    }
  for (auto& v : acc.v) v /= static_cast<double>(pairs);

  const auto e = numkit::sym_eig(acc);
  LinearPccaModel out;
  out.m_views = views;
  out.d0 = d0;
  out.mu0 = Vec(d0, 0.0);
  out.p.resize(d0);
  for (std::size_t i = 0; i < d0; ++i) {
    out.p[i] = std::clamp(e.values[i], 0.0, 1.0);
    if (out.p[i] != e.values[i]) ++out.clipped_p;
  }
  const Mat shared = head_cols(e.vectors, d0);
  for (std::size_t m = 0; m < views; ++m) {
    Mat w = scale_cols_sqrt(kernels::matmul(cw[m].sqrt, shared), out.p);
    Mat psi = cw[m].sigma;
    const Mat wwt = kernels::matmul_nt(w, w);
    for (std::size_t i = 0; i < psi.size(); ++i) psi.v[i] -= wwt.v[i];
    out.w.push_back(std::move(w));
    out.psi.push_back(std::move(psi));
    out.mu_eps.push_back(mu[m]);
  }
  return out;
}

dataio::MultiViewBatch sample_given_phi(const LinearPccaModel& model, const Mat& phi,
                                        std::uint64_t seed) {
  model.validate();
  require(phi.cols == model.d0, "sample_given_phi: phi width differs from d0");
  dataio::MultiViewBatch b;
  for (std::size_t m = 0; m < model.m_views; ++m) {
    const std::size_t dm = model.w[m].rows;
    const Mat root = numkit::psd_sqrt(model.psi[m]);
    Mat noise(phi.rows, dm);
    rng::fill_normal(noise, rng::derive(seed, "view." + std::to_string(m)));
    Mat z = kernels::matmul_nt(phi, model.w[m]);
    const Mat colored = kernels::matmul(noise, root);
    for (std::size_t i = 0; i < z.rows; ++i)
      for (std::size_t j = 0; j < dm; ++j) z(i, j) += colored(i, j) + model.mu_eps[m][j];
    b.views.push_back(std::move(z));
  }
  return b;
}

dataio::MultiViewBatch sample_generative(const LinearPccaModel& model, std::size_t n,
                                         std::uint64_t seed) {
  model.validate();
  Mat phi(n, model.d0);
  rng::fill_normal(phi, rng::derive(seed, "phi"));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < model.d0; ++j) phi(i, j) += model.mu0[j];
  return sample_given_phi(model, phi, rng::derive(seed, "views"));
}

double log_likelihood(const LinearPccaModel& model, const dataio::MultiViewBatch& batch) {
  model.validate();
  batch.validate();
  require(batch.views.size() == model.m_views, "log_likelihood: view count mismatch");
  std::size_t total = 0;
  for (std::size_t m = 0; m < model.m_views; ++m) {
    require(batch.views[m].cols == model.w[m].rows, "log_likelihood: view width mismatch");
    total += model.w[m].rows;
  }

  // joint mean and covariance of the concatenated views (W W^T + blockdiag Psi)
  Vec mean(total);
  Mat wj(total, model.d0);
  Mat sigma(total, total);
  std::size_t off = 0;
  for (std::size_t m = 0; m < model.m_views; ++m) {
    const std::size_t dm = model.w[m].rows;
    for (std::size_t i = 0; i < dm; ++i) {
      mean[off + i] = model.mu_eps[m][i];
      for (std::size_t j = 0; j < model.d0; ++j) {
        wj(off + i, j) = model.w[m](i, j);
        mean[off + i] += model.w[m](i, j) * model.mu0[j];
      }
      for (std::size_t j = 0; j < dm; ++j) sigma(off + i, off + j) = model.psi[m](i, j);
    }
    off += dm;
  }
  const Mat wwt = kernels::matmul_nt(wj, wj);
  for (std::size_t i = 0; i < sigma.size(); ++i) sigma.v[i] += wwt.v[i];

  Mat chol;
  try {
    chol = numkit::cholesky(sigma);
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(std::string("log_likelihood: joint covariance is singular (") +
                                e.what() + ")");
  }

  const std::size_t n = batch.n();
  Mat xc(total, n);  // centered and transposed
  off = 0;
  for (std::size_t m = 0; m < model.m_views; ++m) {
    const Mat& v = batch.views[m];
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < v.cols; ++j) xc(off + j, i) = v(i, j) - mean[off + j];
    off += v.cols;
  }
  const Mat solved = numkit::chol_solve(chol, xc);
  double quad = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double q = 0.0;
    for (std::size_t j = 0; j < total; ++j) q += xc(j, i) * solved(j, i);
    quad += q;
  }
  quad /= static_cast<double>(n);
  return -0.5 * (static_cast<double>(total) * kLog2Pi + numkit::chol_logdet(chol) + quad);
}

void save_model(const std::string& path, const LinearPccaModel& model) {
  model.validate();
  dataio::TensorContainer c;
  c.add_scalar("views", static_cast<double>(model.m_views));
  c.add_scalar("d0", static_cast<double>(model.d0));
  c.add_scalar("clipped_p", static_cast<double>(model.clipped_p));
  c.add_vec("mu0", model.mu0);
  c.add_vec("p", model.p);
  for (std::size_t m = 0; m < model.m_views; ++m) {
    const std::string tag = std::to_string(m);
    c.add_mat("w." + tag, model.w[m]);
    c.add_mat("psi." + tag, model.psi[m]);
    c.add_vec("mu_eps." + tag, model.mu_eps[m]);
  }
  c.save(path);
}

LinearPccaModel load_model(const std::string& path) {
  const auto c = dataio::TensorContainer::load(path);
  LinearPccaModel m;
  m.m_views = static_cast<std::size_t>(c.get_scalar("views"));
  m.d0 = static_cast<std::size_t>(c.get_scalar("d0"));
  m.clipped_p = static_cast<int>(c.get_scalar("clipped_p"));
  m.mu0 = c.get_vec("mu0");
  m.p = c.get_vec("p");
  for (std::size_t v = 0; v < m.m_views; ++v) {
    const std::string tag = std::to_string(v);
    m.w.push_back(c.get_mat("w." + tag));
    m.psi.push_back(c.get_mat("psi." + tag));
    m.mu_eps.push_back(c.get_vec("mu_eps." + tag));
  }
  m.validate();
  return m;
}

}  // namespace mvcca::pcca
