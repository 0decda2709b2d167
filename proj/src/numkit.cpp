#include "mvcca/numkit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mvcca/kernels.hpp"

namespace mvcca::numkit {

namespace {

constexpr int kMaxSweeps = 100;
constexpr double kConvTol = 1e-12;

void sort_descending(Vec& vals, Mat& cols) {
  std::vector<std::size_t> order(vals.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return vals[a] > vals[b]; });
  Vec sv(vals.size());
  Mat sc(cols.rows, cols.cols);
  for (std::size_t j = 0; j < order.size(); ++j) {
    sv[j] = vals[order[j]];
    for (std::size_t i = 0; i < cols.rows; ++i) sc(i, j) = cols(i, order[j]);
  }
  vals = std::move(sv);
  cols = std::move(sc);
}

// Fills zero-norm columns of u with unit vectors orthogonal to the rest.
void complete_basis(Mat& u, const std::vector<bool>& fixed) {
  const std::size_t m = u.rows, n = u.cols;
  std::size_t next_axis = 0;
  for (std::size_t j = 0; j < n; ++j) {
    if (fixed[j]) continue;
    Vec cand(m);
    double norm = 0.0;
    while (norm < 0.5 && next_axis < m) {
      std::fill(cand.begin(), cand.end(), 0.0);
      cand[next_axis++] = 1.0;
      for (int pass = 0; pass < 2; ++pass)
        for (std::size_t k = 0; k < n; ++k) {
          if (k == j || !(fixed[k] || k < j)) continue;
          double dot = 0.0;
          for (std::size_t i = 0; i < m; ++i) dot += cand[i] * u(i, k);
          for (std::size_t i = 0; i < m; ++i) cand[i] -= dot * u(i, k);
        }
      norm = std::sqrt(std::inner_product(cand.begin(), cand.end(), cand.begin(), 0.0));
    }
    require(norm >= 0.5, "svd: failed to complete orthonormal basis");
    for (std::size_t i = 0; i < m; ++i) u(i, j) = cand[i] / norm;
  }
}

// One-sided Jacobi on a tall matrix: orthogonalizes the columns of w,
// accumulating right rotations into v.
void one_sided_jacobi(Mat& w, Mat& v) {
  const std::size_t m = w.rows, n = w.cols;
  v = Mat::eye(n);
  if (n < 2) return;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += w(i, p) * w(i, p);
          beta += w(i, q) * w(i, q);
          gamma += w(i, p) * w(i, q);
        }
        if (std::abs(gamma) <= kConvTol * std::sqrt(alpha * beta) || gamma == 0.0) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double wp = w(i, p), wq = w(i, q);
          w(i, p) = c * wp - s * wq;
          w(i, q) = s * wp + c * wq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double vp = v(i, p), vq = v(i, q);
          v(i, p) = c * vp - s * vq;
          v(i, q) = s * vp + c * vq;
        }
      }
    if (!rotated) return;
  }
  throw std::runtime_error("svd: one-sided Jacobi did not converge after " +
                           std::to_string(kMaxSweeps) + " sweeps");
}

}  // namespace

SvdResult svd(const Mat& a) {
  require(a.rows >= 1 && a.cols >= 1, "svd: empty matrix");
  require(a.all_finite(), "svd: non-finite input");
  if (a.rows >= a.cols) {
    Mat w = a;
    Mat v;
    one_sided_jacobi(w, v);
    const std::size_t n = a.cols;
    Vec s(n);
    const double scale = frobenius(a) > 0.0 ? frobenius(a) : 1.0;
    std::vector<bool> nonzero(n, false);
    for (std::size_t j = 0; j < n; ++j) {
      double norm2 = 0.0;
      for (std::size_t i = 0; i < w.rows; ++i) norm2 += w(i, j) * w(i, j);
      s[j] = std::sqrt(norm2);
      nonzero[j] = s[j] > 1e-14 * scale;
      if (nonzero[j])
        for (std::size_t i = 0; i < w.rows; ++i) w(i, j) /= s[j];
      else
        s[j] = 0.0;
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return s[x] > s[y]; });
    SvdResult r;
    r.s.resize(n);
    r.u = Mat(a.rows, n);
    r.vt = Mat(n, n);
    std::vector<bool> fixed(n, false);
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t src = order[j];
      r.s[j] = s[src];
      fixed[j] = nonzero[src];
      for (std::size_t i = 0; i < a.rows; ++i) r.u(i, j) = w(i, src);
      for (std::size_t i = 0; i < n; ++i) r.vt(j, i) = v(i, src);
    }
    complete_basis(r.u, fixed);
    return r;
  }
  SvdResult rt = svd(transpose(a));
  SvdResult r;
  r.s = std::move(rt.s);
  r.u = transpose(rt.vt);
  r.vt = transpose(rt.u);
  return r;
}

EigResult sym_eig(const Mat& a) {
  require(a.rows == a.cols && a.rows >= 1, "sym_eig: square matrix required");
  require(a.all_finite(), "sym_eig: non-finite input");
  const Mat at = transpose(a);
  require(max_abs_diff(a, at) <= 1e-12 * (1.0 + max_abs(a)), "sym_eig: input not symmetric");

  const std::size_t n = a.rows;
  Mat w = a;
  Mat v = Mat::eye(n);
  const double fro = frobenius(a);
  const double tol = kConvTol * (fro > 0.0 ? fro : 1.0);

  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p + 1 < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += 2.0 * w(p, q) * w(p, q);
    if (std::sqrt(off) <= tol) break;
    if (sweep == kMaxSweeps - 1)
      throw std::runtime_error("sym_eig: Jacobi did not converge after " +
                               std::to_string(kMaxSweeps) + " sweeps");
    for (std::size_t p = 0; p + 1 < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = w(p, q);
        if (std::abs(apq) <= tol / (n * n)) continue;
        const double theta = (w(q, q) - w(p, p)) / (2.0 * apq);
        const double t =
            (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(1.0 + theta * theta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < n; ++i) {
          const double wip = w(i, p), wiq = w(i, q);
          w(i, p) = c * wip - s * wiq;
          w(i, q) = s * wip + c * wiq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double wpi = w(p, i), wqi = w(q, i);
          w(p, i) = c * wpi - s * wqi;
          w(q, i) = s * wpi + c * wqi;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double vip = v(i, p), viq = v(i, q);
          v(i, p) = c * vip - s * viq;
          v(i, q) = s * vip + c * viq;
        }
      }
  }
  EigResult r;
  r.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) r.values[i] = w(i, i);
  r.vectors = std::move(v);
  sort_descending(r.values, r.vectors);
  return r;
}

namespace {

Mat eig_transform(const Mat& a, double (*f)(double), const char* who, bool allow_psd) {
  EigResult e = sym_eig(a);
  const double lmax = e.values.empty() ? 0.0 : std::abs(e.values.front());
  for (double& lam : e.values) {
    if (allow_psd && lam < 0.0 && lam >= -1e-9 * (lmax > 0.0 ? lmax : 1.0)) lam = 0.0;
    if (!allow_psd && lam <= 1e-12 * lmax)
      throw std::invalid_argument(std::string(who) + ": matrix not positive definite, eigenvalue " +
                                  std::to_string(lam));
    if (allow_psd && lam < 0.0)
      throw std::invalid_argument(std::string(who) + ": matrix not positive semidefinite, eigenvalue " +
                                  std::to_string(lam));
  }
  Mat scaled = e.vectors;
  for (std::size_t i = 0; i < scaled.rows; ++i)
    for (std::size_t j = 0; j < scaled.cols; ++j) scaled(i, j) *= f(e.values[j]);
  return kernels::matmul_nt(scaled, e.vectors);
}

}  // namespace

Mat spd_inv_sqrt(const Mat& a) {
  return eig_transform(a, [](double x) { return 1.0 / std::sqrt(x); }, "spd_inv_sqrt", false);
}

Mat spd_sqrt(const Mat& a) {
  return eig_transform(a, [](double x) { return std::sqrt(x); }, "spd_sqrt", false);
}

Mat psd_sqrt(const Mat& a) {
  return eig_transform(a, [](double x) { return std::sqrt(x); }, "psd_sqrt", true);
}

Mat cholesky(const Mat& a) {
  require(a.rows == a.cols, "cholesky: square matrix required");
  const std::size_t n = a.rows;
  Mat l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > 0.0))
      throw std::invalid_argument("cholesky: non-positive pivot " + std::to_string(d) +
                                  " at index " + std::to_string(j));
    l(j, j) = std::sqrt(d);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / l(j, j);
    }
  }
  return l;
}

Mat chol_solve(const Mat& l, const Mat& b) {
  require(l.rows == l.cols && l.rows == b.rows, "chol_solve: shape mismatch");
  const std::size_t n = l.rows, m = b.cols;
  Mat y(n, m), x(n, m);
  for (std::size_t c = 0; c < m; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = b(i, c);
      for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * y(k, c);
      y(i, c) = s / l(i, i);
    }
    for (std::size_t ii = n; ii-- > 0;) {
      double s = y(ii, c);
      for (std::size_t k = ii + 1; k < n; ++k) s -= l(k, ii) * x(k, c);
      x(ii, c) = s / l(ii, ii);
    }
  }
  return x;
}

double chol_logdet(const Mat& l) {
  double s = 0.0;
  for (std::size_t i = 0; i < l.rows; ++i) s += std::log(l(i, i));
  return 2.0 * s;
}

Mat solve_spd(const Mat& a, const Mat& b) { return chol_solve(cholesky(a), b); }

}  // namespace mvcca::numkit
