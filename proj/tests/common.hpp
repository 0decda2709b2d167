#pragma once

#include <cstdint>

#include "mvcca/kernels.hpp"
#include "mvcca/mat.hpp"
#include "mvcca/numkit.hpp"
#include "mvcca/rng.hpp"

namespace mvcca::testutil {

inline Mat rand_mat(std::size_t rows, std::size_t cols, std::uint64_t seed, double scale = 1.0) {
  Mat m(rows, cols);
  rng::SeqRng r(seed);
  for (auto& x : m.v) x = scale * r.normal();
  return m;
}

/// Random SPD matrix A A^T + jitter I, eigenvalues bounded away from zero.
inline Mat rand_spd(std::size_t n, std::uint64_t seed, double jitter = 0.5) {
  Mat a = rand_mat(n, n, seed);
  Mat s = kernels::matmul_nt(a, a);
  for (std::size_t i = 0; i < n; ++i) s(i, i) += jitter;
  return s;
}

inline double rel_err(double got, double want) {
  const double denom = std::abs(want) > 1e-300 ? std::abs(want) : 1.0;
  return std::abs(got - want) / denom;
}

/// N x d data whose sample mean is exactly mu and sample covariance
/// (1/N convention) exactly sigma, up to roundoff. Needs N > d.
inline Mat exact_moment_data(std::size_t n, const Vec& mu, const Mat& sigma, std::uint64_t seed) {
  const std::size_t d = mu.size();
  require(sigma.rows == d && sigma.cols == d && n > d, "exact_moment_data: bad shapes");
  Mat g(n, d);
  rng::fill_normal(g, seed);
  Mat ones(1, n, 1.0);
  Mat mean = kernels::matmul(ones, g);
  for (std::size_t j = 0; j < d; ++j) mean(0, j) /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) g(i, j) -= mean(0, j);
  Mat s = kernels::matmul_tn(g, g);
  for (auto& v : s.v) v /= static_cast<double>(n);
  const Mat whiten = numkit::spd_inv_sqrt(s);
  const Mat color = numkit::spd_sqrt(sigma);
  Mat x = kernels::matmul(kernels::matmul(g, whiten), color);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) x(i, j) += mu[j];
  return x;
}

/// Column means of a data matrix.
inline Vec colmean(const Mat& x) {
  Mat s = kernels::colsum(x);
  for (auto& v : s.v) v /= static_cast<double>(x.rows);
  return s.v;
}

/// Sample covariance with the 1/N convention.
inline Mat sample_cov(const Mat& x, const Mat& y) {
  const Vec mx = colmean(x), my = colmean(y);
  Mat xc = x, yc = y;
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < x.cols; ++j) xc(i, j) -= mx[j];
  for (std::size_t i = 0; i < y.rows; ++i)
    for (std::size_t j = 0; j < y.cols; ++j) yc(i, j) -= my[j];
  Mat c = kernels::matmul_tn(xc, yc);
  for (auto& v : c.v) v /= static_cast<double>(x.rows);
  return c;
}

inline Mat hcat(const Mat& a, const Mat& b) {
  require(a.rows == b.rows, "hcat: row mismatch");
  Mat out(a.rows, a.cols + b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    std::copy(a.row(i), a.row(i) + a.cols, out.row(i));
    std::copy(b.row(i), b.row(i) + b.cols, out.row(i) + a.cols);
  }
  return out;
}

}  // namespace mvcca::testutil
