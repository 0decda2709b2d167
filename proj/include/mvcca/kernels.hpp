#pragma once

#include "mvcca/mat.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mvcca::kernels {

void set_threads(int n);
int threads();

// Naive reference kernels. Kept for correctness tests and the kernel
// benchmark; library code calls the parallel versions below.
namespace serial {

template <typename T>
void matmul(const Dense<T>& a, const Dense<T>& b, Dense<T>& out) {
  require(a.cols == b.rows, "matmul: inner dims differ");
  out = Dense<T>(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t k = 0; k < a.cols; ++k) {
      const T aik = a(i, k);
      for (std::size_t j = 0; j < b.cols; ++j) out(i, j) += aik * b(k, j);
    }
}

// out = a * b^T
template <typename T>
void matmul_nt(const Dense<T>& a, const Dense<T>& b, Dense<T>& out) {
  require(a.cols == b.cols, "matmul_nt: inner dims differ");
  out = Dense<T>(a.rows, b.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < b.rows; ++j) {
      T s = 0;
      for (std::size_t k = 0; k < a.cols; ++k) s += a(i, k) * b(j, k);
      out(i, j) = s;
    }
}

// out = a^T * b
template <typename T>
void matmul_tn(const Dense<T>& a, const Dense<T>& b, Dense<T>& out) {
  require(a.rows == b.rows, "matmul_tn: inner dims differ");
  out = Dense<T>(a.cols, b.cols);
  for (std::size_t k = 0; k < a.rows; ++k)
    for (std::size_t i = 0; i < a.cols; ++i) {
      const T aki = a(k, i);
      for (std::size_t j = 0; j < b.cols; ++j) out(i, j) += aki * b(k, j);
    }
}

template <typename T>
void colsum(const Dense<T>& a, Dense<T>& out) {
  out = Dense<T>(1, a.cols);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) out(0, j) += a(i, j);
}

template <typename T>
void pairwise_sqdist(const Dense<T>& x, const Dense<T>& y, Dense<T>& out) {
  require(x.cols == y.cols, "pairwise_sqdist: dims differ");
  out = Dense<T>(x.rows, y.rows);
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < y.rows; ++j) {
      T s = 0;
      for (std::size_t k = 0; k < x.cols; ++k) {
        const T d = x(i, k) - y(j, k);
        s += d * d;
      }
      out(i, j) = s;
    }
}

}  // namespace serial

// OpenMP kernels. Each output element is accumulated by exactly one thread
// in a fixed index order, so results are bitwise identical for any thread
// count. Dot-product kernels use a fixed 32-lane unroll; the lane partial
// sums are combined in a fixed order as well.
namespace par {

namespace detail {

inline constexpr std::size_t kLanes = 32;

template <typename T>
inline T combine(const T (&acc)[kLanes], T tail) {
  T s[kLanes / 2];
  for (std::size_t u = 0; u < kLanes / 2; ++u) s[u] = acc[2 * u] + acc[2 * u + 1];
  for (std::size_t w = kLanes / 2; w > 1; w /= 2)
    for (std::size_t u = 0; u < w / 2; ++u) s[u] = s[2 * u] + s[2 * u + 1];
  return s[0] + tail;
}

template <typename T>
inline T dot_lanes(const T* a, const T* b, std::size_t n) {
  T acc[kLanes] = {};
  std::size_t k = 0;
  for (; k + kLanes <= n; k += kLanes)
    for (std::size_t u = 0; u < kLanes; ++u) acc[u] += a[k + u] * b[k + u];
  T tail = 0;
  for (; k < n; ++k) tail += a[k] * b[k];
  return combine(acc, tail);
}

template <typename T>
inline T sqdist_lanes(const T* a, const T* b, std::size_t n) {
  T acc[kLanes] = {};
  std::size_t k = 0;
  for (; k + kLanes <= n; k += kLanes)
    for (std::size_t u = 0; u < kLanes; ++u) {
      const T d = a[k + u] - b[k + u];
      acc[u] += d * d;
    }
  T tail = 0;
  for (; k < n; ++k) {
    const T d = a[k] - b[k];
    tail += d * d;
  }
  return combine(acc, tail);
}

}  // namespace detail

template <typename T>
void matmul(const Dense<T>& a, const Dense<T>& b, Dense<T>& out) {
  require(a.cols == b.rows, "matmul: inner dims differ");
  out = Dense<T>(a.rows, b.cols);
  const std::ptrdiff_t rows = static_cast<std::ptrdiff_t>(a.rows);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < rows; ++i) {
    T* orow = out.row(i);
    for (std::size_t k = 0; k < a.cols; ++k) {
      const T aik = a(i, k);
      const T* brow = b.row(k);
      for (std::size_t j = 0; j < b.cols; ++j) orow[j] += aik * brow[j];
    }
  }
}

template <typename T>
void matmul_nt(const Dense<T>& a, const Dense<T>& b, Dense<T>& out) {
  require(a.cols == b.cols, "matmul_nt: inner dims differ");
  out = Dense<T>(a.rows, b.rows);
  const std::ptrdiff_t rows = static_cast<std::ptrdiff_t>(a.rows);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < b.rows; ++j)
      out(i, j) = detail::dot_lanes(a.row(i), b.row(j), a.cols);
}

template <typename T>
void matmul_tn(const Dense<T>& a, const Dense<T>& b, Dense<T>& out) {
  require(a.rows == b.rows, "matmul_tn: inner dims differ");
  out = Dense<T>(a.cols, b.cols);
  const std::ptrdiff_t orows = static_cast<std::ptrdiff_t>(a.cols);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < orows; ++i) {
    T* orow = out.row(i);
    for (std::size_t k = 0; k < a.rows; ++k) {
      const T aki = a(k, i);
      const T* brow = b.row(k);
      for (std::size_t j = 0; j < b.cols; ++j) orow[j] += aki * brow[j];
    }
  }
}

template <typename T>
void colsum(const Dense<T>& a, Dense<T>& out) {
  out = Dense<T>(1, a.cols);
  const std::ptrdiff_t cols = static_cast<std::ptrdiff_t>(a.cols);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t j = 0; j < cols; ++j) {
    T s = 0;
    for (std::size_t i = 0; i < a.rows; ++i) s += a(i, j);
    out(0, j) = s;
  }
}

template <typename T>
void pairwise_sqdist(const Dense<T>& x, const Dense<T>& y, Dense<T>& out) {
  require(x.cols == y.cols, "pairwise_sqdist: dims differ");
  out = Dense<T>(x.rows, y.rows);
  const std::ptrdiff_t rows = static_cast<std::ptrdiff_t>(x.rows);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < y.rows; ++j)
      out(i, j) = detail::sqdist_lanes(x.row(i), y.row(j), x.cols);
}

}  // namespace par

// Library entry points.
template <typename T>
Dense<T> matmul(const Dense<T>& a, const Dense<T>& b) {
  Dense<T> out;
  par::matmul(a, b, out);
  return out;
}

template <typename T>
Dense<T> matmul_nt(const Dense<T>& a, const Dense<T>& b) {
  Dense<T> out;
  par::matmul_nt(a, b, out);
  return out;
}

template <typename T>
Dense<T> matmul_tn(const Dense<T>& a, const Dense<T>& b) {
  Dense<T> out;
  par::matmul_tn(a, b, out);
  return out;
}

template <typename T>
Dense<T> colsum(const Dense<T>& a) {
  Dense<T> out;
  par::colsum(a, out);
  return out;
}

template <typename T>
Dense<T> pairwise_sqdist(const Dense<T>& x, const Dense<T>& y) {
  Dense<T> out;
  par::pairwise_sqdist(x, y, out);
  return out;
}

}  // namespace mvcca::kernels
