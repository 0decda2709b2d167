#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace mvcca {

/// Dense row-major matrix. Vectors are 1xN or Nx1 as context requires.
template <typename T>
struct Dense {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> v;

  Dense() = default;
  Dense(std::size_t r, std::size_t c, T fill = T(0)) : rows(r), cols(c), v(r * c, fill) {}

  static Dense eye(std::size_t n) {
    Dense m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1);
    return m;
  }

  T& operator()(std::size_t r, std::size_t c) { return v[r * cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return v[r * cols + c]; }

  T* data() { return v.data(); }
  const T* data() const { return v.data(); }
  T* row(std::size_t r) { return v.data() + r * cols; }
  const T* row(std::size_t r) const { return v.data() + r * cols; }

  std::size_t size() const { return rows * cols; }
  bool same_shape(const Dense& o) const { return rows == o.rows && cols == o.cols; }

  bool all_finite() const {
    for (const T& x : v)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }
};

using Mat = Dense<double>;
using Vec = std::vector<double>;

inline Mat transpose(const Mat& a) {
  Mat t(a.cols, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
  return t;
}

inline double frobenius(const Mat& a) {
  double s = 0;
  for (double x : a.v) s += x * x;
  return std::sqrt(s);
}

inline double max_abs(const Mat& a) {
  double m = 0;
  for (double x : a.v) m = std::max(m, std::abs(x));
  return m;
}

inline double max_abs_diff(const Mat& a, const Mat& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.v[i] - b.v[i]));
  return m;
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace mvcca
