#pragma once

// Reverse-mode autodiff on a flat tape of dense matrices. Nodes are created
// in topological order by construction and backward() walks the tape in
// reverse, so no explicit sort is needed. Every op writes each output
// element from exactly one thread and reduces in a fixed serial order;
// values and gradients are therefore bitwise reproducible for any thread
// count. The KL reductions call the mvlayer scalar cores, so the numbers a
// training loop reports and the numbers it differentiates cannot drift
// apart.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mvcca/kernels.hpp"
#include "mvcca/mat.hpp"
#include "mvcca/mvlayer.hpp"
#include "mvcca/rng.hpp"

namespace mvcca::graph {

template <typename T>
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf node. Gradients accumulate here like anywhere else; read them
  /// back with grad() after backward().
  int value(Dense<T> v) { return push(std::move(v)); }

  const Dense<T>& val(int id) const { return at(id).val; }
  const Dense<T>& grad(int id) const { return at(id).grad; }
  std::size_t size() const { return nodes_.size(); }

  T scalar(int id) const {
    const Dense<T>& v = at(id).val;
    require(v.rows == 1 && v.cols == 1, "graph: node is not a scalar");
    return v.v[0];
  }

  int add(int a, int b) {
    return elementwise2(
        a, b, [](T x, T y) { return x + y; },
        [](T, T, T g, T& da, T& db) {
          da += g;
          db += g;
        });
  }

  int sub(int a, int b) {
    return elementwise2(
        a, b, [](T x, T y) { return x - y; },
        [](T, T, T g, T& da, T& db) {
          da += g;
          db -= g;
        });
  }

  int mul(int a, int b) {
    return elementwise2(
        a, b, [](T x, T y) { return x * y; },
        [](T x, T y, T g, T& da, T& db) {
          da += g * y;
          db += g * x;
        });
  }

  int div(int a, int b) {
    return elementwise2(
        a, b, [](T x, T y) { return x / y; },
        [](T x, T y, T g, T& da, T& db) {
          da += g / y;
          db -= g * x / (y * y);
        });
  }

  /// y = s*x + c elementwise.
  int affine(int x, T s, T c) {
    return elementwise1(
        x, [s, c](T v) { return s * v + c; }, [s](T, T g, T& dx) { dx += s * g; });
  }

  int square(int x) {
    return elementwise1(
        x, [](T v) { return v * v; }, [](T v, T g, T& dx) { dx += T(2) * v * g; });
  }

  int sqrt(int x) {
    for (T v : at(x).val.v) require(v >= T(0), "graph sqrt: negative input");
    return elementwise1(
        x, [](T v) { return std::sqrt(v); },
        [](T v, T g, T& dx) { dx += g / (T(2) * std::sqrt(v)); });
  }

  int log(int x) {
    return elementwise1(
        x, [](T v) { return std::log(v); }, [](T v, T g, T& dx) { dx += g / v; });
  }

  int relu(int x) {
    return elementwise1(
        x, [](T v) { return v > T(0) ? v : T(0); },
        [](T v, T g, T& dx) { dx += v > T(0) ? g : T(0); });
  }

  int sigmoid(int x) {
    return elementwise1(
        x, [](T v) { return sigmoid_val(v); },
        [](T v, T g, T& dx) {
          const T s = sigmoid_val(v);
          dx += g * s * (T(1) - s);
        });
  }

  int softplus(int x) {
    return elementwise1(
        x,
        [](T v) {
          return v > T(0) ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
        },
        [](T v, T g, T& dx) { dx += g * sigmoid_val(v); });
  }

  /// Gradient is zero wherever the clamp binds (boundary included).
  int clamp(int x, T lo, T hi) {
    require(lo < hi, "graph clamp: lo must be below hi");
    return elementwise1(
        x, [lo, hi](T v) { return v < lo ? lo : (v > hi ? hi : v); },
        [lo, hi](T v, T g, T& dx) { dx += (v > lo && v < hi) ? g : T(0); });
  }

  int clamp_min(int x, T lo) {
    return elementwise1(
        x, [lo](T v) { return v < lo ? lo : v; },
        [lo](T v, T g, T& dx) { dx += v > lo ? g : T(0); });
  }

  /// Inverted dropout: kept entries are scaled by 1/(1-rate) so the
  /// expectation matches the undropped value. The mask is a pure function
  /// of (seed, element index); backward recomputes it instead of storing it.
  int dropout(int x, T rate, std::uint64_t seed) {
    require(rate >= T(0) && rate < T(1), "graph dropout: rate must be in [0, 1)");
    const T scale = T(1) / (T(1) - rate);
    const Dense<T>& xv = at(x).val;
    Dense<T> out(xv.rows, xv.cols);
    for_each(out.size(), [&](std::size_t i) {
      const bool keep = rng::uniform_at(seed, i) >= static_cast<double>(rate);
      out.v[i] = keep ? xv.v[i] * scale : T(0);
    });
    const int id = push(std::move(out));
    nodes_[id].back = [this, x, id, rate, scale, seed] {
      const Dense<T>& g = nodes_[id].grad;
      Dense<T>& dx = nodes_[x].grad;
      for_each(g.size(), [&](std::size_t i) {
        const bool keep = rng::uniform_at(seed, i) >= static_cast<double>(rate);
        if (keep) dx.v[i] += g.v[i] * scale;
      });
    };
    return id;
  }

  int concat_cols(int a, int b) {
    const Dense<T>& av = at(a).val;
    const Dense<T>& bv = at(b).val;
    require(av.rows == bv.rows, "graph concat_cols: row counts differ");
    Dense<T> out(av.rows, av.cols + bv.cols);
    for_each(av.rows, [&](std::size_t r) {
      for (std::size_t c = 0; c < av.cols; ++c) out(r, c) = av(r, c);
      for (std::size_t c = 0; c < bv.cols; ++c) out(r, av.cols + c) = bv(r, c);
    });
    const int id = push(std::move(out));
    nodes_[id].back = [this, a, b, id] {
      const Dense<T>& g = nodes_[id].grad;
      Dense<T>& da = nodes_[a].grad;
      Dense<T>& db = nodes_[b].grad;
      for_each(g.rows, [&](std::size_t r) {
        for (std::size_t c = 0; c < da.cols; ++c) da(r, c) += g(r, c);
        for (std::size_t c = 0; c < db.cols; ++c) db(r, c) += g(r, da.cols + c);
      });
    };
    return id;
  }

  /// Columns [c0, c1) of x.
  int slice_cols(int x, std::size_t c0, std::size_t c1) {
    const Dense<T>& xv = at(x).val;
    require(c0 <= c1 && c1 <= xv.cols, "graph slice_cols: bad column range");
    Dense<T> out(xv.rows, c1 - c0);
    for_each(out.rows, [&](std::size_t r) {
      for (std::size_t c = 0; c < out.cols; ++c) out(r, c) = xv(r, c0 + c);
    });
    const int id = push(std::move(out));
    nodes_[id].back = [this, x, id, c0] {
      const Dense<T>& g = nodes_[id].grad;
      Dense<T>& dx = nodes_[x].grad;
      for_each(g.rows, [&](std::size_t r) {
        for (std::size_t c = 0; c < g.cols; ++c) dx(r, c0 + c) += g(r, c);
      });
    };
    return id;
  }

  /// y = x w^T + b with x (n, in), w (out, in), b (1, out).
  int linear(int x, int w, int b) {
    const Dense<T>& xv = at(x).val;
    const Dense<T>& wv = at(w).val;
    const Dense<T>& bv = at(b).val;
    require(xv.cols == wv.cols, "graph linear: input width does not match weight");
    require(bv.rows == 1 && bv.cols == wv.rows, "graph linear: bias shape mismatch");
    Dense<T> out = kernels::matmul_nt(xv, wv);
    for_each(out.rows, [&](std::size_t r) {
      for (std::size_t c = 0; c < out.cols; ++c) out(r, c) += bv(0, c);
    });
    const int id = push(std::move(out));
    nodes_[id].back = [this, x, w, b, id] {
      const Dense<T>& g = nodes_[id].grad;
      accumulate(nodes_[x].grad, kernels::matmul(g, nodes_[w].val));
      accumulate(nodes_[w].grad, kernels::matmul_tn(g, nodes_[x].val));
      accumulate(nodes_[b].grad, kernels::colsum(g));
    };
    return id;
  }

  int sum_all(int x) {
    const Dense<T>& xv = at(x).val;
    double acc = 0;
    for (T v : xv.v) acc += static_cast<double>(v);
    Dense<T> out(1, 1);
    out.v[0] = static_cast<T>(acc);
    const int id = push(std::move(out));
    nodes_[id].back = [this, x, id] {
      const T g = nodes_[id].grad.v[0];
      Dense<T>& dx = nodes_[x].grad;
      for_each(dx.size(), [&](std::size_t i) { dx.v[i] += g; });
    };
    return id;
  }

  /// Sum over all elements of x log(mean) + (1-x) log(1-mean), with the
  /// mean clamped to [1e-6, 1-1e-6]. Gradient is zero where the clamp
  /// binds. x must lie in [0, 1].
  int bernoulli_ll(int mean, const Dense<T>& x) {
    const Dense<T>& mv = at(mean).val;
    require(mv.same_shape(x), "graph bernoulli_ll: shape mismatch");
    for (T v : x.v)
      require(v >= T(0) && v <= T(1), "graph bernoulli_ll: data outside [0, 1]");
    const T lo = kMeanClamp;
    const T hi = T(1) - kMeanClamp;
    double acc = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const T m = mv.v[i] < lo ? lo : (mv.v[i] > hi ? hi : mv.v[i]);
      acc += static_cast<double>(x.v[i] * std::log(m) +
                                 (T(1) - x.v[i]) * std::log(T(1) - m));
    }
    Dense<T> out(1, 1);
    out.v[0] = static_cast<T>(acc);
    const int id = push(std::move(out));
    nodes_[id].back = [this, mean, id, xc = x, lo, hi] {
      const T g = nodes_[id].grad.v[0];
      const Dense<T>& mv = nodes_[mean].val;
      Dense<T>& dm = nodes_[mean].grad;
      for_each(mv.size(), [&](std::size_t i) {
        const T m = mv.v[i];
        if (m > lo && m < hi)
          dm.v[i] += g * (xc.v[i] / m - (T(1) - xc.v[i]) / (T(1) - m));
      });
    };
    return id;
  }

  /// Sum over all elements of -0.5 (log 2*pi*var + (x-mean)^2 / var), with
  /// the variance floored at 1e-6 (zero gradient where floored).
  int gaussian_ll(int mean, int var, const Dense<T>& x) {
    const Dense<T>& mv = at(mean).val;
    const Dense<T>& vv = at(var).val;
    require(mv.same_shape(x) && vv.same_shape(x), "graph gaussian_ll: shape mismatch");
    const T floor = kVarFloor;
    double acc = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const T v = vv.v[i] < floor ? floor : vv.v[i];
      const T d = x.v[i] - mv.v[i];
      acc += -0.5 * static_cast<double>(kLog2Pi_ + std::log(v) + d * d / v);
    }
    Dense<T> out(1, 1);
    out.v[0] = static_cast<T>(acc);
    const int id = push(std::move(out));
    nodes_[id].back = [this, mean, var, id, xc = x, floor] {
      const T g = nodes_[id].grad.v[0];
      const Dense<T>& mv = nodes_[mean].val;
      const Dense<T>& vv = nodes_[var].val;
      Dense<T>& dm = nodes_[mean].grad;
      Dense<T>& dv = nodes_[var].grad;
      for_each(mv.size(), [&](std::size_t i) {
        const T v = vv.v[i] < floor ? floor : vv.v[i];
        const T d = xc.v[i] - mv.v[i];
        dm.v[i] += g * d / v;
        if (vv.v[i] > floor) dv.v[i] += g * T(-0.5) * (T(1) / v - d * d / (v * v));
      });
    };
    return id;
  }

  /// Sum over rows of the per-datum KL between N(mu0_row, I) and the
  /// isotropic prior, via the mvlayer scalar core.
  int kl_phi_sum(int mu0, T lambda0) {
    require(lambda0 > T(0), "graph kl_phi_sum: lambda0 must be positive");
    const Dense<T>& m = at(mu0).val;
    double acc = 0;
    for (std::size_t r = 0; r < m.rows; ++r)
      acc += static_cast<double>(mvlayer::kl_phi_core(m.row(r), m.cols, lambda0));
    Dense<T> out(1, 1);
    out.v[0] = static_cast<T>(acc);
    const int id = push(std::move(out));
    nodes_[id].back = [this, mu0, id, lambda0] {
      const T g = nodes_[id].grad.v[0];
      const Dense<T>& m = nodes_[mu0].val;
      Dense<T>& dm = nodes_[mu0].grad;
      for_each(m.size(), [&](std::size_t i) { dm.v[i] += g * lambda0 * m.v[i]; });
    };
    return id;
  }

  /// Sum over rows of the per-datum KL between N(mu_eps_row, diag(psi_row))
  /// and the isotropic prior, via the mvlayer scalar core.
  int kl_eps_sum(int mu_eps, int psi, T lambda) {
    require(lambda > T(0), "graph kl_eps_sum: lambda must be positive");
    const Dense<T>& m = at(mu_eps).val;
    const Dense<T>& p = at(psi).val;
    require(m.same_shape(p), "graph kl_eps_sum: shape mismatch");
    for (T v : p.v) require(v > T(0), "graph kl_eps_sum: psi must be positive");
    double acc = 0;
    for (std::size_t r = 0; r < m.rows; ++r)
      acc += static_cast<double>(mvlayer::kl_eps_core(m.row(r), p.row(r), m.cols, lambda));
    Dense<T> out(1, 1);
    out.v[0] = static_cast<T>(acc);
    const int id = push(std::move(out));
    nodes_[id].back = [this, mu_eps, psi, id, lambda] {
      const T g = nodes_[id].grad.v[0];
      const Dense<T>& m = nodes_[mu_eps].val;
      const Dense<T>& p = nodes_[psi].val;
      Dense<T>& dm = nodes_[mu_eps].grad;
      Dense<T>& dp = nodes_[psi].grad;
      for_each(m.size(), [&](std::size_t i) {
        dm.v[i] += g * lambda * m.v[i];
        dp.v[i] += g * T(0.5) * (lambda - T(1) / p.v[i]);
      });
    };
    return id;
  }

  /// Seeds d(root)/d(root) = 1 and sweeps the tape once, in reverse. The
  /// root must be a scalar node. One sweep per graph; gradients accumulate,
  /// so a second sweep would double them.
  void backward(int root) {
    require(!swept_, "graph backward: tape already swept");
    const Dense<T>& rv = at(root).val;
    require(rv.rows == 1 && rv.cols == 1, "graph backward: root is not a scalar");
    swept_ = true;
    nodes_[static_cast<std::size_t>(root)].grad.v[0] = T(1);
    for (std::size_t i = static_cast<std::size_t>(root) + 1; i-- > 0;)
      if (nodes_[i].back) nodes_[i].back();
  }

 private:
  static constexpr T kMeanClamp = T(1e-6);
  static constexpr T kVarFloor = T(1e-6);
  static constexpr T kLog2Pi_ = T(1.8378770664093454836);

  struct Node {
    Dense<T> val;
    Dense<T> grad;
    std::function<void()> back;
  };

  std::vector<Node> nodes_;
  bool swept_ = false;

  static T sigmoid_val(T v) {
    if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
    const T e = std::exp(v);
    return e / (T(1) + e);
  }

  template <typename F>
  static void for_each(std::size_t n, F f) {
    const std::ptrdiff_t m = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < m; ++i) f(static_cast<std::size_t>(i));
  }

  static void accumulate(Dense<T>& dst, const Dense<T>& src) {
    require(dst.same_shape(src), "graph: gradient shape mismatch");
    for_each(dst.size(), [&](std::size_t i) { dst.v[i] += src.v[i]; });
  }

  const Node& at(int id) const {
    require(id >= 0 && static_cast<std::size_t>(id) < nodes_.size(), "graph: bad node id");
    return nodes_[static_cast<std::size_t>(id)];
  }

  int push(Dense<T> v) {
    Node n;
    n.grad = Dense<T>(v.rows, v.cols);
    n.val = std::move(v);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  template <typename FwdF, typename BackF>
  int elementwise1(int x, FwdF fwd, BackF bwd) {
    const Dense<T>& xv = at(x).val;
    Dense<T> out(xv.rows, xv.cols);
    for_each(out.size(), [&](std::size_t i) { out.v[i] = fwd(xv.v[i]); });
    const int id = push(std::move(out));
    nodes_[id].back = [this, x, id, bwd] {
      const Dense<T>& g = nodes_[id].grad;
      const Dense<T>& xv = nodes_[x].val;
      Dense<T>& dx = nodes_[x].grad;
      for_each(g.size(), [&](std::size_t i) { bwd(xv.v[i], g.v[i], dx.v[i]); });
    };
    return id;
  }

  template <typename FwdF, typename BackF>
  int elementwise2(int a, int b, FwdF fwd, BackF bwd) {
    const Dense<T>& av = at(a).val;
    const Dense<T>& bv = at(b).val;
    require(av.same_shape(bv), "graph: elementwise shape mismatch");
    Dense<T> out(av.rows, av.cols);
    for_each(out.size(), [&](std::size_t i) { out.v[i] = fwd(av.v[i], bv.v[i]); });
    const int id = push(std::move(out));
    nodes_[id].back = [this, a, b, id, bwd] {
      const Dense<T>& g = nodes_[id].grad;
      const Dense<T>& av = nodes_[a].val;
      const Dense<T>& bv = nodes_[b].val;
      Dense<T>& da = nodes_[a].grad;
      Dense<T>& db = nodes_[b].grad;
      for_each(g.size(), [&](std::size_t i) { bwd(av.v[i], bv.v[i], g.v[i], da.v[i], db.v[i]); });
    };
    return id;
  }
};

}  // namespace mvcca::graph
