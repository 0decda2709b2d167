#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "common.hpp"
#include <doctest.h>
#include "mvcca/graph.hpp"
#include "mvcca/mvlayer.hpp"
#include "mvcca/nets.hpp"

using namespace mvcca;
using graph::Graph;
using nets::Binding;
using nets::Gate;
using nets::MlpSpec;
using nets::ParamStore;
using testutil::rand_mat;

namespace {

// Central finite difference of f through one coordinate of m.
double fd_coord(Mat& m, std::size_t i, const std::function<double()>& f, double h) {
  const double old = m.v[i];
  m.v[i] = old + h;
  const double up = f();
  m.v[i] = old - h;
  const double down = f();
  m.v[i] = old;
  return (up - down) / (2.0 * h);
}

// Checks every coordinate of the autodiff gradient against central
// differences. `f` must re-evaluate the loss from the current m.
void check_grad(Mat& m, const Mat& got, const std::function<double()>& f, double rel_tol,
                double denom_floor, double h_scale = 1e-5) {
  REQUIRE(got.same_shape(m));
  double worst = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double h = h_scale * (1.0 + std::abs(m.v[i]));
    const double fd = fd_coord(m, i, f, h);
    const double rel = std::abs(got.v[i] - fd) / std::max(std::abs(fd), denom_floor);
    worst = std::max(worst, rel);
  }
  CHECK(worst <= rel_tol);
}

double sigmoid_ref(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double softplus_ref(double x) { return std::log1p(std::exp(x)); }

}  // namespace

TEST_CASE("elementwise ops match reference values and finite differences") {
  // Inputs bounded away from zero so relu/sqrt/log/div stay smooth under
  // the FD probes.
  Mat a(3, 4), b(3, 4);
  rng::SeqRng r(11);
  for (std::size_t i = 0; i < a.size(); ++i) {
    a.v[i] = (0.2 + r.uniform()) * (i % 2 ? 1.0 : -1.0);
    b.v[i] = 0.3 + r.uniform();
  }

  struct Unary {
    const char* name;
    std::function<int(Graph<double>&, int)> op;
    std::function<double(double)> ref;
    bool positive_only;
  };
  const std::vector<Unary> unary = {
      {"affine", [](Graph<double>& g, int x) { return g.affine(x, 2.5, -0.75); },
       [](double v) { return 2.5 * v - 0.75; }, false},
      {"square", [](Graph<double>& g, int x) { return g.square(x); },
       [](double v) { return v * v; }, false},
      {"sqrt", [](Graph<double>& g, int x) { return g.sqrt(x); },
       [](double v) { return std::sqrt(v); }, true},
      {"log", [](Graph<double>& g, int x) { return g.log(x); },
       [](double v) { return std::log(v); }, true},
      {"relu", [](Graph<double>& g, int x) { return g.relu(x); },
       [](double v) { return v > 0 ? v : 0.0; }, false},
      {"sigmoid", [](Graph<double>& g, int x) { return g.sigmoid(x); }, sigmoid_ref, false},
      {"softplus", [](Graph<double>& g, int x) { return g.softplus(x); }, softplus_ref, false},
      {"clamp", [](Graph<double>& g, int x) { return g.clamp(x, -0.5, 0.9); },
       [](double v) { return v < -0.5 ? -0.5 : (v > 0.9 ? 0.9 : v); }, false},
      {"clamp_min", [](Graph<double>& g, int x) { return g.clamp_min(x, 0.4); },
       [](double v) { return v < 0.4 ? 0.4 : v; }, false},
  };
  for (const Unary& u : unary) {
    CAPTURE(u.name);
    Mat x = u.positive_only ? b : a;
    // Keep clamp/relu inputs away from their kinks for the FD probe.
    auto loss = [&] {
      Graph<double> g;
      return g.scalar(g.sum_all(u.op(g, g.value(x))));
    };
    Graph<double> g;
    const int xid = g.value(x);
    const int y = u.op(g, xid);
    for (std::size_t i = 0; i < x.size(); ++i)
      CHECK(g.val(y).v[i] == doctest::Approx(u.ref(x.v[i])).epsilon(1e-14));
    const int root = g.sum_all(y);
    g.backward(root);
    Mat got = g.grad(xid);
    check_grad(x, got, loss, 1e-6, 1e-3);
  }

  struct Binary {
    const char* name;
    std::function<int(Graph<double>&, int, int)> op;
    std::function<double(double, double)> ref;
  };
  const std::vector<Binary> binary = {
      {"add", [](Graph<double>& g, int x, int y) { return g.add(x, y); },
       [](double x, double y) { return x + y; }},
      {"sub", [](Graph<double>& g, int x, int y) { return g.sub(x, y); },
       [](double x, double y) { return x - y; }},
      {"mul", [](Graph<double>& g, int x, int y) { return g.mul(x, y); },
       [](double x, double y) { return x * y; }},
      {"div", [](Graph<double>& g, int x, int y) { return g.div(x, y); },
       [](double x, double y) { return x / y; }},
  };
  for (const Binary& u : binary) {
    CAPTURE(u.name);
    auto loss = [&] {
      Graph<double> g;
      return g.scalar(g.sum_all(u.op(g, g.value(a), g.value(b))));
    };
    Graph<double> g;
    const int x = g.value(a);
    const int y = g.value(b);
    const int out = u.op(g, x, y);
    for (std::size_t i = 0; i < a.size(); ++i)
      CHECK(g.val(out).v[i] == doctest::Approx(u.ref(a.v[i], b.v[i])).epsilon(1e-14));
    g.backward(g.sum_all(out));
    Mat ga = g.grad(x);
    Mat gb = g.grad(y);
    check_grad(a, ga, loss, 1e-6, 1e-3);
    check_grad(b, gb, loss, 1e-6, 1e-3);
  }

  SUBCASE("aliased operands accumulate both contributions") {
    Graph<double> g;
    const int x = g.value(a);
    g.backward(g.sum_all(g.mul(x, x)));
    for (std::size_t i = 0; i < a.size(); ++i)
      CHECK(g.grad(x).v[i] == doctest::Approx(2.0 * a.v[i]).epsilon(1e-14));
  }

  SUBCASE("backward demands a scalar root and a fresh tape") {
    Graph<double> g;
    const int x = g.value(a);
    CHECK_THROWS(g.backward(x));
    Graph<double> g2;
    const int s = g2.sum_all(g2.value(a));
    g2.backward(s);
    CHECK_THROWS(g2.backward(s));
  }
}

TEST_CASE("column concat and slice invert each other and route gradients") {
  const Mat a = rand_mat(4, 3, 21);
  const Mat b = rand_mat(4, 2, 22);

  Graph<double> g;
  const int an = g.value(a);
  const int bn = g.value(b);
  const int cat = g.concat_cols(an, bn);
  const int backa = g.slice_cols(cat, 0, 3);
  const int backb = g.slice_cols(cat, 3, 5);
  CHECK(g.val(backa).v == a.v);
  CHECK(g.val(backb).v == b.v);

  const int empty = g.slice_cols(cat, 2, 2);
  CHECK(g.val(empty).rows == 4);
  CHECK(g.val(empty).cols == 0);
  const int cat2 = g.concat_cols(backa, empty);
  CHECK(g.val(cat2).v == a.v);
  CHECK_THROWS(g.slice_cols(cat, 4, 6));

  Mat am = a, bm = b;
  auto loss = [&] {
    Graph<double> h;
    const int x = h.value(am);
    const int y = h.value(bm);
    const int c = h.concat_cols(h.affine(x, 2.0, 0.0), h.slice_cols(y, 0, 2));
    return h.scalar(h.sum_all(h.square(c)));
  };
  Graph<double> h;
  const int x = h.value(am);
  const int y = h.value(bm);
  h.backward(h.sum_all(h.square(h.concat_cols(h.affine(x, 2.0, 0.0), h.slice_cols(y, 0, 2)))));
  Mat gx = h.grad(x);
  Mat gy = h.grad(y);
  check_grad(am, gx, loss, 1e-6, 1e-3);
  check_grad(bm, gy, loss, 1e-6, 1e-3);
}

TEST_CASE("linear layer gradient equals the closed form for squared loss") {
  const std::size_t n = 6, in = 4, out = 3;
  const Mat x = rand_mat(n, in, 31);
  const Mat w = rand_mat(out, in, 32);
  const Mat bias = rand_mat(1, out, 33);
  const Mat y = rand_mat(n, out, 34);

  Graph<double> g;
  const int xn = g.value(x);
  const int wn = g.value(w);
  const int bn = g.value(bias);
  const int pred = g.linear(xn, wn, bn);
  const int root = g.sum_all(g.square(g.sub(pred, g.value(y))));
  g.backward(root);

  // Residuals and the textbook gradients, by plain loops.
  Mat resid(n, out);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < out; ++j) {
      double s = bias(0, j);
      for (std::size_t k = 0; k < in; ++k) s += x(i, k) * w(j, k);
      resid(i, j) = s - y(i, j);
    }
  Mat dw(out, in);
  for (std::size_t j = 0; j < out; ++j)
    for (std::size_t k = 0; k < in; ++k) {
      double s = 0;
      for (std::size_t i = 0; i < n; ++i) s += 2.0 * resid(i, j) * x(i, k);
      dw(j, k) = s;
    }
  Mat db(1, out);
  for (std::size_t j = 0; j < out; ++j)
    for (std::size_t i = 0; i < n; ++i) db(0, j) += 2.0 * resid(i, j);
  Mat dx(n, in);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < in; ++k)
      for (std::size_t j = 0; j < out; ++j) dx(i, k) += 2.0 * resid(i, j) * w(j, k);

  CHECK(max_abs_diff(g.grad(wn), dw) <= 1e-12 * (1.0 + max_abs(dw)));
  CHECK(max_abs_diff(g.grad(bn), db) <= 1e-12 * (1.0 + max_abs(db)));
  CHECK(max_abs_diff(g.grad(xn), dx) <= 1e-12 * (1.0 + max_abs(dx)));
}

TEST_CASE("mlp forward: zero logits, identity network, loop-oracle agreement") {
  SUBCASE("all-zero parameters with a sigmoid head emit exactly 0.5") {
    MlpSpec spec{4, {5}, {{"p", 3, Gate::kSigmoid}}, 0.0};
    ParamStore<double> store;
    nets::init_mlp(store, spec, "net", 7);
    for (auto& e : store.entries)
      for (auto& v : e.value.v) v = 0.0;
    const auto outs = nets::mlp_apply(store, spec, "net", rand_mat(6, 4, 41), false, 0);
    for (double v : outs[0].v) CHECK(v == 0.5);
  }

  SUBCASE("single linear layer with identity weights reproduces the input") {
    MlpSpec spec{4, {}, {{"y", 4, Gate::kLinear}}, 0.0};
    ParamStore<double> store;
    store.add("id.head.y.w", Mat::eye(4));
    store.add("id.head.y.b", Mat(1, 4));
    const Mat x = rand_mat(5, 4, 42);
    const auto outs = nets::mlp_apply(store, spec, "id", x, false, 0);
    CHECK(outs[0].v == x.v);
  }

  SUBCASE("random net matches an independent loop re-implementation") {
    MlpSpec spec{5, {7, 6}, {{"a", 4, Gate::kLinear}, {"b", 3, Gate::kSigmoid},
                             {"c", 2, Gate::kSoftplus}}, 0.3};
    ParamStore<double> store;
    nets::init_mlp(store, spec, "net", 43);
    const Mat x = rand_mat(8, 5, 44);
    // Dropout configured but eval mode: must be inert regardless of seed.
    const auto outs = nets::mlp_apply(store, spec, "net", x, false, 12345);
    const auto outs2 = nets::mlp_apply(store, spec, "net", x, false, 999);
    for (std::size_t h = 0; h < outs.size(); ++h) CHECK(outs[h].v == outs2[h].v);

    auto apply_layer = [](const Mat& inp, const Mat& w, const Mat& b) {
      Mat o(inp.rows, w.rows);
      for (std::size_t i = 0; i < inp.rows; ++i)
        for (std::size_t j = 0; j < w.rows; ++j) {
          double s = b(0, j);
          for (std::size_t k = 0; k < inp.cols; ++k) s += inp(i, k) * w(j, k);
          o(i, j) = s;
        }
      return o;
    };
    Mat h = x;
    for (std::size_t l = 0; l < 2; ++l) {
      h = apply_layer(h, store.at("net.layer" + std::to_string(l) + ".w").value,
                      store.at("net.layer" + std::to_string(l) + ".b").value);
      for (auto& v : h.v) v = std::max(v, 0.0);
    }
    const std::vector<std::function<double(double)>> gates = {
        [](double v) { return v; }, sigmoid_ref, softplus_ref};
    for (std::size_t hd = 0; hd < spec.heads.size(); ++hd) {
      Mat o = apply_layer(h, store.at("net.head." + spec.heads[hd].name + ".w").value,
                          store.at("net.head." + spec.heads[hd].name + ".b").value);
      for (auto& v : o.v) v = gates[hd](v);
      CHECK(max_abs_diff(outs[hd], o) <= 1e-12);
      if (spec.heads[hd].gate == Gate::kSigmoid)
        for (double v : outs[hd].v) CHECK((v > 0.0 && v < 1.0));
      if (spec.heads[hd].gate == Gate::kSoftplus)
        for (double v : outs[hd].v) CHECK(v > 0.0);
    }
  }

  SUBCASE("shape and finiteness failures name the offending stage") {
    MlpSpec spec{4, {5}, {{"y", 2, Gate::kLinear}}, 0.0};
    ParamStore<double> store;
    nets::init_mlp(store, spec, "net", 45);
    CHECK_THROWS(nets::mlp_apply(store, spec, "net", rand_mat(3, 5, 46), false, 0));
    store.at("net.layer0.w").value(0, 0) = std::numeric_limits<double>::infinity();
    CHECK_THROWS_WITH(nets::mlp_apply(store, spec, "net", rand_mat(3, 4, 47), false, 0),
                      doctest::Contains("hidden layer 0"));
    store.at("net.layer0.w").value(0, 0) = 0.0;
    store.at("net.head.y.w").value(0, 0) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_WITH(nets::mlp_apply(store, spec, "net", rand_mat(3, 4, 47), false, 0),
                      doctest::Contains("head y"));
  }
}

TEST_CASE("mlp gradients match finite differences on a three-layer net") {
  MlpSpec spec{5, {6, 5, 4}, {{"a", 3, Gate::kLinear}, {"b", 2, Gate::kSoftplus}}, 0.0};
  ParamStore<double> store;
  nets::init_mlp(store, spec, "net", 51);
  const Mat x = rand_mat(4, 5, 52);

  auto assemble = [&](Graph<double>& g, Binding<double>& binding) {
    const auto outs = nets::mlp_forward(g, store, binding, spec, "net", g.value(x), false, 0);
    return g.add(g.sum_all(g.square(outs[0])), g.sum_all(g.square(outs[1])));
  };
  auto loss = [&] {
    Graph<double> g;
    Binding<double> binding;
    return g.scalar(assemble(g, binding));
  };
  Graph<double> g;
  Binding<double> binding;
  g.backward(assemble(g, binding));

  for (auto& e : store.entries) {
    CAPTURE(e.name);
    Mat got = g.grad(binding.node(e.name));
    check_grad(e.value, got, loss, 1e-5, 1e-3, 1e-5);
  }
}

TEST_CASE("duplicated input rows exactly double every parameter gradient") {
  MlpSpec spec{4, {5, 3}, {{"y", 2, Gate::kLinear}}, 0.0};
  ParamStore<double> store;
  nets::init_mlp(store, spec, "net", 61);
  const Mat one = rand_mat(1, 4, 62);
  Mat two(2, 4);
  for (std::size_t j = 0; j < 4; ++j) two(0, j) = two(1, j) = one(0, j);

  auto grads = [&](const Mat& x) {
    Graph<double> g;
    Binding<double> binding;
    const auto outs = nets::mlp_forward(g, store, binding, spec, "net", g.value(x), false, 0);
    g.backward(g.sum_all(g.square(outs[0])));
    std::map<std::string, Mat> out;
    for (const auto& [name, id] : binding.slots) out[name] = g.grad(id);
    return out;
  };
  const auto g1 = grads(one);
  const auto g2 = grads(two);
  for (const auto& [name, m1] : g1) {
    const Mat& m2 = g2.at(name);
    for (std::size_t i = 0; i < m1.size(); ++i) CHECK(m2.v[i] == 2.0 * m1.v[i]);
  }
}

TEST_CASE("bernoulli log-likelihood: values, clamp limit, rejection, gradient") {
  Mat half(1, 1, 0.5);
  CHECK(nets::bernoulli_loglik(half, half) == std::log(0.5));
  CHECK(nets::bernoulli_loglik(half, half) == doctest::Approx(-0.6931).epsilon(1e-3));

  // Saturated mean is pulled back to 1 - 1e-6, so the value sits just
  // below zero.
  Mat ones(1, 1, 1.0);
  const double sat = nets::bernoulli_loglik(ones, ones);
  CHECK(sat < 0.0);
  CHECK(sat > -1.1e-6);

  Mat bad(1, 1, 1.5);
  CHECK_THROWS(nets::bernoulli_loglik(half, bad));
  Mat neg(1, 1, -0.1);
  CHECK_THROWS(nets::bernoulli_loglik(half, neg));

  // Batch averaging: two identical rows give the single-row value.
  Mat m2(2, 3), x2(2, 3);
  rng::SeqRng r(71);
  for (std::size_t j = 0; j < 3; ++j) {
    m2(0, j) = m2(1, j) = 0.1 + 0.8 * r.uniform();
    x2(0, j) = x2(1, j) = r.uniform();
  }
  Mat m1(1, 3), x1(1, 3);
  for (std::size_t j = 0; j < 3; ++j) {
    m1(0, j) = m2(0, j);
    x1(0, j) = x2(0, j);
  }
  CHECK(nets::bernoulli_loglik(m2, x2) == doctest::Approx(nets::bernoulli_loglik(m1, x1)));

  Mat mean(3, 4), x(3, 4);
  for (auto& v : mean.v) v = 0.1 + 0.8 * r.uniform();
  for (auto& v : x.v) v = r.uniform();
  auto loss = [&] {
    Graph<double> g;
    return g.scalar(g.bernoulli_ll(g.value(mean), x));
  };
  Graph<double> g;
  const int mn = g.value(mean);
  g.backward(g.bernoulli_ll(mn, x));
  Mat got = g.grad(mn);
  // Analytic gradient x/m - (1-x)/(1-m) and the FD oracle.
  for (std::size_t i = 0; i < mean.size(); ++i) {
    const double want = x.v[i] / mean.v[i] - (1.0 - x.v[i]) / (1.0 - mean.v[i]);
    CHECK(got.v[i] == doctest::Approx(want).epsilon(1e-12));
  }
  check_grad(mean, got, loss, 1e-6, 1e-3);

  // Clamped means carry zero gradient.
  Mat msat(1, 2);
  msat.v = {2.0, -1.0};
  Mat xs(1, 2);
  xs.v = {1.0, 0.0};
  Graph<double> gs;
  const int ms = gs.value(msat);
  gs.backward(gs.bernoulli_ll(ms, xs));
  CHECK(gs.grad(ms).v[0] == 0.0);
  CHECK(gs.grad(ms).v[1] == 0.0);
}

TEST_CASE("gaussian log-likelihood: normalization, density oracle, floor, gradient") {
  const double two_pi = 2.0 * 3.14159265358979323846;
  Mat m0(1, 1, 0.7), v0(1, 1, 1.0 / two_pi), x0(1, 1, 0.7);
  CHECK(std::abs(nets::gaussian_loglik(m0, v0, x0)) <= 1e-12);

  Mat z(1, 1, 0.0), one(1, 1, 1.0);
  CHECK(nets::gaussian_loglik(z, one, z) == doctest::Approx(-0.9189385332046727).epsilon(1e-12));

  Mat mean = rand_mat(4, 3, 81);
  Mat var(4, 3);
  Mat x = rand_mat(4, 3, 82);
  rng::SeqRng r(83);
  for (auto& v : var.v) v = 0.2 + r.uniform();
  double want = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x.v[i] - mean.v[i];
    want += -0.5 * (std::log(two_pi * var.v[i]) + d * d / var.v[i]);
  }
  want /= static_cast<double>(x.rows);
  CHECK(std::abs(nets::gaussian_loglik(mean, var, x) - want) <= 1e-10);

  SUBCASE("variance floor applies below 1e-6 and kills its gradient") {
    Mat tiny(1, 1, 1e-9), floored(1, 1, 1e-6), xx(1, 1, 0.4), mm(1, 1, 0.1);
    CHECK(nets::gaussian_loglik(mm, tiny, xx) == nets::gaussian_loglik(mm, floored, xx));
    Graph<double> g;
    const int vn = g.value(tiny);
    g.backward(g.gaussian_ll(g.value(mm), vn, xx));
    CHECK(g.grad(vn).v[0] == 0.0);
  }

  SUBCASE("gradients match finite differences") {
    auto loss = [&] {
      Graph<double> g;
      return g.scalar(g.gaussian_ll(g.value(mean), g.value(var), x));
    };
    Graph<double> g;
    const int mn = g.value(mean);
    const int vn = g.value(var);
    g.backward(g.gaussian_ll(mn, vn, x));
    Mat gm = g.grad(mn);
    Mat gv = g.grad(vn);
    check_grad(mean, gm, loss, 1e-6, 1e-3);
    check_grad(var, gv, loss, 1e-6, 1e-3);
  }
}

TEST_CASE("kl reductions reuse the scalar cores and differentiate cleanly") {
  const double lam0 = 1.7, lam = 0.6;
  Mat mu0 = rand_mat(3, 2, 91);
  Mat mu = rand_mat(3, 4, 92);
  Mat psi(3, 4);
  rng::SeqRng r(93);
  for (auto& v : psi.v) v = 0.3 + r.uniform();

  Graph<double> g;
  const int m0 = g.value(mu0);
  const int mn = g.value(mu);
  const int pn = g.value(psi);
  const int kphi = g.kl_phi_sum(m0, lam0);
  const int keps = g.kl_eps_sum(mn, pn, lam);

  double wphi = 0, weps = 0;
  for (std::size_t rr = 0; rr < 3; ++rr) {
    wphi += mvlayer::kl_phi_core(mu0.row(rr), 2, lam0);
    weps += mvlayer::kl_eps_core(mu.row(rr), psi.row(rr), 4, lam);
  }
  CHECK(g.scalar(kphi) == wphi);
  CHECK(g.scalar(keps) == weps);
  CHECK(g.scalar(kphi) >= 0.0);
  CHECK(g.scalar(keps) >= 0.0);

  g.backward(g.add(kphi, keps));
  Mat gm0 = g.grad(m0);
  Mat gm = g.grad(mn);
  Mat gp = g.grad(pn);
  auto loss_phi = [&] {
    Graph<double> h;
    return h.scalar(h.kl_phi_sum(h.value(mu0), lam0));
  };
  auto loss_eps = [&] {
    Graph<double> h;
    return h.scalar(h.kl_eps_sum(h.value(mu), h.value(psi), lam));
  };
  check_grad(mu0, gm0, loss_phi, 1e-6, 1e-3);
  check_grad(mu, gm, loss_eps, 1e-6, 1e-3);
  check_grad(psi, gp, loss_eps, 1e-6, 1e-3);

  Graph<double> h;
  Mat bad = psi;
  bad.v[0] = 0.0;
  CHECK_THROWS(h.kl_eps_sum(h.value(mu), h.value(bad), lam));
  CHECK_THROWS(h.kl_phi_sum(h.value(mu0), 0.0));
}

TEST_CASE("dropout: inert at rate zero and in eval mode, inverted scaling, fixed masks") {
  Mat x = rand_mat(100, 100, 101);
  for (auto& v : x.v) v += (v >= 0 ? 0.5 : -0.5);  // keep entries away from zero

  Graph<double> g;
  const int xn = g.value(x);
  const int y0 = g.dropout(xn, 0.0, 7);
  CHECK(g.val(y0).v == x.v);

  const int y = g.dropout(xn, 0.5, 7);
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = g.val(y).v[i];
    CHECK((v == 0.0 || v == 2.0 * x.v[i]));
    zeros += v == 0.0;
  }
  const double frac = static_cast<double>(zeros) / static_cast<double>(x.size());
  CHECK(frac > 0.45);
  CHECK(frac < 0.55);

  Graph<double> g2;
  const int x2 = g2.value(x);
  CHECK(g2.val(g2.dropout(x2, 0.5, 7)).v == g.val(y).v);
  CHECK(g2.val(g2.dropout(x2, 0.5, 8)).v != g.val(y).v);

  // Backward reproduces the mask exactly.
  Graph<double> g3;
  const int x3 = g3.value(x);
  const int y3 = g3.dropout(x3, 0.5, 7);
  g3.backward(g3.sum_all(y3));
  for (std::size_t i = 0; i < x.size(); ++i)
    CHECK(g3.grad(x3).v[i] == (g.val(y).v[i] == 0.0 ? 0.0 : 2.0));

  SUBCASE("an mlp with dropout is deterministic given the seed and inert in eval mode") {
    MlpSpec spec{6, {8, 8}, {{"y", 3, Gate::kLinear}}, 0.4};
    ParamStore<double> store;
    nets::init_mlp(store, spec, "net", 103);
    const Mat inp = rand_mat(20, 6, 104);
    const auto a = nets::mlp_apply(store, spec, "net", inp, true, 55);
    const auto b = nets::mlp_apply(store, spec, "net", inp, true, 55);
    CHECK(a[0].v == b[0].v);
    const auto c = nets::mlp_apply(store, spec, "net", inp, true, 56);
    CHECK(a[0].v != c[0].v);
    MlpSpec nodrop = spec;
    nodrop.dropout = 0.0;
    const auto d = nets::mlp_apply(store, spec, "net", inp, false, 55);
    const auto e = nets::mlp_apply(store, nodrop, "net", inp, true, 55);
    CHECK(d[0].v == e[0].v);
  }
}

TEST_CASE("adam: fixed point, first-step magnitude, weight decay, quadratic descent") {
  nets::AdamConfig cfg;
  cfg.weight_decay = 0.0;

  SUBCASE("zero gradient leaves parameters untouched") {
    ParamStore<double> store;
    store.add("theta", rand_mat(2, 3, 111));
    const Mat before = store.at("theta").value;
    Graph<double> g;
    Binding<double> binding;
    nets::bind_tensor(g, store, binding, "theta");
    g.backward(g.sum_all(g.value(Mat(1, 1, 4.0))));  // loss independent of theta
    nets::adam_step(store, g, binding, cfg);
    CHECK(store.at("theta").value.v == before.v);
    CHECK(store.step == 1);
  }

  SUBCASE("first step moves each coordinate by about lr in the gradient direction") {
    ParamStore<double> store;
    Mat theta(1, 3);
    theta.v = {1.0, 2.0, -3.0};
    store.add("theta", theta);
    Mat slope(1, 3);
    slope.v = {0.5, -2.0, 3.0};
    Graph<double> g;
    Binding<double> binding;
    const int tn = nets::bind_tensor(g, store, binding, "theta");
    g.backward(g.sum_all(g.mul(tn, g.value(slope))));
    nets::adam_step(store, g, binding, cfg);
    for (std::size_t i = 0; i < 3; ++i) {
      const double delta = store.at("theta").value.v[i] - theta.v[i];
      const double want = -cfg.lr * (slope.v[i] > 0 ? 1.0 : -1.0);
      CHECK(std::abs(delta - want) <= 1e-6 * cfg.lr);
    }
  }

  SUBCASE("weight decay alone pushes a parameter toward zero at full step size") {
    nets::AdamConfig wd = cfg;
    wd.weight_decay = 0.1;
    ParamStore<double> store;
    store.add("theta", Mat(1, 1, 2.0));
    Graph<double> g;
    Binding<double> binding;
    nets::bind_tensor(g, store, binding, "theta");
    g.backward(g.sum_all(g.value(Mat(1, 1, 0.0))));
    nets::adam_step(store, g, binding, wd);
    CHECK(std::abs(store.at("theta").value.v[0] - (2.0 - wd.lr)) <= 1e-6 * wd.lr);
  }

  SUBCASE("a one-dimensional quadratic reaches its minimizer") {
    nets::AdamConfig quad = cfg;
    quad.lr = 0.01;
    ParamStore<double> store;
    store.add("theta", Mat(1, 1, 0.0));
    std::size_t steps = 0;
    for (; steps < 5000; ++steps) {
      Graph<double> g;
      Binding<double> binding;
      const int tn = nets::bind_tensor(g, store, binding, "theta");
      g.backward(g.sum_all(g.square(g.affine(tn, 1.0, -3.0))));
      nets::adam_step(store, g, binding, quad);
      if (std::abs(store.at("theta").value.v[0] - 3.0) <= 1e-6) break;
    }
    CHECK(std::abs(store.at("theta").value.v[0] - 3.0) <= 1e-6);
    CHECK(steps < 5000);
  }

  SUBCASE("non-finite gradients are rejected with the tensor named") {
    ParamStore<double> store;
    store.add("theta", Mat(1, 1, 0.0));
    Graph<double> g;
    Binding<double> binding;
    const int tn = nets::bind_tensor(g, store, binding, "theta");
    g.backward(g.sum_all(g.log(tn)));
    CHECK_THROWS_WITH(nets::adam_step(store, g, binding, cfg), doctest::Contains("theta"));
  }
}

namespace {

// Two-view variational objective assembled from raw graph ops: encoders,
// the shared-layer algebra, one reparameterized draw, decoders, and the
// closed-form KL terms. This mirrors what the trainer builds; here it is
// the finite-difference target for the full composition.
struct MiniModel {
  static constexpr std::size_t kN = 3, kD1 = 6, kD2 = 5, kZ1 = 3, kZ2 = 4, kD0 = 2;
  double lam0 = 1.3, lam1 = 2.0, lam2 = 0.8;
  MlpSpec enc1{kD1, {7}, {{"mu", kZ1, Gate::kLinear}, {"var", kZ1, Gate::kSoftplus}}, 0.1};
  MlpSpec enc2{kD2, {6}, {{"mu", kZ2, Gate::kLinear}, {"var", kZ2, Gate::kSoftplus}}, 0.0};
  MlpSpec f0{kD1, {5}, {{"p", kD0, Gate::kSigmoid}}, 0.0};
  MlpSpec dec1{kZ1, {8}, {{"mean", kD1, Gate::kSigmoid}}, 0.0};
  MlpSpec dec2{kZ2, {7}, {{"mean", kD2, Gate::kLinear}, {"var", kD2, Gate::kSoftplus}}, 0.0};
  ParamStore<double> store;
  Mat x1{kN, kD1}, x2{kN, kD2};
  Mat xi_phi{kN, kD0}, xi_eps1{kN, kZ1}, xi_eps2{kN, kZ2};

  MiniModel() {
    nets::init_mlp(store, enc1, "enc1", 1001);
    nets::init_mlp(store, enc2, "enc2", 1002);
    nets::init_mlp(store, f0, "f0", 1003);
    nets::init_mlp(store, dec1, "dec1", 1004);
    nets::init_mlp(store, dec2, "dec2", 1005);
    rng::fill_uniform(x1, 2001, 0.0, 1.0);
    rng::fill_normal(x2, 2002);
    rng::fill_normal(xi_phi, 2003);
    rng::fill_normal(xi_eps1, 2004);
    rng::fill_normal(xi_eps2, 2005);
  }

  // Builds the per-datum-averaged objective; returns the root node id.
  int build(Graph<double>& g, Binding<double>& binding) const {
    const double inv_n = 1.0 / static_cast<double>(kN);
    const int x1n = g.value(x1);
    const int x2n = g.value(x2);

    const auto e1 = nets::mlp_forward(g, store, binding, enc1, "enc1", x1n, true, 31);
    const auto e2 = nets::mlp_forward(g, store, binding, enc2, "enc2", x2n, true, 32);
    const auto pf = nets::mlp_forward(g, store, binding, f0, "f0", x1n, true, 33);

    const int var1 = g.clamp_min(e1[1], mvlayer::kVarMin);
    const int var2 = g.clamp_min(e2[1], mvlayer::kVarMin);
    const int p = g.clamp(pf[0], mvlayer::kPMin, 1.0 - mvlayer::kPMin);
    const int sqrtp = g.sqrt(p);

    const int mu1l = g.slice_cols(e1[0], 0, kD0);
    const int mu2l = g.slice_cols(e2[0], 0, kD0);
    const int var1l = g.slice_cols(var1, 0, kD0);
    const int var2l = g.slice_cols(var2, 0, kD0);
    const int w1 = g.mul(g.sqrt(var1l), sqrtp);
    const int w2 = g.mul(g.sqrt(var2l), sqrtp);

    const int one_minus_p = g.affine(p, -1.0, 1.0);
    const int psi1 = g.concat_cols(g.clamp_min(g.mul(var1l, one_minus_p), mvlayer::kPsiMin),
                                   g.slice_cols(var1, kD0, kZ1));
    const int psi2 = g.concat_cols(g.clamp_min(g.mul(var2l, one_minus_p), mvlayer::kPsiMin),
                                   g.slice_cols(var2, kD0, kZ2));

    const int numer = g.add(g.affine(g.mul(w1, mu1l), lam1, 0.0),
                            g.affine(g.mul(w2, mu2l), lam2, 0.0));
    const int denom = g.add(g.affine(g.square(w1), lam1, lam0),
                            g.affine(g.square(w2), lam2, 0.0));
    const int mu0 = g.div(numer, denom);

    const int mu_eps1 = g.concat_cols(g.sub(mu1l, g.mul(w1, mu0)),
                                      g.slice_cols(e1[0], kD0, kZ1));
    const int mu_eps2 = g.concat_cols(g.sub(mu2l, g.mul(w2, mu0)),
                                      g.slice_cols(e2[0], kD0, kZ2));

    const int phi = g.add(mu0, g.value(xi_phi));
    const int eps1 = g.add(mu_eps1, g.mul(g.sqrt(psi1), g.value(xi_eps1)));
    const int eps2 = g.add(mu_eps2, g.mul(g.sqrt(psi2), g.value(xi_eps2)));
    const int z1 = g.concat_cols(g.add(g.mul(w1, phi), g.slice_cols(eps1, 0, kD0)),
                                 g.slice_cols(eps1, kD0, kZ1));
    const int z2 = g.concat_cols(g.add(g.mul(w2, phi), g.slice_cols(eps2, 0, kD0)),
                                 g.slice_cols(eps2, kD0, kZ2));

    const auto d1 = nets::mlp_forward(g, store, binding, dec1, "dec1", z1, true, 34);
    const auto d2 = nets::mlp_forward(g, store, binding, dec2, "dec2", z2, true, 35);

    const int recon = g.add(g.bernoulli_ll(d1[0], x1),
                            g.gaussian_ll(d2[0], g.clamp_min(d2[1], mvlayer::kVarMin), x2));
    const int kl = g.add(g.kl_phi_sum(mu0, lam0),
                         g.add(g.kl_eps_sum(mu_eps1, psi1, lam1),
                               g.kl_eps_sum(mu_eps2, psi2, lam2)));
    return g.affine(g.sub(recon, kl), inv_n, 0.0);
  }

  double eval() const {
    Graph<double> g;
    Binding<double> binding;
    return g.scalar(build(g, binding));
  }
};

}  // namespace

TEST_CASE("composed variational objective matches finite differences end to end") {
  MiniModel m;
  Graph<double> g;
  Binding<double> binding;
  const int root = m.build(g, binding);
  CHECK(std::isfinite(g.scalar(root)));
  g.backward(root);

  double worst = 0;
  std::string worst_name;
  for (auto& e : m.store.entries) {
    const Mat got = g.grad(binding.node(e.name));
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      const double h = 1e-6 * (1.0 + std::abs(e.value.v[i]));
      const double fd = fd_coord(e.value, i, [&] { return m.eval(); }, h);
      const double rel = std::abs(got.v[i] - fd) / std::max(std::abs(fd), 1e-2);
      if (rel > worst) {
        worst = rel;
        worst_name = e.name;
      }
    }
  }
  CAPTURE(worst_name);
  CHECK(worst <= 1e-4);
}

TEST_CASE("forward and backward are bitwise identical across thread counts") {
  MlpSpec spec{6, {9, 7}, {{"a", 4, Gate::kLinear}, {"b", 3, Gate::kSoftplus}}, 0.3};
  ParamStore<double> store;
  nets::init_mlp(store, spec, "net", 121);
  const Mat x = rand_mat(17, 6, 122);

  auto run = [&] {
    Graph<double> g;
    Binding<double> binding;
    const auto outs = nets::mlp_forward(g, store, binding, spec, "net", g.value(x), true, 5);
    g.backward(g.add(g.sum_all(g.square(outs[0])), g.sum_all(g.square(outs[1]))));
    std::map<std::string, Mat> grads;
    for (const auto& [name, id] : binding.slots) grads[name] = g.grad(id);
    return std::make_pair(g.val(outs[0]), grads);
  };
  kernels::set_threads(1);
  const auto [v1, g1] = run();
  kernels::set_threads(4);
  const auto [v4, g4] = run();
  kernels::set_threads(0);
  CHECK(v1.v == v4.v);
  for (const auto& [name, m1] : g1) CHECK(m1.v == g4.at(name).v);
}

TEST_CASE("single-precision path runs and tracks the double-precision forward") {
  MlpSpec spec{5, {6}, {{"y", 3, Gate::kSigmoid}}, 0.0};
  ParamStore<double> sd;
  nets::init_mlp(sd, spec, "net", 131);
  ParamStore<float> sf;
  for (const auto& e : sd.entries) {
    Dense<float> v(e.value.rows, e.value.cols);
    for (std::size_t i = 0; i < v.size(); ++i) v.v[i] = static_cast<float>(e.value.v[i]);
    sf.add(e.name, std::move(v));
  }
  const Mat xd = rand_mat(10, 5, 132);
  Dense<float> xf(10, 5);
  for (std::size_t i = 0; i < xf.size(); ++i) xf.v[i] = static_cast<float>(xd.v[i]);

  const auto od = nets::mlp_apply(sd, spec, "net", xd, false, 0);
  const auto of = nets::mlp_apply(sf, spec, "net", xf, false, 0);
  for (std::size_t i = 0; i < od[0].size(); ++i)
    CHECK(std::abs(static_cast<double>(of[0].v[i]) - od[0].v[i]) <= 1e-5);

  // A float training step must run and keep parameters finite.
  graph::Graph<float> g;
  Binding<float> binding;
  const auto outs = nets::mlp_forward(g, sf, binding, spec, "net", g.value(xf), true, 7);
  Dense<float> target(10, 3, 0.25f);
  g.backward(g.bernoulli_ll(outs[0], target));
  nets::AdamConfig cfg;
  nets::adam_step(sf, g, binding, cfg);
  for (const auto& e : sf.entries) CHECK(e.value.all_finite());
  CHECK(sf.step == 1);
}

TEST_CASE("parameter checkpoints round-trip through the container format") {
  MlpSpec spec{4, {5}, {{"y", 2, Gate::kLinear}}, 0.0};
  ParamStore<double> store;
  nets::init_mlp(store, spec, "net", 141);
  store.step = 37;
  store.at("net.layer0.w").m1.v[0] = 0.125;
  store.at("net.head.y.w").m2.v[3] = 2.5;

  const std::string path = "/tmp/mvcca_nets_ckpt_d.mvt";
  nets::save_params(store, path);
  const auto back = nets::load_params<double>(path);
  CHECK(back.step == 37);
  CHECK(back.entries.size() == store.entries.size());
  for (std::size_t i = 0; i < store.entries.size(); ++i) {
    CHECK(back.entries[i].name == store.entries[i].name);
    CHECK(back.entries[i].value.v == store.entries[i].value.v);
    CHECK(back.entries[i].m1.v == store.entries[i].m1.v);
    CHECK(back.entries[i].m2.v == store.entries[i].m2.v);
  }
  std::remove(path.c_str());

  ParamStore<float> fstore;
  Dense<float> w(3, 2);
  rng::fill_normal(w, 151);
  fstore.add("w", w);
  fstore.at("w").m1.v[1] = 0.5f;
  fstore.step = 9;
  const std::string fpath = "/tmp/mvcca_nets_ckpt_f.mvt";
  nets::save_params(fstore, fpath);
  const auto fback = nets::load_params<float>(fpath);
  CHECK(fback.step == 9);
  CHECK(fback.at("w").value.v == fstore.at("w").value.v);
  CHECK(fback.at("w").m1.v == fstore.at("w").m1.v);
  std::remove(fpath.c_str());
}
