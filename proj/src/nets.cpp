#include "mvcca/nets.hpp"

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mvcca/dataio.hpp"
#include "mvcca/rng.hpp"

namespace mvcca::nets {

void MlpSpec::validate() const {
  require(in_dim >= 1, "mlp spec: input width must be at least 1");
  for (std::size_t w : hidden) require(w >= 1, "mlp spec: hidden width must be at least 1");
  require(!heads.empty(), "mlp spec: at least one head required");
  for (const HeadSpec& h : heads) {
    require(!h.name.empty(), "mlp spec: head name must be non-empty");
    require(h.width >= 1, "mlp spec: head width must be at least 1");
  }
  for (std::size_t i = 0; i < heads.size(); ++i)
    for (std::size_t j = i + 1; j < heads.size(); ++j)
      require(heads[i].name != heads[j].name, "mlp spec: duplicate head name " + heads[i].name);
  require(dropout >= 0.0 && dropout < 1.0, "mlp spec: dropout must be in [0, 1)");
}

std::size_t MlpSpec::head_index(const std::string& name) const {
  for (std::size_t i = 0; i < heads.size(); ++i)
    if (heads[i].name == name) return i;
  throw std::invalid_argument("mlp spec: no head named " + name);
}

template <typename T>
bool ParamStore<T>::has(const std::string& name) const {
  for (const Entry& e : entries)
    if (e.name == name) return true;
  return false;
}

template <typename T>
typename ParamStore<T>::Entry& ParamStore<T>::at(const std::string& name) {
  for (Entry& e : entries)
    if (e.name == name) return e;
  throw std::invalid_argument("param store: no tensor named " + name);
}

template <typename T>
const typename ParamStore<T>::Entry& ParamStore<T>::at(const std::string& name) const {
  for (const Entry& e : entries)
    if (e.name == name) return e;
  throw std::invalid_argument("param store: no tensor named " + name);
}

template <typename T>
void ParamStore<T>::add(const std::string& name, Dense<T> value) {
  require(!has(name), "param store: duplicate tensor " + name);
  require(value.all_finite(), "param store: non-finite entries in " + name);
  Entry e;
  e.name = name;
  e.m1 = Dense<T>(value.rows, value.cols);
  e.m2 = Dense<T>(value.rows, value.cols);
  e.value = std::move(value);
  entries.push_back(std::move(e));
}

template <typename T>
int Binding<T>::node(const std::string& name) const {
  for (const auto& [n, id] : slots)
    if (n == name) return id;
  throw std::invalid_argument("binding: tensor not bound: " + name);
}

template <typename T>
bool Binding<T>::bound(const std::string& name) const {
  for (const auto& [n, id] : slots)
    if (n == name) return true;
  return false;
}

namespace {

template <typename T>
void add_glorot(ParamStore<T>& store, const std::string& name, std::size_t out, std::size_t in,
                std::uint64_t seed) {
  Dense<T> w(out, in);
  const T limit = static_cast<T>(std::sqrt(6.0 / static_cast<double>(in + out)));
  rng::fill_uniform(w, rng::derive(seed, name), -limit, limit);
  store.add(name, std::move(w));
}

std::string layer_w(const std::string& prefix, std::size_t i) {
  return prefix + ".layer" + std::to_string(i) + ".w";
}
std::string layer_b(const std::string& prefix, std::size_t i) {
  return prefix + ".layer" + std::to_string(i) + ".b";
}
std::string head_w(const std::string& prefix, const std::string& head) {
  return prefix + ".head." + head + ".w";
}
std::string head_b(const std::string& prefix, const std::string& head) {
  return prefix + ".head." + head + ".b";
}

}  // namespace

template <typename T>
void init_mlp(ParamStore<T>& store, const MlpSpec& spec, const std::string& prefix,
              std::uint64_t seed) {
  spec.validate();
  std::size_t fan_in = spec.in_dim;
  for (std::size_t i = 0; i < spec.hidden.size(); ++i) {
    add_glorot(store, layer_w(prefix, i), spec.hidden[i], fan_in, seed);
    store.add(layer_b(prefix, i), Dense<T>(1, spec.hidden[i]));
    fan_in = spec.hidden[i];
  }
  for (const HeadSpec& h : spec.heads) {
    add_glorot(store, head_w(prefix, h.name), h.width, fan_in, seed);
    store.add(head_b(prefix, h.name), Dense<T>(1, h.width));
  }
}

template <typename T>
int bind_tensor(graph::Graph<T>& g, const ParamStore<T>& store, Binding<T>& binding,
                const std::string& name) {
  for (const auto& [n, id] : binding.slots)
    if (n == name) return id;
  const int id = g.value(store.at(name).value);
  binding.slots.emplace_back(name, id);
  return id;
}

template <typename T>
std::vector<int> mlp_forward(graph::Graph<T>& g, const ParamStore<T>& store,
                             Binding<T>& binding, const MlpSpec& spec,
                             const std::string& prefix, int x, bool train_mode,
                             std::uint64_t seed) {
  spec.validate();
  require(g.val(x).cols == spec.in_dim, "mlp forward: input width does not match spec");
  int h = x;
  for (std::size_t i = 0; i < spec.hidden.size(); ++i) {
    const int w = bind_tensor(g, store, binding, layer_w(prefix, i));
    const int b = bind_tensor(g, store, binding, layer_b(prefix, i));
    const int lin = g.linear(h, w, b);
    if (!g.val(lin).all_finite())
      throw std::runtime_error("mlp forward: non-finite activations at hidden layer " +
                               std::to_string(i) + " of " + prefix);
    h = g.relu(lin);
    if (train_mode && spec.dropout > 0.0)
      h = g.dropout(h, static_cast<T>(spec.dropout),
                    rng::derive(seed, "drop." + std::to_string(i)));
  }
  std::vector<int> outs;
  outs.reserve(spec.heads.size());
  for (const HeadSpec& hd : spec.heads) {
    const int w = bind_tensor(g, store, binding, head_w(prefix, hd.name));
    const int b = bind_tensor(g, store, binding, head_b(prefix, hd.name));
    int o = g.linear(h, w, b);
    if (!g.val(o).all_finite())
      throw std::runtime_error("mlp forward: non-finite activations at head " + hd.name +
                               " of " + prefix);
    switch (hd.gate) {
      case Gate::kLinear:
        break;
      case Gate::kSigmoid:
        o = g.sigmoid(o);
        break;
      case Gate::kSoftplus:
        o = g.softplus(o);
        break;
    }
    outs.push_back(o);
  }
  return outs;
}

template <typename T>
std::vector<Dense<T>> mlp_apply(const ParamStore<T>& store, const MlpSpec& spec,
                                const std::string& prefix, const Dense<T>& x,
                                bool train_mode, std::uint64_t seed) {
  graph::Graph<T> g;
  Binding<T> binding;
  const int xid = g.value(x);
  const std::vector<int> outs = mlp_forward(g, store, binding, spec, prefix, xid, train_mode, seed);
  std::vector<Dense<T>> vals;
  vals.reserve(outs.size());
  for (int id : outs) vals.push_back(g.val(id));
  return vals;
}

template <typename T>
T bernoulli_loglik(const Dense<T>& mean, const Dense<T>& x) {
  require(x.rows > 0, "bernoulli_loglik: empty batch");
  graph::Graph<T> g;
  const T total = g.scalar(g.bernoulli_ll(g.value(mean), x));
  return total / static_cast<T>(x.rows);
}

template <typename T>
T gaussian_loglik(const Dense<T>& mean, const Dense<T>& var, const Dense<T>& x) {
  require(x.rows > 0, "gaussian_loglik: empty batch");
  graph::Graph<T> g;
  const T total = g.scalar(g.gaussian_ll(g.value(mean), g.value(var), x));
  return total / static_cast<T>(x.rows);
}

template <typename T>
void adam_step(ParamStore<T>& store, const graph::Graph<T>& g, const Binding<T>& binding,
               const AdamConfig& cfg) {
  require(cfg.lr > 0 && cfg.beta1 >= 0 && cfg.beta1 < 1 && cfg.beta2 >= 0 && cfg.beta2 < 1 &&
              cfg.eps > 0 && cfg.weight_decay >= 0,
          "adam_step: bad optimizer configuration");
  ++store.step;
  const double t = static_cast<double>(store.step);
  const T bc1 = static_cast<T>(1.0 - std::pow(cfg.beta1, t));
  const T bc2 = static_cast<T>(1.0 - std::pow(cfg.beta2, t));
  const T lr = static_cast<T>(cfg.lr);
  const T b1 = static_cast<T>(cfg.beta1);
  const T b2 = static_cast<T>(cfg.beta2);
  const T eps = static_cast<T>(cfg.eps);
  const T wd = static_cast<T>(cfg.weight_decay);
  for (const auto& [name, id] : binding.slots) {
    const Dense<T>& grad = g.grad(id);
    if (!grad.all_finite())
      throw std::runtime_error("adam_step: non-finite gradient for " + name);
    typename ParamStore<T>::Entry& e = store.at(name);
    require(grad.same_shape(e.value), "adam_step: gradient shape mismatch for " + name);
    const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(e.value.size());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ii = 0; ii < n; ++ii) {
      const std::size_t i = static_cast<std::size_t>(ii);
      const T geff = grad.v[i] + wd * e.value.v[i];
      e.m1.v[i] = b1 * e.m1.v[i] + (T(1) - b1) * geff;
      e.m2.v[i] = b2 * e.m2.v[i] + (T(1) - b2) * geff * geff;
      const T mhat = e.m1.v[i] / bc1;
      const T vhat = e.m2.v[i] / bc2;
      e.value.v[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

namespace {

template <typename T>
std::vector<double> widen(const Dense<T>& m) {
  return std::vector<double>(m.v.begin(), m.v.end());
}

template <typename T>
Dense<T> narrow(const dataio::TensorContainer::Record& r) {
  require(r.dims.size() == 2, "load_params: tensor record is not rank 2: " + r.name);
  Dense<T> m(r.dims[0], r.dims[1]);
  for (std::size_t i = 0; i < m.size(); ++i) m.v[i] = static_cast<T>(r.data[i]);
  return m;
}

}  // namespace

template <typename T>
void append_params(dataio::TensorContainer& c, const ParamStore<T>& store) {
  const bool wide = sizeof(T) == 8;
  c.add_scalar("step", static_cast<double>(store.step));
  for (const typename ParamStore<T>::Entry& e : store.entries) {
    const std::vector<std::uint32_t> dims{static_cast<std::uint32_t>(e.value.rows),
                                          static_cast<std::uint32_t>(e.value.cols)};
    c.add("value." + e.name, dims, widen(e.value), wide);
    c.add("m1." + e.name, dims, widen(e.m1), wide);
    c.add("m2." + e.name, dims, widen(e.m2), wide);
  }
}

template <typename T>
ParamStore<T> extract_params(const dataio::TensorContainer& c) {
  ParamStore<T> store;
  store.step = static_cast<std::uint64_t>(c.get_scalar("step"));
  for (const dataio::TensorContainer::Record& r : c.records) {
    if (r.name.rfind("value.", 0) != 0) continue;
    const std::string name = r.name.substr(6);
    store.add(name, narrow<T>(r));
    typename ParamStore<T>::Entry& e = store.at(name);
    e.m1 = narrow<T>(c.get("m1." + name));
    e.m2 = narrow<T>(c.get("m2." + name));
    require(e.m1.same_shape(e.value) && e.m2.same_shape(e.value),
            "load_params: moment shape mismatch for " + name);
  }
  return store;
}

template <typename T>
void save_params(const ParamStore<T>& store, const std::string& path) {
  dataio::TensorContainer c;
  append_params(c, store);
  c.save(path);
}

template <typename T>
ParamStore<T> load_params(const std::string& path) {
  return extract_params<T>(dataio::TensorContainer::load(path));
}

template struct ParamStore<float>;
template struct ParamStore<double>;
template struct Binding<float>;
template struct Binding<double>;

template void init_mlp<float>(ParamStore<float>&, const MlpSpec&, const std::string&,
                              std::uint64_t);
template void init_mlp<double>(ParamStore<double>&, const MlpSpec&, const std::string&,
                               std::uint64_t);
template int bind_tensor<float>(graph::Graph<float>&, const ParamStore<float>&, Binding<float>&,
                                const std::string&);
template int bind_tensor<double>(graph::Graph<double>&, const ParamStore<double>&,
                                 Binding<double>&, const std::string&);
template std::vector<int> mlp_forward<float>(graph::Graph<float>&, const ParamStore<float>&,
                                             Binding<float>&, const MlpSpec&, const std::string&,
                                             int, bool, std::uint64_t);
template std::vector<int> mlp_forward<double>(graph::Graph<double>&, const ParamStore<double>&,
                                              Binding<double>&, const MlpSpec&,
                                              const std::string&, int, bool, std::uint64_t);
template std::vector<Dense<float>> mlp_apply<float>(const ParamStore<float>&, const MlpSpec&,
                                                    const std::string&, const Dense<float>&, bool,
                                                    std::uint64_t);
template std::vector<Dense<double>> mlp_apply<double>(const ParamStore<double>&, const MlpSpec&,
                                                      const std::string&, const Dense<double>&,
                                                      bool, std::uint64_t);
template float bernoulli_loglik<float>(const Dense<float>&, const Dense<float>&);
template double bernoulli_loglik<double>(const Dense<double>&, const Dense<double>&);
template float gaussian_loglik<float>(const Dense<float>&, const Dense<float>&,
                                      const Dense<float>&);
template double gaussian_loglik<double>(const Dense<double>&, const Dense<double>&,
                                        const Dense<double>&);
template void adam_step<float>(ParamStore<float>&, const graph::Graph<float>&,
                               const Binding<float>&, const AdamConfig&);
template void adam_step<double>(ParamStore<double>&, const graph::Graph<double>&,
                                const Binding<double>&, const AdamConfig&);
template void append_params<float>(dataio::TensorContainer&, const ParamStore<float>&);
template void append_params<double>(dataio::TensorContainer&, const ParamStore<double>&);
template ParamStore<float> extract_params<float>(const dataio::TensorContainer&);
template ParamStore<double> extract_params<double>(const dataio::TensorContainer&);
template void save_params<float>(const ParamStore<float>&, const std::string&);
template void save_params<double>(const ParamStore<double>&, const std::string&);
template ParamStore<float> load_params<float>(const std::string&);
template ParamStore<double> load_params<double>(const std::string&);

}  // namespace mvcca::nets
