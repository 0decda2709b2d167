#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mvcca/dataio.hpp"
#include "mvcca/graph.hpp"
#include "mvcca/mat.hpp"

namespace mvcca::nets {

enum class Gate { kLinear, kSigmoid, kSoftplus };

struct HeadSpec {
  std::string name;
  std::size_t width = 0;
  Gate gate = Gate::kLinear;
};

/// Fully connected net: a ReLU hidden stack and one or more gated output
/// heads read from the last hidden activation (from the input directly when
/// `hidden` is empty). Dropout applies to hidden activations only.
struct MlpSpec {
  std::size_t in_dim = 0;
  std::vector<std::size_t> hidden;
  std::vector<HeadSpec> heads;
  double dropout = 0.0;

  void validate() const;
  std::size_t head_index(const std::string& name) const;
};

/// Named parameter tensors plus their Adam moment accumulators. `step` is
/// the shared update counter (the Adam t).
template <typename T>
struct ParamStore {
  struct Entry {
    std::string name;
    Dense<T> value;
    Dense<T> m1;
    Dense<T> m2;
  };

  std::vector<Entry> entries;
  std::uint64_t step = 0;

  bool has(const std::string& name) const;
  Entry& at(const std::string& name);
  const Entry& at(const std::string& name) const;
  void add(const std::string& name, Dense<T> value);
};

/// Store tensors bound into a graph as leaf nodes, in binding order. The
/// order is the gradient-application order, fixed per step assembly.
template <typename T>
struct Binding {
  std::vector<std::pair<std::string, int>> slots;

  int node(const std::string& name) const;
  bool bound(const std::string& name) const;
};

/// Creates `<prefix>.layer<i>.{w,b}` and `<prefix>.head.<name>.{w,b}`.
/// Weights are uniform on +-sqrt(6 / (fan_in + fan_out)), biases zero;
/// each tensor draws from its own derived stream.
template <typename T>
void init_mlp(ParamStore<T>& store, const MlpSpec& spec, const std::string& prefix,
              std::uint64_t seed);

/// Leaf node for one store tensor; repeated binds return the same node.
template <typename T>
int bind_tensor(graph::Graph<T>& g, const ParamStore<T>& store, Binding<T>& binding,
                const std::string& name);

/// Forward pass, returning head output node ids in spec order. Dropout
/// masks are drawn only when train_mode, from derive(seed, "drop.<i>").
/// Non-finite activations fail with the offending layer named.
template <typename T>
std::vector<int> mlp_forward(graph::Graph<T>& g, const ParamStore<T>& store,
                             Binding<T>& binding, const MlpSpec& spec,
                             const std::string& prefix, int x, bool train_mode,
                             std::uint64_t seed);

/// One-shot forward through a private graph; returns head values.
template <typename T>
std::vector<Dense<T>> mlp_apply(const ParamStore<T>& store, const MlpSpec& spec,
                                const std::string& prefix, const Dense<T>& x,
                                bool train_mode, std::uint64_t seed);

/// Mean over rows of the summed per-element Bernoulli log-likelihood,
/// means clamped to [1e-6, 1-1e-6]. x must lie in [0, 1].
template <typename T>
T bernoulli_loglik(const Dense<T>& mean, const Dense<T>& x);

/// Mean over rows of the summed per-element Gaussian log-density, variances
/// floored at 1e-6.
template <typename T>
T gaussian_loglik(const Dense<T>& mean, const Dense<T>& var, const Dense<T>& x);

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

/// One bias-corrected Adam update over every bound tensor, reading
/// gradients from the swept graph. Weight decay enters as an additive
/// decay*value term on the gradient. Advances store.step by one. A
/// non-finite gradient fails with the tensor named.
template <typename T>
void adam_step(ParamStore<T>& store, const graph::Graph<T>& g, const Binding<T>& binding,
               const AdamConfig& cfg);

/// Checkpoint I/O in the tensor container format: per tensor a value record
/// plus both moment records, and the shared step counter. The container
/// forms let callers pack parameters alongside their own records.
template <typename T>
void append_params(dataio::TensorContainer& c, const ParamStore<T>& store);
template <typename T>
ParamStore<T> extract_params(const dataio::TensorContainer& c);
template <typename T>
void save_params(const ParamStore<T>& store, const std::string& path);
template <typename T>
ParamStore<T> load_params(const std::string& path);

}  // namespace mvcca::nets
