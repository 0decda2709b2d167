#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "mvcca/dataio.hpp"
#include "mvcca/graph.hpp"
#include "mvcca/mat.hpp"
#include "mvcca/mvlayer.hpp"
#include "mvcca/nets.hpp"

namespace mvcca::train {

enum class Likelihood { kBernoulli, kGaussian };
enum class XStar { kPrimary, kConcat };
enum class Baseline { kVpcca, kVcca };
enum class Precision { kFloat32, kFloat64 };

/// Full training recipe. Network input/output widths are derived from the
/// data and the latent sizes; only the hidden stacks are configured here.
struct TrainConfig {
  std::size_t d0 = 0;
  std::vector<std::size_t> d;                        // per-view latent width
  std::vector<std::vector<std::size_t>> enc_hidden;  // per view
  std::vector<std::vector<std::size_t>> dec_hidden;  // per view
  std::vector<std::size_t> f0_hidden;
  std::vector<Likelihood> likelihood;  // per view
  double lambda0 = 1.0;
  std::vector<double> lambda;  // per view
  mvlayer::Mu0Mode mu0_mode = mvlayer::Mu0Mode::kMultimodal;
  XStar x_star = XStar::kPrimary;
  std::size_t mc_samples = 1;
  std::size_t batch = 200;
  double lr = 2e-4;
  std::size_t epochs = 10;
  double dropout = 0.0;
  bool dropout_f0 = true;  // whether the correlation net shares the dropout policy
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  Baseline baseline = Baseline::kVpcca;
  Precision precision = Precision::kFloat32;

  void validate(std::size_t views) const;
};

/// Per-datum averages of the objective parts. `total` is always the exact
/// double expression sum(recon) - kl_phi - sum(kl_eps) over the stored
/// fields.
struct ElboBreakdown {
  std::vector<double> recon;
  double kl_phi = 0.0;
  std::vector<double> kl_eps;
  double total = 0.0;
};

/// One assembled objective: the tape, the parameter binding, and handles to
/// the nodes a caller may want to inspect (tests, the embedding oracle) or
/// differentiate (the trainer).
template <typename T>
struct ElboGraph {
  graph::Graph<T> g;
  nets::Binding<T> binding;
  int root = -1;  // per-datum-averaged objective, the backward target
  int mu0 = -1;   // n x d0 shared means
  int p = -1;     // n x d0 clamped correlations (-1 for the vcca baseline)
  std::vector<int> w;        // n x d0 diagonal loadings
  std::vector<int> psi;      // n x d_m view noise variances
  std::vector<int> mu_eps;   // n x d_m view noise means
  std::vector<int> recon_sum;  // per-view log-likelihood sums (MC-averaged)
  int kl_phi_sum = -1;
  std::vector<int> kl_eps_sum;

  ElboBreakdown breakdown(std::size_t n) const;
};

/// Network shapes implied by the config and the observed widths.
nets::MlpSpec encoder_spec(const TrainConfig& cfg, std::size_t view, std::size_t x_dim);
nets::MlpSpec decoder_spec(const TrainConfig& cfg, std::size_t view, std::size_t x_dim);
nets::MlpSpec f0_spec(const TrainConfig& cfg, const std::vector<std::size_t>& x_dim);

/// Fresh parameter tensors for every network, prefixes enc<m>/dec<m>/f0,
/// each drawn from a stream derived from cfg.seed and the prefix.
template <typename T>
void init_model_params(nets::ParamStore<T>& store, const TrainConfig& cfg,
                       const std::vector<std::size_t>& x_dim);

/// Assembles the variational objective over a batch: encoders, the shared
/// linear layer, `mc_samples` reparameterized draws through the decoders,
/// and the closed-form KL terms. Non-finite parts fail with the component
/// named. Gradients come from eg.g.backward(eg.root).
template <typename T>
void build_elbo(ElboGraph<T>& eg, const std::vector<Dense<T>>& views,
                const nets::ParamStore<T>& store, const TrainConfig& cfg, std::uint64_t seed,
                bool train_mode);

/// Evaluation-mode objective on a labeled-or-not batch, in doubles.
ElboBreakdown elbo(const dataio::MultiViewBatch& batch, const nets::ParamStore<double>& params,
                   const TrainConfig& cfg, std::uint64_t seed);

/// A trained model: the recipe, the observed view widths, and the
/// parameters (held in doubles regardless of training precision).
struct VpccaModel {
  TrainConfig cfg;
  std::vector<std::size_t> x_dim;
  nets::ParamStore<double> params;
};

struct TrainResult {
  VpccaModel model;  // parameters at the best validation epoch
  std::vector<std::string> log_lines;
  std::vector<ElboBreakdown> train_history;
  std::vector<ElboBreakdown> val_history;
  double best_val_elbo = -std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;  // 1-based; 0 when no epoch finished
  bool halted = false;         // stopped early by the divergence rule
};

/// `epoch, split, recon_1..recon_M, kl_phi, kl_eps_1..kl_eps_M, elbo`
/// with nine significant digits per numeric field.
std::string format_log_line(std::size_t epoch, const std::string& split,
                            const ElboBreakdown& bd);

/// Minibatch training with per-epoch seeded shuffling, per-epoch train and
/// validation records, checkpointing at the best validation objective, and
/// a three-strike divergence halt (non-finite or grossly regressed
/// validation objective) that returns the last good checkpoint.
TrainResult train_model(const dataio::MultiViewBatch& train_set,
                        const dataio::MultiViewBatch& valid_set, const TrainConfig& cfg);

/// Shared-representation means, one row per datum. Multimodal mode needs
/// every view; primary mode needs the views feeding f0 plus view 1. A batch
/// may carry either all views or just the primary one; anything else is
/// rejected. Chunked internally, result independent of chunking.
Mat embed(const VpccaModel& model, const dataio::MultiViewBatch& batch, mvlayer::Mu0Mode mode,
          std::vector<mvlayer::PosteriorMoments>* moments_out = nullptr);

void save_model(const VpccaModel& model, const std::string& path);
VpccaModel load_model(const std::string& path);

}  // namespace mvcca::train
