#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "mvcca/mat.hpp"

namespace mvcca::mvlayer {

inline constexpr double kPsiMin = 1e-6;
inline constexpr double kVarMin = 1e-6;
inline constexpr double kPMin = 1e-4;

/// Per-sample posterior moments produced by the encoders: view means,
/// diagonal view variances, and shared-coordinate correlations.
struct PosteriorMoments {
  std::vector<Vec> mu;
  std::vector<Vec> var;
  Vec p;
  void validate() const;
};

/// Linear-layer parameters built from the moments. Loadings are diagonal
/// on the leading d0 coordinates, so only the d0 scalars are stored.
struct MvLayerParams {
  std::vector<Vec> w_diag;
  std::vector<Vec> psi_diag;
  std::vector<Vec> mu_eps;
  Vec mu0;
  double lambda0 = 1.0;
  Vec lambda;
  std::size_t views() const { return w_diag.size(); }
  std::size_t d0() const { return mu0.size(); }
};

struct LatentDraw {
  Mat phi;               // n x d0
  std::vector<Mat> eps;  // n x d_m
  std::vector<Mat> z;    // n x d_m, z = phi W^T + eps by construction
};

enum class Mu0Mode { kMultimodal, kPrimary };

// Scalar cores shared with the training graph, so the reported KL values
// and the differentiated ones cannot drift apart.
template <typename T>
T kl_phi_core(const T* mu0, std::size_t d0, T lambda0) {
  T sq = T(0);
  for (std::size_t i = 0; i < d0; ++i) sq += mu0[i] * mu0[i];
  return T(0.5) * lambda0 * sq +
         T(0.5) * static_cast<T>(d0) * (lambda0 - std::log(lambda0) - T(1));
}

template <typename T>
T kl_eps_core(const T* mu_eps, const T* psi, std::size_t d, T lambda) {
  T acc = T(0);
  for (std::size_t i = 0; i < d; ++i) {
    const T lp = lambda * psi[i];
    acc += lambda * mu_eps[i] * mu_eps[i] + lp - std::log(lp) - T(1);
  }
  return T(0.5) * acc;
}

/// Floors variances, clamps correlations, builds diagonal loadings
/// w_mi = sigma_mi sqrt(p_i), psi, mu0 (per mode), and mu_eps.
MvLayerParams build_params(const PosteriorMoments& m, double lambda0, const Vec& lambda,
                           Mu0Mode mode);

/// Ridge-regularized least-squares minimizer over all views; elementwise
/// for diagonal loadings.
Vec solve_mu0_multimodal(const PosteriorMoments& m, const MvLayerParams& params);

/// Primary-view-only minimizer.
Vec solve_mu0_primary(const PosteriorMoments& m, const MvLayerParams& params);

double kl_phi(const Vec& mu0, double lambda0);
double kl_eps(const Vec& mu_eps, const Vec& psi_diag, double lambda);

/// Reparameterized draws: phi = mu0 + xi0, eps = mu_eps + sqrt(psi) xi,
/// z = phi W^T + eps. Deterministic per seed.
LatentDraw sample_latents(const MvLayerParams& params, std::size_t n, std::uint64_t seed);

}  // namespace mvcca::mvlayer
