#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mvcca/dataio.hpp"
#include "mvcca/mat.hpp"

namespace mvcca::pcca {

/// Classical CCA solution: directions satisfy u_mᵀ Σ_mm u_m = I.
struct CcaSolution {
  Mat u1, u2;  // d_m x d0 canonical directions
  Vec p;       // canonical correlations, descending, clamped to [0, 1]
  Vec mu1, mu2;
  Mat sigma11, sigma22, sigma12;
  int clipped_p = 0;
};

/// Linear generative model: phi ~ N(mu0, I), z_m = W_m phi + eps_m,
/// eps_m ~ N(mu_eps_m, Psi_m).
struct LinearPccaModel {
  std::size_t m_views = 0;
  std::size_t d0 = 0;
  std::vector<Mat> w;
  std::vector<Mat> psi;
  std::vector<Vec> mu_eps;
  Vec mu0;
  Vec p;  // correlations the fit was built from (empty for hand-made models)
  int clipped_p = 0;
  void validate() const;
};

CcaSolution fit_cca(const Mat& x1, const Mat& x2, std::size_t d0);

/// Closed-form ML fit. Gauge: mu0 = 0 and mu_eps_m = sample mean.
LinearPccaModel fit_pcca_ml(const Mat& x1, const Mat& x2, std::size_t d0);

/// Shared-direction fit for M >= 2 views of equal dimension.
LinearPccaModel fit_mv_ml(const std::vector<Mat>& x, std::size_t d0);

/// Conditional draws z_m = W_m phi_i + mu_eps_m + Psi_m^{1/2} xi.
dataio::MultiViewBatch sample_given_phi(const LinearPccaModel& model, const Mat& phi,
                                        std::uint64_t seed);

dataio::MultiViewBatch sample_generative(const LinearPccaModel& model, std::size_t n,
                                         std::uint64_t seed);

/// Mean joint-Gaussian log-density of the concatenated views.
double log_likelihood(const LinearPccaModel& model, const dataio::MultiViewBatch& batch);

void save_model(const std::string& path, const LinearPccaModel& model);
LinearPccaModel load_model(const std::string& path);

}  // namespace mvcca::pcca
