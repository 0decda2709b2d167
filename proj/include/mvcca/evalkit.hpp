#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mvcca/mat.hpp"

namespace mvcca::evalkit {

/// Largest input the dense spectral path accepts; bigger inputs fall back
/// to plain kmeans with a warning on stderr.
inline constexpr std::size_t kSpectralCap = 4000;

struct ClusteringResult {
  std::vector<int> assignments;  // one id in 0..k-1 per input row
  Mat centroids;                 // k x d cluster centers in the clustered space
  double inertia = 0.0;          // sum of squared point-to-assigned-centroid distances
  std::size_t k = 0;

  void validate() const;
};

/// k-means++ seeding, then Lloyd iterations until the partition is stable
/// or the relative inertia change drops below 1e-7 (300 iterations cap);
/// keeps the best of `restarts` independent starts. An emptied cluster is
/// reseeded from the point farthest from its current centroid.
ClusteringResult kmeans(const Mat& points, std::size_t k, std::uint64_t seed,
                        std::size_t restarts = 8);

/// Symmetrized k-nearest-neighbor adjacency, symmetric normalized
/// Laplacian, bottom-k eigenvectors, row normalization, then kmeans on the
/// spectral coordinates. A disconnected graph proceeds with a warning.
ClusteringResult spectral_cluster(const Mat& points, std::size_t k, std::size_t knn,
                                  std::uint64_t seed);

/// Mutual information normalized by the arithmetic mean of the two
/// entropies. Two one-block partitions score 1; a zero-entropy side
/// against anything else scores 0.
double nmi(const std::vector<int>& labels, const std::vector<int>& assignments);

/// Fraction correct under the best one-to-one matching of cluster ids to
/// labels (Hungarian algorithm on the contingency table).
double acc(const std::vector<int>& labels, const std::vector<int>& assignments);

/// Rand index adjusted for chance under the permutation model.
double ari(const std::vector<int>& labels, const std::vector<int>& assignments);

/// Majority vote over the k nearest train rows (Euclidean, k odd); a vote
/// tie goes to the closest neighbor among the tied labels.
std::vector<int> knn_classify(const Mat& train, const std::vector<int>& train_labels,
                              const Mat& test, std::size_t k);

/// name=value lines, one metric per line, %.9g values.
std::string metric_report(const std::vector<std::pair<std::string, double>>& metrics);

}  // namespace mvcca::evalkit
