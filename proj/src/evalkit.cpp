#include "mvcca/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "mvcca/kernels.hpp"
#include "mvcca/numkit.hpp"
#include "mvcca/rng.hpp"

namespace mvcca::evalkit {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

/// Ids remapped to 0..k-1 (by sorted value); k reported through k_out.
std::vector<std::size_t> remap(const std::vector<int>& raw, std::size_t* k_out) {
  std::map<int, std::size_t> ids;
  for (int v : raw) ids.emplace(v, 0);
  std::size_t next = 0;
  for (auto& kv : ids) kv.second = next++;
  std::vector<std::size_t> out;
  out.reserve(raw.size());
  for (int v : raw) out.push_back(ids.at(v));
  *k_out = ids.size();
  return out;
}

struct Contingency {
  std::map<std::pair<std::size_t, std::size_t>, double> joint;
  std::vector<double> row, col;  // marginal counts
  double n = 0.0;
};

Contingency crosstab(const std::vector<int>& labels, const std::vector<int>& assignments) {
  Contingency t;
  std::size_t r = 0, c = 0;
  const auto a = remap(labels, &r), b = remap(assignments, &c);
  t.row.assign(r, 0.0);
  t.col.assign(c, 0.0);
  t.n = static_cast<double>(labels.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    t.joint[{a[i], b[i]}] += 1.0;
    t.row[a[i]] += 1.0;
    t.col[b[i]] += 1.0;
  }
  return t;
}

double pairs(double m) { return 0.5 * m * (m - 1.0); }

/// Minimum-cost perfect matching on a square matrix by the method of
/// potentials, O(s^3). Returns the column matched to each row.
std::vector<std::size_t> hungarian_min(const std::vector<std::vector<double>>& cost) {
  const std::size_t s = cost.size();
  std::vector<double> u(s + 1, 0.0), v(s + 1, 0.0), minv(s + 1, 0.0);
  std::vector<std::size_t> p(s + 1, 0), way(s + 1, 0);
  for (std::size_t i = 1; i <= s; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), kInf);
    std::vector<char> used(s + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = kInf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= s; ++j) {
        if (used[j]) continue;
        const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= s; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> row_to_col(s, 0);
  for (std::size_t j = 1; j <= s; ++j)
    if (p[j] != 0) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

struct LloydRun {
  std::vector<int> assign;
  Mat centroids;
  double inertia = kInf;
};

LloydRun lloyd_once(const Mat& x, std::size_t k, std::uint64_t seed) {
  const std::size_t n = x.rows, d = x.cols;
  rng::SeqRng r(seed);
  Mat c(k, d);

  // k-means++ seeding: each next center drawn with probability
  // proportional to the squared distance to the nearest chosen one.
  {
    std::vector<double> best(n, kInf);
    std::size_t pick = r.index_below(n);
    std::copy(x.row(pick), x.row(pick) + d, c.row(0));
    for (std::size_t j = 1; j < k; ++j) {
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t t = 0; t < d; ++t) {
          const double diff = x(i, t) - c(j - 1, t);
          s += diff * diff;
        }
        best[i] = std::min(best[i], s);
        total += best[i];
      }
      pick = n;
      if (total > 0.0) {
        const double target = r.uniform() * total;
        double cum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          if (best[i] <= 0.0) continue;
          cum += best[i];
          pick = i;
          if (target < cum) break;
        }
      }
      if (pick == n) pick = r.index_below(n);  // every residual is zero
      std::copy(x.row(pick), x.row(pick) + d, c.row(j));
    }
  }

  LloydRun run;
  run.assign.assign(n, -1);
  for (int it = 0; it < 300; ++it) {
    const Mat dist = kernels::pairwise_sqdist(x, c);
    std::vector<int> assign(n);
    std::vector<std::size_t> counts(k, 0);
    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t arg = 0;
      for (std::size_t j = 1; j < k; ++j)
        if (dist(i, j) < dist(i, arg)) arg = j;
      assign[i] = static_cast<int>(arg);
      counts[arg] += 1;
      inertia += dist(i, arg);
    }

    // An emptied cluster restarts at the point farthest from its current
    // centroid; the donor cluster must keep at least one member.
    std::vector<char> taken(n, 0);
    for (std::size_t e = 0; e < k; ++e) {
      if (counts[e] != 0) continue;
      std::size_t far = n;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (taken[i]) continue;
        const auto a = static_cast<std::size_t>(assign[i]);
        if (counts[a] <= 1) continue;
        if (dist(i, a) > far_d) {
          far_d = dist(i, a);
          far = i;
        }
      }
      if (far == n) break;
      taken[far] = 1;
      const auto old = static_cast<std::size_t>(assign[far]);
      counts[old] -= 1;
      inertia -= dist(far, old);
      assign[far] = static_cast<int>(e);
      counts[e] = 1;
      std::copy(x.row(far), x.row(far) + d, c.row(e));
    }

    const bool stable = assign == run.assign;
    const bool small_step = std::isfinite(run.inertia) &&
                            std::abs(run.inertia - inertia) <= 1e-7 * std::max(inertia, 1e-300);
    run.assign = std::move(assign);
    run.inertia = inertia;
    if (stable || small_step) break;

    c = Mat(k, d);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t t = 0; t < d; ++t) c(static_cast<std::size_t>(run.assign[i]), t) += x(i, t);
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t t = 0; t < d; ++t) c(j, t) /= static_cast<double>(counts[j]);
  }
  run.centroids = std::move(c);
  return run;
}

}  // namespace

void ClusteringResult::validate() const {
  require(k >= 1, "ClusteringResult: k must be positive");
  require(!assignments.empty(), "ClusteringResult: empty assignments");
  require(centroids.rows == k, "ClusteringResult: centroid count differs from k");
  for (int a : assignments)
    require(a >= 0 && static_cast<std::size_t>(a) < k, "ClusteringResult: assignment out of range");
  require(std::isfinite(inertia) && inertia >= 0.0, "ClusteringResult: bad inertia");
}

ClusteringResult kmeans(const Mat& points, std::size_t k, std::uint64_t seed,
                        std::size_t restarts) {
  require(k >= 1 && k <= points.rows, "kmeans: need 1 <= k <= point count");
  require(points.cols >= 1, "kmeans: points need at least one column");
  require(restarts >= 1, "kmeans: need at least one restart");
  LloydRun best;
  for (std::size_t rs = 0; rs < restarts; ++rs) {
    LloydRun run = lloyd_once(points, k, rng::derive(seed, "restart." + std::to_string(rs)));
    if (run.inertia < best.inertia || best.assign.empty()) best = std::move(run);
  }
  return ClusteringResult{std::move(best.assign), std::move(best.centroids), best.inertia, k};
}

ClusteringResult spectral_cluster(const Mat& points, std::size_t k, std::size_t knn,
                                  std::uint64_t seed) {
  const std::size_t n = points.rows;
  require(k >= 1 && k <= n, "spectral_cluster: need 1 <= k <= point count");
  require(knn >= 1 && knn + 1 <= n, "spectral_cluster: need 1 <= knn < point count");
  if (n > kSpectralCap) {
    std::fprintf(stderr, "spectral_cluster: %zu points exceed the dense cap %zu, falling back to kmeans\n",
                 n, kSpectralCap);
    return kmeans(points, k, rng::derive(seed, "spectral.kmeans"));
  }

  const Mat d2 = kernels::pairwise_sqdist(points, points);
  std::vector<char> adj(n * n, 0);
  std::vector<std::pair<double, std::size_t>> cand(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t m = 0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) cand[m++] = {d2(i, j), j};
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(knn), cand.end());
    for (std::size_t t = 0; t < knn; ++t) adj[i * n + cand[t].second] = 1;
  }

  Vec deg(n, 0.0);
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (adj[i * n + j] || adj[j * n + i]) {
        edges.push_back({i, j});
        deg[i] += 1.0;
        deg[j] += 1.0;
      }

  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&parent](std::size_t v) {
    while (parent[v] != v) {
      parent[v] = parent[parent[v]];
      v = parent[v];
    }
    return v;
  };
  for (const auto& [i, j] : edges) parent[find(i)] = find(j);
  std::size_t components = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (find(i) == i) ++components;
  if (components > 1)
    std::fprintf(stderr, "spectral_cluster: neighbor graph has %zu components\n", components);

  Mat lap = Mat::eye(n);
  for (const auto& [i, j] : edges) {
    const double w = -1.0 / std::sqrt(deg[i] * deg[j]);
    lap(i, j) = lap(j, i) = w;
  }
  const auto eig = numkit::sym_eig(lap);

  // Bottom-k eigenvectors (values come out descending), rows renormalized
  // to the unit sphere so component indicators become point masses.
  Mat u(n, k);
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t i = 0; i < n; ++i) u(i, c) = eig.vectors(i, n - 1 - c);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < k; ++c) s += u(i, c) * u(i, c);
    if (s > 0.0) {
      const double inv = 1.0 / std::sqrt(s);
      for (std::size_t c = 0; c < k; ++c) u(i, c) *= inv;
    }
  }
  return kmeans(u, k, rng::derive(seed, "spectral.kmeans"));
}

double nmi(const std::vector<int>& labels, const std::vector<int>& assignments) {
  require(!labels.empty(), "nmi: empty input");
  require(labels.size() == assignments.size(), "nmi: length mismatch");
  const Contingency t = crosstab(labels, assignments);
  if (t.row.size() == 1 && t.col.size() == 1) return 1.0;  // identical one-block partitions
  double hr = 0.0, hc = 0.0, mi = 0.0;
  for (double m : t.row) hr -= m / t.n * std::log(m / t.n);
  for (double m : t.col) hc -= m / t.n * std::log(m / t.n);
  for (const auto& kv : t.joint) {
    const double m = kv.second;
    mi += m / t.n * std::log(m * t.n / (t.row[kv.first.first] * t.col[kv.first.second]));
  }
  const double denom = 0.5 * (hr + hc);
  if (denom <= 0.0) return 0.0;
  return std::clamp(mi / denom, 0.0, 1.0);
}

double acc(const std::vector<int>& labels, const std::vector<int>& assignments) {
  require(!labels.empty(), "acc: empty input");
  require(labels.size() == assignments.size(), "acc: length mismatch");
  std::size_t r = 0, c = 0;
  const auto a = remap(labels, &r), b = remap(assignments, &c);
  const std::size_t s = std::max(r, c);
  std::vector<std::vector<double>> cost(s, std::vector<double>(s, 0.0));
  for (std::size_t i = 0; i < a.size(); ++i) cost[a[i]][b[i]] -= 1.0;
  const auto match = hungarian_min(cost);
  double hit = 0.0;
  for (std::size_t i = 0; i < s; ++i) hit -= cost[i][match[i]];
  return hit / static_cast<double>(labels.size());
}

double ari(const std::vector<int>& labels, const std::vector<int>& assignments) {
  require(!labels.empty(), "ari: empty input");
  require(labels.size() == assignments.size(), "ari: length mismatch");
  const Contingency t = crosstab(labels, assignments);
  double sij = 0.0, sa = 0.0, sb = 0.0;
  for (const auto& kv : t.joint) sij += pairs(kv.second);
  for (double m : t.row) sa += pairs(m);
  for (double m : t.col) sb += pairs(m);
  const double total = pairs(t.n);
  const double expected = total > 0.0 ? sa * sb / total : 0.0;
  const double upper = 0.5 * (sa + sb);
  if (upper == expected) return 1.0;  // both partitions trivially identical in structure
  return (sij - expected) / (upper - expected);
}

std::vector<int> knn_classify(const Mat& train, const std::vector<int>& train_labels,
                              const Mat& test, std::size_t k) {
  require(train.rows > 0, "knn_classify: empty train set");
  require(train_labels.size() == train.rows, "knn_classify: one label per train row");
  require(test.cols == train.cols, "knn_classify: dimension mismatch");
  require(k >= 1 && k % 2 == 1, "knn_classify: k must be odd");
  require(k <= train.rows, "knn_classify: k larger than the train set");

  std::vector<int> pred(test.rows, 0);
  std::vector<std::pair<double, std::size_t>> cand(train.rows);
  const std::size_t chunk = 256;  // bounds the distance block
  for (std::size_t begin = 0; begin < test.rows; begin += chunk) {
    const std::size_t end = std::min(test.rows, begin + chunk);
    Mat block(end - begin, test.cols);
    for (std::size_t i = begin; i < end; ++i)
      std::copy(test.row(i), test.row(i) + test.cols, block.row(i - begin));
    const Mat dist = kernels::pairwise_sqdist(block, train);
    for (std::size_t i = 0; i < end - begin; ++i) {
      for (std::size_t j = 0; j < train.rows; ++j) cand[j] = {dist(i, j), j};
      std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end());
      std::map<int, std::size_t> votes;
      for (std::size_t j = 0; j < k; ++j) votes[train_labels[cand[j].second]] += 1;
      std::size_t top = 0;
      for (const auto& kv : votes) top = std::max(top, kv.second);
      for (std::size_t j = 0; j < k; ++j) {  // ties resolve to the nearest tied label
        const int lab = train_labels[cand[j].second];
        if (votes.at(lab) == top) {
          pred[begin + i] = lab;
          break;
        }
      }
    }
  }
  return pred;
}

std::string metric_report(const std::vector<std::pair<std::string, double>>& metrics) {
  std::string out;
  char buf[64];
  for (const auto& [name, value] : metrics) {
    std::snprintf(buf, sizeof buf, "%.9g", value);
    out += name;
    out += '=';
    out += buf;
    out += '\n';
  }
  return out;
}

}  // namespace mvcca::evalkit
