#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mvcca/mat.hpp"

namespace mvcca::pcca {
struct LinearPccaModel;
}

namespace mvcca::dataio {

/// N aligned samples across M views; labels optional (empty = absent).
struct MultiViewBatch {
  std::vector<Mat> views;
  std::vector<int> labels;

  std::size_t n() const { return views.empty() ? 0 : views.front().rows; }
  bool has_labels() const { return !labels.empty(); }
  void validate() const;
};

/// Named-tensor file format "MVT1". Little-endian; per record: u32 name
/// length + UTF-8 name, u8 rank, rank u32 dims, u8 float width (4 or 8),
/// then the payload. Values are held as doubles in memory.
struct TensorContainer {
  struct Record {
    std::string name;
    std::vector<std::uint32_t> dims;
    bool wide = true;  // 8-byte floats on disk
    std::vector<double> data;
  };
  std::vector<Record> records;

  bool has(const std::string& name) const;
  const Record& get(const std::string& name) const;
  void add(const std::string& name, std::vector<std::uint32_t> dims, std::vector<double> data,
           bool wide = true);
  void add_mat(const std::string& name, const Mat& m, bool wide = true);
  void add_vec(const std::string& name, const Vec& v, bool wide = true);
  void add_scalar(const std::string& name, double x);
  Mat get_mat(const std::string& name) const;  // rank 1 -> row vector
  Vec get_vec(const std::string& name) const;
  double get_scalar(const std::string& name) const;

  void save(const std::string& path) const;
  static TensorContainer load(const std::string& path);
};

/// Reads an IDX image/label file pair into a single-view labeled batch,
/// pixels scaled to [0, 1].
MultiViewBatch load_idx(const std::string& images_path, const std::string& labels_path);

/// Writes the first view (rounded to bytes via x·255) and labels in IDX
/// format. Rows must be square images.
void write_idx(const std::string& images_path, const std::string& labels_path,
               const MultiViewBatch& batch);

/// Rotates a square image about its center, bilinear interpolation, zero
/// fill outside, output clamped to [0, 1]. angle in [-pi, pi].
Mat rotate_image(const Mat& img, double angle);

/// Two-view construction: view 1 = per-row random rotation U(-pi/4, pi/4)
/// of the source; view 2 = uniformly chosen same-label image plus U(0,1)
/// pixel noise, truncated to [0, 1].
MultiViewBatch make_two_view(const MultiViewBatch& base, std::uint64_t seed);

/// Unconditional draws from a linear model (no labels).
MultiViewBatch gen_synthetic(const pcca::LinearPccaModel& model, std::size_t n,
                             std::uint64_t seed);

/// Cluster-structured draws: phi means sit at k axis-aligned centroids of
/// norm `separation`, unit within-cluster noise. Labels = centroid index.
MultiViewBatch gen_synthetic_planted(const pcca::LinearPccaModel& model, std::size_t n,
                                     std::size_t k, double separation, std::uint64_t seed,
                                     Mat* phi_out = nullptr);

/// Procedural labeled digit-glyph corpus: 28x28 renderings of the digits
/// 0-9 with random scale, offset, and intensity jitter.
MultiViewBatch make_digit_corpus(std::size_t n, std::uint64_t seed);

/// Rows [begin, end) of every view (and labels when present).
MultiViewBatch slice(const MultiViewBatch& b, std::size_t begin, std::size_t end);

void save_batch(const std::string& path, const MultiViewBatch& b, bool wide = true);
MultiViewBatch load_batch(const std::string& path);

}  // namespace mvcca::dataio
