#include "mvcca/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "mvcca/kernels.hpp"
#include "mvcca/pcca.hpp"
#include "mvcca/rng.hpp"

namespace mvcca::dataio {

namespace {

constexpr double kPi = 3.14159265358979323846;

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

std::uint32_t read_u32_be(std::istream& in, const std::string& what) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) fail("truncated " + what);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
         std::uint32_t(b[3]);
}

void write_u32_be(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32_le(std::istream& in, const std::string& what) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) fail("truncated " + what);
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
         (std::uint32_t(b[3]) << 24);
}

void write_u32_le(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::size_t square_side(std::size_t cols) {
  const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(cols))));
  require(side * side == cols, "image rows are not square");
  return side;
}

// 5x7 digit glyphs, one byte per row, bit 4 = leftmost column.
constexpr unsigned char kGlyphs[10][7] = {
    {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}, {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E},
    {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}, {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E},
    {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}, {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E},
    {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}, {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08},
    {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}, {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}};

double glyph_at(int digit, int r, int c) {
  if (r < 0 || r >= 7 || c < 0 || c >= 5) return 0.0;
  return (kGlyphs[digit][r] >> (4 - c)) & 1 ? 1.0 : 0.0;
}

double glyph_bilinear(int digit, double r, double c) {
  const int r0 = static_cast<int>(std::floor(r)), c0 = static_cast<int>(std::floor(c));
  const double fr = r - r0, fc = c - c0;
  return glyph_at(digit, r0, c0) * (1 - fr) * (1 - fc) + glyph_at(digit, r0, c0 + 1) * (1 - fr) * fc +
         glyph_at(digit, r0 + 1, c0) * fr * (1 - fc) + glyph_at(digit, r0 + 1, c0 + 1) * fr * fc;
}

}  // namespace

void MultiViewBatch::validate() const {
  require(!views.empty(), "batch has no views");
  for (const auto& v : views) {
    require(v.rows == views.front().rows, "batch views disagree on row count");
    require(v.all_finite(), "batch contains non-finite values");
  }
  if (!labels.empty()) require(labels.size() == n(), "label count differs from row count");
}

bool TensorContainer::has(const std::string& name) const {
  for (const auto& r : records)
    if (r.name == name) return true;
  return false;
}

const TensorContainer::Record& TensorContainer::get(const std::string& name) const {
  for (const auto& r : records)
    if (r.name == name) return r;
  throw std::out_of_range("container has no record named '" + name + "'");
}

void TensorContainer::add(const std::string& name, std::vector<std::uint32_t> dims,
                          std::vector<double> data, bool wide) {
  require(!has(name), "duplicate record name '" + name + "'");
  std::size_t want = 1;
  for (auto d : dims) want *= d;
  require(want == data.size(), "record '" + name + "': dims do not match payload size");
  records.push_back({name, std::move(dims), wide, std::move(data)});
}

void TensorContainer::add_mat(const std::string& name, const Mat& m, bool wide) {
  add(name, {static_cast<std::uint32_t>(m.rows), static_cast<std::uint32_t>(m.cols)}, m.v, wide);
}

void TensorContainer::add_vec(const std::string& name, const Vec& v, bool wide) {
  add(name, {static_cast<std::uint32_t>(v.size())}, v, wide);
}

void TensorContainer::add_scalar(const std::string& name, double x) { add(name, {}, {x}); }

Mat TensorContainer::get_mat(const std::string& name) const {
  const Record& r = get(name);
  require(r.dims.size() <= 2, "record '" + name + "' is not rank <= 2");
  Mat m(r.dims.empty() ? 1 : (r.dims.size() == 1 ? 1 : r.dims[0]),
        r.dims.empty() ? 1 : (r.dims.size() == 1 ? r.dims[0] : r.dims[1]));
  m.v = r.data;
  return m;
}

Vec TensorContainer::get_vec(const std::string& name) const { return get(name).data; }

double TensorContainer::get_scalar(const std::string& name) const {
  const Record& r = get(name);
  require(r.data.size() == 1, "record '" + name + "' is not a scalar");
  return r.data[0];
}

void TensorContainer::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("cannot write '" + path + "'");
  out.write("MVT1", 4);
  write_u32_le(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    write_u32_le(out, static_cast<std::uint32_t>(r.name.size()));
    out.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
    out.put(static_cast<char>(r.dims.size()));
    for (auto d : r.dims) write_u32_le(out, d);
    out.put(static_cast<char>(r.wide ? 8 : 4));
    if (r.wide) {
      out.write(reinterpret_cast<const char*>(r.data.data()),
                static_cast<std::streamsize>(r.data.size() * 8));
    } else {
      std::vector<float> f(r.data.begin(), r.data.end());
      out.write(reinterpret_cast<const char*>(f.data()), static_cast<std::streamsize>(f.size() * 4));
    }
  }
  if (!out) fail("write failed for '" + path + "'");
}

TensorContainer TensorContainer::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot read '" + path + "'");
  char magic[4];
  if (!in.read(magic, 4) || std::string(magic, 4) != "MVT1")
    fail("'" + path + "' is not an MVT1 container");
  TensorContainer c;
  const std::uint32_t count = read_u32_le(in, "record count");
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::uint32_t name_len = read_u32_le(in, "name length");
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) fail("truncated record name");
    const int rank = in.get();
    if (rank < 0) fail("truncated rank");
    std::vector<std::uint32_t> dims(static_cast<std::size_t>(rank));
    std::size_t total = 1;
    for (auto& d : dims) {
      d = read_u32_le(in, "dims");
      total *= d;
    }
    const int width = in.get();
    if (width != 4 && width != 8) fail("record '" + name + "': bad float width");
    std::vector<double> data(total);
    if (width == 8) {
      if (!in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(total * 8)))
        fail("truncated payload in '" + name + "'");
    } else {
      std::vector<float> f(total);
      if (!in.read(reinterpret_cast<char*>(f.data()), static_cast<std::streamsize>(total * 4)))
        fail("truncated payload in '" + name + "'");
      std::copy(f.begin(), f.end(), data.begin());
    }
    c.add(name, std::move(dims), std::move(data), width == 8);
  }
  return c;
}

MultiViewBatch load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) fail("cannot read '" + images_path + "'");
  const std::uint32_t magic = read_u32_be(img, "image header");
  if (magic != 0x00000803)
    fail("'" + images_path + "': bad image magic " + std::to_string(magic));
  const std::uint32_t n = read_u32_be(img, "image header");
  const std::uint32_t rows = read_u32_be(img, "image header");
  const std::uint32_t cols = read_u32_be(img, "image header");
  std::vector<unsigned char> pix(static_cast<std::size_t>(n) * rows * cols);
  if (!img.read(reinterpret_cast<char*>(pix.data()), static_cast<std::streamsize>(pix.size())))
    fail("'" + images_path + "': truncated pixel payload");

  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) fail("cannot read '" + labels_path + "'");
  const std::uint32_t lmagic = read_u32_be(lab, "label header");
  if (lmagic != 0x00000801)
    fail("'" + labels_path + "': bad label magic " + std::to_string(lmagic));
  const std::uint32_t ln = read_u32_be(lab, "label header");
  if (ln != n)
    fail("image count " + std::to_string(n) + " does not match label count " + std::to_string(ln));
  std::vector<unsigned char> lbytes(ln);
  if (!lab.read(reinterpret_cast<char*>(lbytes.data()), static_cast<std::streamsize>(ln)))
    fail("'" + labels_path + "': truncated label payload");

  MultiViewBatch b;
  b.views.emplace_back(n, static_cast<std::size_t>(rows) * cols);
  for (std::size_t i = 0; i < pix.size(); ++i) b.views[0].v[i] = pix[i] / 255.0;
  b.labels.assign(lbytes.begin(), lbytes.end());
  return b;
}

void write_idx(const std::string& images_path, const std::string& labels_path,
               const MultiViewBatch& batch) {
  batch.validate();
  require(batch.has_labels(), "write_idx needs labels");
  const Mat& v = batch.views.front();
  const std::size_t side = square_side(v.cols);

  std::ofstream img(images_path, std::ios::binary);
  if (!img) fail("cannot write '" + images_path + "'");
  write_u32_be(img, 0x00000803);
  write_u32_be(img, static_cast<std::uint32_t>(v.rows));
  write_u32_be(img, static_cast<std::uint32_t>(side));
  write_u32_be(img, static_cast<std::uint32_t>(side));
  for (double x : v.v)
    img.put(static_cast<char>(std::lround(std::clamp(x, 0.0, 1.0) * 255.0)));
  if (!img) fail("write failed for '" + images_path + "'");

  std::ofstream lab(labels_path, std::ios::binary);
  if (!lab) fail("cannot write '" + labels_path + "'");
  write_u32_be(lab, 0x00000801);
  write_u32_be(lab, static_cast<std::uint32_t>(batch.labels.size()));
  for (int l : batch.labels) lab.put(static_cast<char>(l));
  if (!lab) fail("write failed for '" + labels_path + "'");
}

Mat rotate_image(const Mat& img, double angle) {
  require(img.rows == img.cols, "rotate_image: square image required");
  require(angle >= -kPi && angle <= kPi, "rotate_image: angle outside [-pi, pi]");
  if (angle == 0.0) return img;
  const std::size_t s = img.rows;
  const double c = std::cos(angle), sn = std::sin(angle);
  const double ctr = (static_cast<double>(s) - 1.0) / 2.0;
  Mat out(s, s);
  for (std::size_t r = 0; r < s; ++r)
    for (std::size_t q = 0; q < s; ++q) {
      const double dy = static_cast<double>(r) - ctr, dx = static_cast<double>(q) - ctr;
      const double sy = c * dy - sn * dx + ctr;
      const double sx = sn * dy + c * dx + ctr;
      const auto r0 = static_cast<std::ptrdiff_t>(std::floor(sy));
      const auto c0 = static_cast<std::ptrdiff_t>(std::floor(sx));
      const double fr = sy - static_cast<double>(r0), fc = sx - static_cast<double>(c0);
      auto at = [&](std::ptrdiff_t i, std::ptrdiff_t j) {
        if (i < 0 || j < 0 || i >= static_cast<std::ptrdiff_t>(s) ||
            j >= static_cast<std::ptrdiff_t>(s))
          return 0.0;
        return img(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
      };
      const double val = at(r0, c0) * (1 - fr) * (1 - fc) + at(r0, c0 + 1) * (1 - fr) * fc +
                         at(r0 + 1, c0) * fr * (1 - fc) + at(r0 + 1, c0 + 1) * fr * fc;
      out(r, q) = std::clamp(val, 0.0, 1.0);
    }
  return out;
}

MultiViewBatch make_two_view(const MultiViewBatch& base, std::uint64_t seed) {
  base.validate();
  require(base.has_labels(), "make_two_view needs labels");
  const Mat& src = base.views.front();
  const std::size_t n = src.rows, dim = src.cols;
  const std::size_t side = square_side(dim);

  std::vector<std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < n; ++i) {
    const int l = base.labels[i];
    require(l >= 0, "make_two_view: negative label");
    if (static_cast<std::size_t>(l) >= by_class.size()) by_class.resize(l + 1);
    by_class[l].push_back(i);
  }
  for (std::size_t i = 0; i < n; ++i)
    require(!by_class[base.labels[i]].empty(),
            "label class " + std::to_string(base.labels[i]) + " has zero members");

  const std::uint64_t sa = rng::derive(seed, "view1.angle");
  const std::uint64_t sp = rng::derive(seed, "view2.partner");
  const std::uint64_t sn = rng::derive(seed, "view2.noise");

  MultiViewBatch out;
  out.views.assign(2, Mat(n, dim));
  out.labels = base.labels;
  const auto rows = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ii = 0; ii < rows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    const double angle = (2.0 * rng::uniform_at(sa, i) - 1.0) * kPi / 4.0;
    Mat im(side, side);
    std::copy(src.row(i), src.row(i) + dim, im.v.begin());
    const Mat rot = rotate_image(im, angle);
    std::copy(rot.v.begin(), rot.v.end(), out.views[0].row(i));

    const auto& cls = by_class[base.labels[i]];
    const auto pick = static_cast<std::size_t>(rng::uniform_at(sp, i) * static_cast<double>(cls.size()));
    const double* partner = src.row(cls[pick]);
    double* dst = out.views[1].row(i);
    for (std::size_t j = 0; j < dim; ++j)
      dst[j] = std::clamp(partner[j] + rng::uniform_at(sn, i * dim + j), 0.0, 1.0);
  }
  return out;
}

MultiViewBatch gen_synthetic(const pcca::LinearPccaModel& model, std::size_t n,
                             std::uint64_t seed) {
  return pcca::sample_generative(model, n, seed);
}

MultiViewBatch gen_synthetic_planted(const pcca::LinearPccaModel& model, std::size_t n,
                                     std::size_t k, double separation, std::uint64_t seed,
                                     Mat* phi_out) {
  model.validate();
  require(k >= 1 && k <= model.d0, "planted clusters need 1 <= k <= d0");
  Mat centroids(k, model.d0);
  for (std::size_t c = 0; c < k; ++c) centroids(c, c) = separation;

  rng::SeqRng lr(rng::derive(seed, "planted.labels"));
  std::vector<int> labels(n);
  for (auto& l : labels) l = static_cast<int>(lr.index_below(k));

  Mat phi(n, model.d0);
  const std::uint64_t sphi = rng::derive(seed, "planted.phi");
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < model.d0; ++j)
      phi(i, j) = centroids(labels[i], j) + rng::normal_at(sphi, i * model.d0 + j);

  MultiViewBatch b = pcca::sample_given_phi(model, phi, rng::derive(seed, "planted.views"));
  b.labels = std::move(labels);
  if (phi_out) *phi_out = std::move(phi);
  return b;
}

MultiViewBatch make_digit_corpus(std::size_t n, std::uint64_t seed) {
  const std::uint64_t sl = rng::derive(seed, "digits.label");
  const std::uint64_t sj = rng::derive(seed, "digits.jitter");
  MultiViewBatch b;
  b.views.emplace_back(n, 784);
  b.labels.resize(n);
  const auto rows = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ii = 0; ii < rows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    const int digit = static_cast<int>(rng::uniform_at(sl, i) * 10.0);
    b.labels[i] = digit;
    const double scale = 2.6 + 0.7 * rng::uniform_at(sj, 4 * i);
    const double off_r = 14.0 - 3.5 * scale + 4.0 * (rng::uniform_at(sj, 4 * i + 1) - 0.5);
    const double off_c = 14.0 - 2.5 * scale + 4.0 * (rng::uniform_at(sj, 4 * i + 2) - 0.5);
    const double intensity = 0.7 + 0.3 * rng::uniform_at(sj, 4 * i + 3);
    double* px = b.views[0].row(i);
    for (int r = 0; r < 28; ++r)
      for (int c = 0; c < 28; ++c) {
        const double gr = (r - off_r) / scale, gc = (c - off_c) / scale;
        px[r * 28 + c] = std::clamp(intensity * glyph_bilinear(digit, gr, gc), 0.0, 1.0);
      }
  }
  return b;
}

MultiViewBatch slice(const MultiViewBatch& b, std::size_t begin, std::size_t end) {
  require(begin <= end && end <= b.n(), "slice: bad range");
  MultiViewBatch out;
  for (const auto& v : b.views) {
    Mat s(end - begin, v.cols);
    std::copy(v.row(begin), v.row(begin) + s.size(), s.v.begin());
    out.views.push_back(std::move(s));
  }
  if (b.has_labels())
    out.labels.assign(b.labels.begin() + static_cast<std::ptrdiff_t>(begin),
                      b.labels.begin() + static_cast<std::ptrdiff_t>(end));
  return out;
}

void save_batch(const std::string& path, const MultiViewBatch& b, bool wide) {
  b.validate();
  TensorContainer c;
  c.add_scalar("views", static_cast<double>(b.views.size()));
  for (std::size_t m = 0; m < b.views.size(); ++m)
    c.add_mat("view." + std::to_string(m), b.views[m], wide);
  if (b.has_labels()) c.add_vec("labels", Vec(b.labels.begin(), b.labels.end()));
  c.save(path);
}

MultiViewBatch load_batch(const std::string& path) {
  const TensorContainer c = TensorContainer::load(path);
  MultiViewBatch b;
  const auto m = static_cast<std::size_t>(c.get_scalar("views"));
  for (std::size_t i = 0; i < m; ++i) b.views.push_back(c.get_mat("view." + std::to_string(i)));
  if (c.has("labels")) {
    const Vec l = c.get_vec("labels");
    b.labels.resize(l.size());
    for (std::size_t i = 0; i < l.size(); ++i) b.labels[i] = static_cast<int>(std::lround(l[i]));
  }
  b.validate();
  return b;
}

}  // namespace mvcca::dataio
