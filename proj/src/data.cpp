#include "pnet/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <limits>
#include <numbers>

#include "pnet/hyper.hpp"
#include "pnet/partition.hpp"

namespace pnet {

void TabularDataset::validate() const {
  if (features.rank() != 2 || features.rows() != labels.size())
    throw std::invalid_argument("dataset: " + std::to_string(labels.size()) + " labels for features " +
                                shape_str(features.shape()));
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= classes) throw std::invalid_argument("dataset: label out of range");
}

void ImageDataset::validate() const {
  as_tabular().validate();
  if (images.cols() != height * width) throw std::invalid_argument("image dataset: pixel count != H*W");
  if (!angles.empty() && angles.size() != labels.size())
    throw std::invalid_argument("image dataset: need one angle per example");
  for (Real v : images.values())
    if (!(v >= Real(0) && v <= Real(1))) throw std::invalid_argument("image dataset: pixel outside [0, 1]");
}

TabularDataset gen_input_selection(std::size_t n, Rng& rng, std::size_t dim, std::size_t informative) {
  if (n == 0) throw std::invalid_argument("gen_input_selection: n must be >= 1");
  if (informative > dim) throw std::invalid_argument("gen_input_selection: more informative features than features");
  TabularDataset d;
  d.features = Tensor({n, dim});
  d.labels.resize(n);
  d.classes = 2;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = rng.uniform() < 0.5 ? 1 : 0;
    d.labels[i] = y;
    for (std::size_t j = 0; j < dim; ++j)
      d.features[i * dim + j] = static_cast<Real>((j < informative ? y : 0) + rng.normal());
  }
  return d;
}

namespace {

struct Pt {
  double x, y;
};

double seg_dist(Pt p, Pt a, Pt b) {
  const double vx = b.x - a.x, vy = b.y - a.y;
  const double t = std::clamp(((p.x - a.x) * vx + (p.y - a.y) * vy) / (vx * vx + vy * vy), 0.0, 1.0);
  return std::hypot(p.x - a.x - t * vx, p.y - a.y - t * vy);
}

double polyline_dist(Pt p, std::initializer_list<Pt> pts, bool closed) {
  double d = std::numeric_limits<double>::infinity();
  const Pt* v = pts.begin();
  const std::size_t n = pts.size();
  for (std::size_t i = 0; i + 1 < n; ++i) d = std::min(d, seg_dist(p, v[i], v[i + 1]));
  if (closed) d = std::min(d, seg_dist(p, v[n - 1], v[0]));
  return d;
}

// Distance to an arc of radius r spanning angles outside (-gap, gap).
double arc_dist(Pt p, double r, double gap) {
  const double a = std::atan2(p.y, p.x);
  if (std::abs(a) >= gap) return std::abs(std::hypot(p.x, p.y) - r);
  const Pt e1{r * std::cos(gap), r * std::sin(gap)}, e2{r * std::cos(gap), -r * std::sin(gap)};
  return std::min(std::hypot(p.x - e1.x, p.y - e1.y), std::hypot(p.x - e2.x, p.y - e2.y));
}

double glyph_dist(int cls, Pt p) {
  switch (cls) {
    case 0:
      return std::abs(std::hypot(p.x, p.y) - 0.55);
    case 1:
      return std::min(seg_dist(p, {-0.6, 0}, {0.6, 0}), seg_dist(p, {0, -0.6}, {0, 0.6}));
    case 2: {
      const double c = 0.6 / std::numbers::sqrt2;
      return std::min(seg_dist(p, {-c, -c}, {c, c}), seg_dist(p, {-c, c}, {c, -c}));
    }
    case 3:
      return seg_dist(p, {-0.6, 0}, {0.6, 0});
    case 4:
      return seg_dist(p, {0, -0.6}, {0, 0.6});
    case 5: {
      const double r = 0.6;
      const double s = std::sin(std::numbers::pi / 6) * r, c = std::cos(std::numbers::pi / 6) * r;
      return polyline_dist(p, {{0, -r}, {c, s}, {-c, s}}, true);
    }
    case 6:
      return polyline_dist(p, {{-0.48, -0.48}, {0.48, -0.48}, {0.48, 0.48}, {-0.48, 0.48}}, true);
    case 7:
      return polyline_dist(p, {{-0.4, -0.6}, {-0.4, 0.5}, {0.45, 0.5}}, false);
    case 8:
      return std::min(seg_dist(p, {-0.55, -0.5}, {0.55, -0.5}), seg_dist(p, {0, -0.5}, {0, 0.6}));
    default:
      return arc_dist(p, 0.5, 0.8);
  }
}

}  // namespace

ImageDataset gen_glyphs(std::size_t n, Rng& rng, std::size_t size) {
  if (size < 4) throw std::invalid_argument("gen_glyphs: image size must be >= 4");
  ImageDataset d;
  d.height = d.width = size;
  d.classes = 10;
  d.images = Tensor({n, size * size});
  d.labels.resize(n);
  const double c = (static_cast<double>(size) - 1.0) / 2.0;
  const double px = 1.0 / c;  // one pixel in normalized units
  for (std::size_t e = 0; e < n; ++e) {
    const int cls = static_cast<int>(rng.below(10));
    d.labels[e] = cls;
    const double scale = rng.uniform(0.8, 1.15);
    const double tilt = rng.uniform(-0.12, 0.12);
    const double ox = rng.uniform(-0.12, 0.12), oy = rng.uniform(-0.12, 0.12);
    const double half = rng.uniform(0.5, 0.85) * px;
    const double ct = std::cos(tilt), st = std::sin(tilt);
    Real* img = d.images.data() + e * size * size;
    for (std::size_t i = 0; i < size; ++i)
      for (std::size_t j = 0; j < size; ++j) {
        const double x = (static_cast<double>(j) - c) / c - ox, y = (static_cast<double>(i) - c) / c - oy;
        const Pt q{(ct * x + st * y) / scale, (-st * x + ct * y) / scale};
        const double dist = glyph_dist(cls, q) * scale;
        const double v = std::clamp((half + 0.5 * px - dist) / px, 0.0, 1.0);
        img[i * size + j] = static_cast<Real>(std::clamp(v + 0.05 * rng.normal(), 0.0, 1.0));
      }
  }
  return d;
}

namespace {

std::uint32_t read_be32(std::span<const std::uint8_t> b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

void write_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

std::size_t idx_rank(std::uint32_t magic) {
  if (magic == kIdxLabels) return 1;
  if (magic == kIdxImages) return 3;
  char buf[16];
  std::snprintf(buf, sizeof buf, "0x%08x", magic);
  throw IdxError(IdxError::Code::kUnsupportedMagic, std::string("idx: unsupported magic ") + buf);
}

std::size_t checked_product(std::span<const std::uint32_t> dims) {
  std::size_t total = 1;
  for (std::uint32_t d : dims) {
    if (d != 0 && total > std::numeric_limits<std::size_t>::max() / d)
      throw IdxError(IdxError::Code::kExtentOverflow, "idx: extent overflow");
    total *= d;
  }
  // Real files are far below this; it guards against absurd allocations.
  if (total > (std::size_t{1} << 34)) throw IdxError(IdxError::Code::kExtentOverflow, "idx: extent overflow");
  return total;
}

}  // namespace

IdxFile parse_idx(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw IdxError(IdxError::Code::kShortHeader, "idx: short header");
  IdxFile f;
  f.magic = read_be32(bytes, 0);
  const std::size_t rank = idx_rank(f.magic);
  if (bytes.size() < 4 + 4 * rank) throw IdxError(IdxError::Code::kShortHeader, "idx: short header");
  for (std::size_t i = 0; i < rank; ++i) f.dims.push_back(read_be32(bytes, 4 + 4 * i));
  const std::size_t n = checked_product(f.dims);
  const std::size_t start = 4 + 4 * rank;
  if (bytes.size() - start < n)
    throw IdxError(IdxError::Code::kTruncated, "idx: truncated payload (" + std::to_string(bytes.size() - start) +
                                                   " of " + std::to_string(n) + " bytes)");
  if (bytes.size() - start > n) throw IdxError(IdxError::Code::kTrailingBytes, "idx: trailing bytes after payload");
  f.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(start), bytes.end());
  return f;
}

std::vector<std::uint8_t> serialize_idx(const IdxFile& f) {
  if (f.dims.size() != idx_rank(f.magic)) throw IdxError(IdxError::Code::kMismatch, "idx: rank does not match magic");
  if (checked_product(f.dims) != f.payload.size())
    throw IdxError(IdxError::Code::kMismatch, "idx: payload length does not match extents");
  std::vector<std::uint8_t> out;
  write_be32(out, f.magic);
  for (std::uint32_t d : f.dims) write_be32(out, d);
  out.insert(out.end(), f.payload.begin(), f.payload.end());
  return out;
}

IdxFile read_idx(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("idx: cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_idx(bytes);
}

ImageDataset idx_to_images(const IdxFile& images, const IdxFile& labels) {
  if (images.magic != kIdxImages || labels.magic != kIdxLabels)
    throw IdxError(IdxError::Code::kMismatch, "idx: expected an image file and a label file");
  if (images.dims[0] != labels.dims[0])
    throw IdxError(IdxError::Code::kMismatch, "idx: image and label counts differ");
  ImageDataset d;
  const std::size_t n = images.dims[0];
  d.height = images.dims[1];
  d.width = images.dims[2];
  d.images = Tensor({n, d.height * d.width});
  for (std::size_t i = 0; i < images.payload.size(); ++i)
    d.images[i] = static_cast<Real>(images.payload[i]) / Real(255);
  int top = 0;
  for (std::uint8_t y : labels.payload) {
    d.labels.push_back(y);
    top = std::max<int>(top, y);
  }
  d.classes = std::max<std::size_t>(10, static_cast<std::size_t>(top) + 1);
  return d;
}

ImageDataset rotate_by(const ImageDataset& data, std::span<const Real> angles) {
  if (angles.size() != data.size()) throw std::invalid_argument("rotate_by: need one angle per example");
  ImageDataset out = data;
  out.angles.assign(angles.begin(), angles.end());
  const std::size_t hw = data.height * data.width;
  for (std::size_t e = 0; e < data.size(); ++e) {
    std::array<Real, kAffineParams> theta{}, eps{};
    theta[kRotation] = angles[e];
    eps[kRotation] = 1;
    const Affine a = sample_affine(theta, eps);
    Tensor img({hw}, std::vector<Real>(data.images.data() + e * hw, data.images.data() + (e + 1) * hw));
    const Tensor w = bilinear_warp(img, a, data.height, data.width);
    for (std::size_t p = 0; p < hw; ++p) out.images[e * hw + p] = std::clamp(w[p], Real(0), Real(1));
  }
  return out;
}

ImageDataset rotate_fixed(const ImageDataset& data, Rng& rng) {
  std::vector<Real> angles(data.size());
  for (auto& a : angles) a = static_cast<Real>(rng.uniform(-std::numbers::pi, std::numbers::pi));
  return rotate_by(data, angles);
}

Tensor gather(const Tensor& features, std::span<const std::size_t> rows) {
  const std::size_t d = features.cols();
  Tensor out({rows.size(), d});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= features.rows()) throw std::out_of_range("gather: row out of range");
    std::copy_n(features.data() + rows[r] * d, d, out.data() + r * d);
  }
  return out;
}

ChunkedDataset chunk_split(const TabularDataset& data, std::span<const double> ratios, Rng& rng, bool shuffle) {
  data.validate();
  validate_ratios(ratios, "chunk ratios");
  const std::size_t n = data.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  if (shuffle) rng.shuffle(order);
  const auto sizes = largest_remainder(n, ratios);
  ChunkedDataset c;
  c.classes = data.classes;
  c.offsets.push_back(0);
  for (std::size_t k = 0; k < sizes.size(); ++k) {
    if (sizes[k] == 0)
      throw std::invalid_argument("chunk_split: chunk " + std::to_string(k + 1) + " would be empty");
    c.offsets.push_back(c.offsets.back() + sizes[k]);
  }
  c.features = gather(data.features, order);
  for (std::size_t i : order) c.labels.push_back(data.labels[i]);
  return c;
}

}  // namespace pnet
