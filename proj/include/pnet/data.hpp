#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pnet/rng.hpp"
#include "pnet/tensor.hpp"

namespace pnet {

struct TabularDataset {
  Tensor features;  // [n, d]
  std::vector<int> labels;
  std::size_t classes = 2;

  std::size_t size() const { return labels.size(); }
  void validate() const;
};

struct ImageDataset {
  Tensor images;  // [n, H*W], pixels in [0, 1]
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<int> labels;
  std::size_t classes = 10;
  std::vector<Real> angles;  // per example, only for rotated variants

  std::size_t size() const { return labels.size(); }
  bool rotated() const { return !angles.empty(); }
  void validate() const;
  TabularDataset as_tabular() const { return {images, labels, classes}; }
};

// y ~ Bern(1/2); x_i = y + e_i for i < informative, x_i = e_i otherwise, e ~ N(0, 1).
TabularDataset gen_input_selection(std::size_t n, Rng& rng, std::size_t dim = 30, std::size_t informative = 15);

// Synthetic 10-class line-art images (ring, plus, cross, bars, outlines, ...)
// with random stroke width, scale, offset and slight tilt. Some classes are
// rotations of each other, so rotation invariance is not free on upright data.
ImageDataset gen_glyphs(std::size_t n, Rng& rng, std::size_t size = 16);

// IDX container: big-endian u32 magic, big-endian u32 extents, then u8 payload.
inline constexpr std::uint32_t kIdxLabels = 0x00000801;
inline constexpr std::uint32_t kIdxImages = 0x00000803;

struct IdxFile {
  std::uint32_t magic = kIdxImages;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> payload;
};

class IdxError : public std::runtime_error {
 public:
  enum class Code { kShortHeader, kUnsupportedMagic, kExtentOverflow, kTruncated, kTrailingBytes, kMismatch };
  IdxError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Code code() const { return code_; }

 private:
  Code code_;
};

IdxFile parse_idx(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> serialize_idx(const IdxFile& file);
IdxFile read_idx(const std::string& path);
// Pixels scaled by 1/255.
ImageDataset idx_to_images(const IdxFile& images, const IdxFile& labels);

// Rotates every image once by an angle ~ U[-pi, pi] and stores the angle.
ImageDataset rotate_fixed(const ImageDataset& data, Rng& rng);
ImageDataset rotate_by(const ImageDataset& data, std::span<const Real> angles);

// Training data laid out chunk by chunk: chunk k holds rows
// [offsets[k-1], offsets[k]). The prefix D_{1:k} is rows [0, offsets[k]).
struct ChunkedDataset {
  Tensor features;
  std::vector<int> labels;
  std::vector<std::size_t> offsets;  // C + 1 entries, offsets[0] = 0
  std::size_t classes = 2;

  std::size_t chunks() const { return offsets.size() - 1; }
  std::size_t size() const { return labels.size(); }
  std::size_t chunk_size(std::size_t k) const { return offsets.at(k) - offsets.at(k - 1); }
  std::size_t prefix_size(std::size_t k) const { return offsets.at(k); }
  std::size_t dim() const { return features.cols(); }
};

// Shuffles (optionally), then allocates rows to chunks by largest remainder in
// ratio order. Throws if any chunk would be empty.
ChunkedDataset chunk_split(const TabularDataset& data, std::span<const double> ratios, Rng& rng, bool shuffle = true);

// Rows `rows` of a feature matrix and the matching labels.
Tensor gather(const Tensor& features, std::span<const std::size_t> rows);

}  // namespace pnet
