#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pnet/autodiff.hpp"
#include "pnet/rng.hpp"
#include "pnet/tensor.hpp"

namespace pnet {

// Throws std::invalid_argument unless `ratios` is non-empty, non-negative and
// sums to 1 within 1e-9.
void validate_ratios(std::span<const double> ratios, const std::string& what);

// Largest-remainder apportionment of `count` items. Ties on the fractional
// part go to the lower index. The result sums to `count` exactly.
std::vector<std::size_t> largest_remainder(std::size_t count, std::span<const double> ratios);

struct PartitionSpec {
  std::size_t chunks = 1;
  std::vector<double> param_ratios{1.0};
  std::vector<double> chunk_ratios{1.0};

  void validate() const;
};

// One byte per parameter element holding its 1-based partition index.
struct PartitionAssignment {
  std::size_t chunks = 1;
  std::vector<std::vector<std::uint8_t>> layers;

  std::vector<std::size_t> counts(std::size_t layer) const;  // [0] is partition 1
  std::size_t partition_size(std::size_t j) const;
  std::size_t total() const;
};

// Random weight partitioning: inside every tensor, exactly the
// largest-remainder count of elements gets each index, at random positions.
PartitionAssignment assign_random_weights(std::span<const Shape> layer_shapes,
                                          std::span<const double> param_ratios, Rng& rng);

// Node partitioning. The leading axis of each tensor is its output-unit axis;
// output units are apportioned in order (first n_1 units to partition 1, ...)
// and every element on a unit's slice inherits the unit's index. Weight and
// bias tensors of one layer therefore agree.
PartitionAssignment assign_nodes(std::span<const Shape> layer_shapes, std::span<const double> param_ratios);

struct PartitionedParams {
  std::vector<Tensor> values;
  std::vector<Tensor> defaults;
  PartitionAssignment assignment;

  PartitionedParams() = default;
  PartitionedParams(std::vector<Tensor> values, std::vector<Tensor> defaults, PartitionAssignment assignment);

  std::size_t chunks() const { return assignment.chunks; }
  std::size_t num_tensors() const { return values.size(); }
  std::size_t num_elements() const;
  // 1 where the element belongs to partitions 1..k.
  std::vector<std::uint8_t> level_mask(std::size_t tensor, std::size_t k) const;
  void check_level(std::size_t k) const;
};

// Subnetwork k: element = value where its index <= k, otherwise default.
std::vector<Tensor> materialize(const PartitionedParams& params, std::size_t k);

struct MaterializedParams {
  std::vector<Var> values;     // leaves for params.values
  std::vector<Var> effective;  // subnetwork-k tensors to feed the model
};

// Tape form of materialize(). With `track_values` the value tensors become
// gradient leaves; gradients then reach only elements with index <= k.
MaterializedParams materialize(Tape& tape, const PartitionedParams& params, std::size_t k, bool track_values);

// Copies of `grads` with every element outside partition j set to exactly 0.
std::vector<Tensor> restrict_gradient(std::vector<Tensor> grads, const PartitionAssignment& assignment, std::size_t j);

// Partitioned affine transform for a subnetwork k: product of the first k
// scales and sum of the first k biases.
std::pair<std::vector<Real>, std::vector<Real>> partitioned_affine_compose(
    std::span<const std::vector<Real>> scales, std::span<const std::vector<Real>> biases, std::size_t k);

// Binary checkpoint, little-endian:
//   "PNET" | u32 version | u32 tensor count |
//   per tensor: u32 rank, u32 extents[rank], f64 values[n], f64 defaults[n], u8 assignment[n]
// The partition count is not stored; it is passed on load and every index is
// validated against it.
inline constexpr std::uint32_t kCheckpointVersion = 1;
void save_checkpoint(std::ostream& out, const PartitionedParams& params);
PartitionedParams load_checkpoint(std::istream& in, std::size_t chunks);
void save_checkpoint(const std::string& path, const PartitionedParams& params);
PartitionedParams load_checkpoint(const std::string& path, std::size_t chunks);

}  // namespace pnet
