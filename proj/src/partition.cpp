#include "pnet/partition.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <cmath>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace pnet {

void validate_ratios(std::span<const double> ratios, const std::string& what) {
  if (ratios.empty()) throw std::invalid_argument(what + ": ratios must be non-empty");
  double total = 0.0;
  for (double r : ratios) {
    if (!(r >= 0.0) || !std::isfinite(r)) throw std::invalid_argument(what + ": ratios must be non-negative");
    total += r;
  }
  if (std::abs(total - 1.0) > 1e-9)
    throw std::invalid_argument(what + ": ratios sum to " + std::to_string(total) + ", expected 1");
}

std::vector<std::size_t> largest_remainder(std::size_t count, std::span<const double> ratios) {
  const std::size_t c = ratios.size();
  std::vector<std::size_t> out(c, 0);
  if (c == 0) return out;
  std::vector<double> frac(c);
  std::size_t assigned = 0;
  for (std::size_t j = 0; j < c; ++j) {
    const double exact = static_cast<double>(count) * ratios[j];
    // Snap values a rounding error below an integer (10 * 0.7) up to it.
    const double snapped = std::abs(exact - std::round(exact)) < 1e-9 ? std::round(exact) : exact;
    out[j] = static_cast<std::size_t>(std::floor(snapped));
    frac[j] = snapped - std::floor(snapped);
    assigned += out[j];
  }
  std::vector<std::size_t> order(c);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t i = 0; assigned < count; i = (i + 1) % c) {
    ++out[order[i]];
    ++assigned;
  }
  while (assigned > count) {
    // Only reachable through ratios summing slightly above 1.
    auto it = std::max_element(out.begin(), out.end());
    --*it;
    --assigned;
  }
  return out;
}

void PartitionSpec::validate() const {
  if (chunks < 1) throw std::invalid_argument("partition: C must be >= 1");
  if (chunks > 255) throw std::invalid_argument("partition: C must fit in a byte");
  if (param_ratios.size() != chunks || chunk_ratios.size() != chunks)
    throw std::invalid_argument("partition: expected " + std::to_string(chunks) + " param and chunk ratios");
  validate_ratios(param_ratios, "param_ratios");
  validate_ratios(chunk_ratios, "chunk_ratios");
}

std::vector<std::size_t> PartitionAssignment::counts(std::size_t layer) const {
  std::vector<std::size_t> c(chunks, 0);
  for (std::uint8_t v : layers.at(layer)) ++c[v - 1u];
  return c;
}

std::size_t PartitionAssignment::partition_size(std::size_t j) const {
  std::size_t n = 0;
  for (const auto& l : layers) n += static_cast<std::size_t>(std::count(l.begin(), l.end(), static_cast<std::uint8_t>(j)));
  return n;
}

std::size_t PartitionAssignment::total() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.size();
  return n;
}

namespace {

void check_inputs(std::span<const Shape> shapes, std::span<const double> ratios) {
  if (shapes.empty()) throw std::invalid_argument("partition: empty layer list");
  validate_ratios(ratios, "param_ratios");
  if (ratios.size() > 255) throw std::invalid_argument("partition: C must fit in a byte");
}

}  // namespace

PartitionAssignment assign_random_weights(std::span<const Shape> layer_shapes, std::span<const double> param_ratios,
                                          Rng& rng) {
  check_inputs(layer_shapes, param_ratios);
  PartitionAssignment a;
  a.chunks = param_ratios.size();
  for (const Shape& s : layer_shapes) {
    const std::size_t n = shape_numel(s);
    const auto counts = largest_remainder(n, param_ratios);
    std::vector<std::uint8_t> idx;
    idx.reserve(n);
    for (std::size_t j = 0; j < counts.size(); ++j) idx.insert(idx.end(), counts[j], static_cast<std::uint8_t>(j + 1));
    rng.shuffle(idx);
    a.layers.push_back(std::move(idx));
  }
  return a;
}

PartitionAssignment assign_nodes(std::span<const Shape> layer_shapes, std::span<const double> param_ratios) {
  check_inputs(layer_shapes, param_ratios);
  PartitionAssignment a;
  a.chunks = param_ratios.size();
  for (const Shape& s : layer_shapes) {
    if (s.empty()) throw std::invalid_argument("assign_nodes: scalar tensor has no output axis");
    const std::size_t units = s[0];
    const std::size_t per_unit = units ? shape_numel(s) / units : 0;
    const auto counts = largest_remainder(units, param_ratios);
    std::vector<std::uint8_t> idx;
    idx.reserve(shape_numel(s));
    for (std::size_t j = 0; j < counts.size(); ++j)
      idx.insert(idx.end(), counts[j] * per_unit, static_cast<std::uint8_t>(j + 1));
    a.layers.push_back(std::move(idx));
  }
  return a;
}

PartitionedParams::PartitionedParams(std::vector<Tensor> v, std::vector<Tensor> d, PartitionAssignment a)
    : values(std::move(v)), defaults(std::move(d)), assignment(std::move(a)) {
  if (values.size() != defaults.size() || values.size() != assignment.layers.size())
    throw std::invalid_argument("PartitionedParams: tensor counts disagree");
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i].shape() != defaults[i].shape()) throw ShapeError("PartitionedParams defaults", values[i].shape(), defaults[i].shape());
    if (assignment.layers[i].size() != values[i].numel())
      throw ShapeError("PartitionedParams: assignment of " + std::to_string(assignment.layers[i].size()) +
                       " elements for tensor " + shape_str(values[i].shape()));
    for (std::uint8_t p : assignment.layers[i])
      if (p < 1 || p > assignment.chunks) throw std::invalid_argument("PartitionedParams: partition index out of range");
  }
}

std::size_t PartitionedParams::num_elements() const { return assignment.total(); }

void PartitionedParams::check_level(std::size_t k) const {
  if (k < 1 || k > chunks())
    throw std::out_of_range("subnetwork level " + std::to_string(k) + " outside [1, " + std::to_string(chunks()) + "]");
}

std::vector<std::uint8_t> PartitionedParams::level_mask(std::size_t tensor, std::size_t k) const {
  const auto& a = assignment.layers.at(tensor);
  std::vector<std::uint8_t> m(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) m[i] = a[i] <= k ? 1 : 0;
  return m;
}

std::vector<Tensor> materialize(const PartitionedParams& params, std::size_t k) {
  params.check_level(k);
  std::vector<Tensor> out;
  out.reserve(params.num_tensors());
  for (std::size_t t = 0; t < params.num_tensors(); ++t) {
    Tensor e = params.defaults[t];
    const auto& a = params.assignment.layers[t];
    const auto v = params.values[t].values();
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a[i] <= k) e[i] = v[i];
    out.push_back(std::move(e));
  }
  return out;
}

MaterializedParams materialize(Tape& tape, const PartitionedParams& params, std::size_t k, bool track_values) {
  params.check_level(k);
  MaterializedParams m;
  for (std::size_t t = 0; t < params.num_tensors(); ++t) {
    Var v = tape.leaf(params.values[t], track_values);
    m.values.push_back(v);
    if (k == params.chunks() && !track_values) {
      m.effective.push_back(v);
      continue;
    }
    Var d = tape.constant(params.defaults[t]);
    const auto mask = params.level_mask(t, k);
    m.effective.push_back(where(mask, v, d));
  }
  return m;
}

std::vector<Tensor> restrict_gradient(std::vector<Tensor> grads, const PartitionAssignment& assignment, std::size_t j) {
  if (grads.size() != assignment.layers.size()) throw std::invalid_argument("restrict_gradient: tensor counts disagree");
  for (std::size_t t = 0; t < grads.size(); ++t) {
    const auto& a = assignment.layers[t];
    if (a.size() != grads[t].numel()) throw ShapeError("restrict_gradient: assignment/gradient size mismatch");
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a[i] != j) grads[t][i] = Real(0);
  }
  return grads;
}

std::pair<std::vector<Real>, std::vector<Real>> partitioned_affine_compose(std::span<const std::vector<Real>> scales,
                                                                           std::span<const std::vector<Real>> biases,
                                                                           std::size_t k) {
  if (scales.size() != biases.size() || scales.empty())
    throw std::invalid_argument("partitioned_affine_compose: need one scale and bias vector per partition");
  if (k < 1 || k > scales.size()) throw std::out_of_range("partitioned_affine_compose: k out of range");
  const std::size_t n = scales[0].size();
  for (std::size_t i = 0; i < scales.size(); ++i)
    if (scales[i].size() != n || biases[i].size() != n)
      throw std::invalid_argument("partitioned_affine_compose: length mismatch at partition " + std::to_string(i + 1));
  std::vector<Real> s(n, Real(1)), b(n, Real(0));
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t e = 0; e < n; ++e) {
      s[e] *= scales[i][e];
      b[e] += biases[i][e];
    }
  return {std::move(s), std::move(b)};
}

// ---- checkpoint ----------------------------------------------------------

namespace {

template <class T>
void put_le(std::ostream& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <class T>
T get_le(std::istream& in) {
  unsigned char buf[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(T))) throw std::runtime_error("checkpoint: truncated");
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

}  // namespace

void save_checkpoint(std::ostream& out, const PartitionedParams& params) {
  out.write("PNET", 4);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.num_tensors()));
  for (std::size_t t = 0; t < params.num_tensors(); ++t) {
    const Shape& s = params.values[t].shape();
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
    for (auto e : s) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e));
    for (Real v : params.values[t].values()) put_le<double>(out, static_cast<double>(v));
    for (Real v : params.defaults[t].values()) put_le<double>(out, static_cast<double>(v));
    const auto& a = params.assignment.layers[t];
    out.write(reinterpret_cast<const char*>(a.data()), static_cast<std::streamsize>(a.size()));
  }
  if (!out) throw std::runtime_error("checkpoint: write failed");
}

PartitionedParams load_checkpoint(std::istream& in, std::size_t chunks) {
  char magic[4];
  if (!in.read(magic, 4)) throw std::runtime_error("checkpoint: truncated");
  if (std::string(magic, 4) != "PNET") throw std::runtime_error("checkpoint: bad magic");
  const auto version = get_le<std::uint32_t>(in);
  if (version != kCheckpointVersion) throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  const auto count = get_le<std::uint32_t>(in);
  std::vector<Tensor> values, defaults;
  PartitionAssignment a;
  a.chunks = chunks;
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto rank = get_le<std::uint32_t>(in);
    if (rank > 8) throw std::runtime_error("checkpoint: implausible rank");
    Shape s(rank);
    for (auto& e : s) e = get_le<std::uint32_t>(in);
    const std::size_t n = shape_numel(s);
    Tensor v(s), d(s);
    for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<Real>(get_le<double>(in));
    for (std::size_t i = 0; i < n; ++i) d[i] = static_cast<Real>(get_le<double>(in));
    std::vector<std::uint8_t> idx(n);
    if (!in.read(reinterpret_cast<char*>(idx.data()), static_cast<std::streamsize>(n)))
      throw std::runtime_error("checkpoint: truncated");
    values.push_back(std::move(v));
    defaults.push_back(std::move(d));
    a.layers.push_back(std::move(idx));
  }
  return PartitionedParams(std::move(values), std::move(defaults), std::move(a));
}

void save_checkpoint(const std::string& path, const PartitionedParams& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path);
  save_checkpoint(out, params);
}

PartitionedParams load_checkpoint(const std::string& path, std::size_t chunks) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  return load_checkpoint(in, chunks);
}

}  // namespace pnet
