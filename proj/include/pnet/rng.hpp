#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <vector>

namespace pnet {

// 64-bit generator with portable draws. std::*_distribution are avoided on
// purpose: their output differs between standard libraries, and runs have
// to replay bit-identically from a seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  // Independent stream keyed by (seed, name, counter). Used for the named
  // sub-streams (data, partition, training, augmentation, federated) and for
  // counter-based per-step / per-sample streams.
  static Rng stream(std::uint64_t seed, std::string_view name, std::uint64_t counter = 0);

  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1).
  double uniform();
  // Uniform in (0, 1); never returns an endpoint.
  double uniform_open();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  // Standard normal via Box-Muller; caches the second variate.
  double normal();
  // Gamma(shape, 1) via Marsaglia-Tsang.
  double gamma(double shape);
  std::vector<double> dirichlet(std::span<const double> alpha);
  // Index drawn from unnormalized non-negative weights.
  std::size_t categorical(std::span<const double> weights);

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t mix64(std::uint64_t x);

}  // namespace pnet
