#pragma once

#include <cmath>
#include <vector>

#include "pnet/autodiff.hpp"
#include "pnet/rng.hpp"

namespace testing {

inline pnet::Tensor random_tensor(pnet::Shape shape, pnet::Rng& rng, double lo = -2.0, double hi = 2.0) {
  pnet::Tensor t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// Random tensor with every entry at least `gap` away from 0 (relu kinks).
inline pnet::Tensor away_from_zero(pnet::Shape shape, pnet::Rng& rng, double gap = 1e-3) {
  pnet::Tensor t(std::move(shape));
  for (auto& v : t.values()) {
    do v = rng.uniform(-2.0, 2.0);
    while (std::abs(v) < gap);
  }
  return t;
}

// Weighted sum of all entries with fixed random weights, so that every
// coordinate of the output contributes a generic nonzero gradient.
inline pnet::Var weighted_sum(pnet::Var y, std::uint64_t seed = 99) {
  pnet::Rng rng(seed);
  pnet::Tensor w(y.shape());
  for (auto& v : w.values()) v = rng.uniform(0.5, 1.5) * (rng.uniform() < 0.5 ? -1 : 1);
  return pnet::sum(pnet::mul(y, y.tape->constant(std::move(w))));
}

}  // namespace testing
