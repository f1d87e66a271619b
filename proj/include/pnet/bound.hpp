#pragma once

#include <cstddef>
#include <vector>

#include "pnet/rng.hpp"

namespace pnet {

// Digamma via upward recurrence to x >= 10 and the asymptotic series.
double digamma(double x);
// ln B(a, b) = lgamma(a) + lgamma(b) - lgamma(a + b)
double log_beta(double a, double b);
// KL(Beta(a1, b1) || Beta(a2, b2))
double beta_kl(double a1, double b1, double a2, double b2);

struct BetaBernoulliModel {
  double a0 = 1.0;
  double b0 = 1.0;
  void validate() const;
};

struct CoinChunk {
  std::size_t heads = 0;
  std::size_t tails = 0;
};
using BinaryChunks = std::vector<CoinChunk>;

// log p(D) = sum_k ln B(a_{k-1} + h_k, b_{k-1} + t_k) - ln B(a_{k-1}, b_{k-1})
double exact_log_marginal(const BetaBernoulliModel& model, const BinaryChunks& chunks);
// E_{Beta(a, b)}[log p(chunk | theta)]
double expected_loglik(double a, double b, const CoinChunk& chunk);

struct JensenGap {
  double lhs = 0;  // exact log marginal
  double rhs = 0;  // sum of expected log-likelihoods under the previous posteriors
  double gap = 0;
};
JensenGap jensen_gap(const BetaBernoulliModel& model, const BinaryChunks& chunks);
// sum_k KL(posterior_{k-1} || posterior_k)
double gap_via_kl(const BetaBernoulliModel& model, const BinaryChunks& chunks);

struct BoundCase {
  BetaBernoulliModel model;
  BinaryChunks chunks;
  JensenGap jensen;
  double kl_gap = 0;
};
// Random prior in [0.5, 5]^2, 1..max_chunks chunks and at most max_flips flips.
BoundCase random_bound_case(Rng& rng, std::size_t max_chunks = 5, std::size_t max_flips = 20);

struct BoundSweep {
  std::vector<BoundCase> cases;
  double min_gap = 0;
  double max_identity_error = 0;  // max |gap - gap_via_kl|
};
BoundSweep bound_sweep(std::uint64_t seed, std::size_t datasets, std::size_t max_chunks = 5,
                       std::size_t max_flips = 20);

}  // namespace pnet
