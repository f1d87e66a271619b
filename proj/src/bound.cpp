#include "pnet/bound.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace pnet {

double digamma(double x) {
  if (!(x > 0)) throw std::domain_error("digamma: argument must be positive");
  double shift = 0;
  while (x < 10) {
    shift -= 1.0 / x;
    x += 1;
  }
  const double r = 1.0 / (x * x);
  // Bernoulli-number series in 1/x^2.
  const double series =
      r * (1.0 / 12 - r * (1.0 / 120 - r * (1.0 / 252 - r * (1.0 / 240 - r * (1.0 / 132 - r * (691.0 / 32760 - r / 12))))));
  return shift + std::log(x) - 0.5 / x - series;
}

double log_beta(double a, double b) {
  if (!(a > 0 && b > 0)) throw std::domain_error("log_beta: arguments must be positive");
  return std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
}

double beta_kl(double a1, double b1, double a2, double b2) {
  return log_beta(a2, b2) - log_beta(a1, b1) + (a1 - a2) * digamma(a1) + (b1 - b2) * digamma(b1) +
         (a2 - a1 + b2 - b1) * digamma(a1 + b1);
}

void BetaBernoulliModel::validate() const {
  if (!(a0 > 0 && b0 > 0)) throw std::invalid_argument("beta-bernoulli: prior parameters must be positive");
}

double exact_log_marginal(const BetaBernoulliModel& model, const BinaryChunks& chunks) {
  model.validate();
  double a = model.a0, b = model.b0, total = 0;
  for (const CoinChunk& c : chunks) {
    const double h = static_cast<double>(c.heads), t = static_cast<double>(c.tails);
    total += log_beta(a + h, b + t) - log_beta(a, b);
    a += h;
    b += t;
  }
  return total;
}

double expected_loglik(double a, double b, const CoinChunk& chunk) {
  if (!(a > 0 && b > 0)) throw std::invalid_argument("expected_loglik: a and b must be positive");
  const double dab = digamma(a + b);
  double out = 0;
  if (chunk.heads) out += static_cast<double>(chunk.heads) * (digamma(a) - dab);
  if (chunk.tails) out += static_cast<double>(chunk.tails) * (digamma(b) - dab);
  return out;
}

JensenGap jensen_gap(const BetaBernoulliModel& model, const BinaryChunks& chunks) {
  JensenGap g;
  g.lhs = exact_log_marginal(model, chunks);
  double a = model.a0, b = model.b0;
  for (const CoinChunk& c : chunks) {
    g.rhs += expected_loglik(a, b, c);
    a += static_cast<double>(c.heads);
    b += static_cast<double>(c.tails);
  }
  g.gap = g.lhs - g.rhs;
  return g;
}

double gap_via_kl(const BetaBernoulliModel& model, const BinaryChunks& chunks) {
  model.validate();
  double a = model.a0, b = model.b0, total = 0;
  for (const CoinChunk& c : chunks) {
    const double a1 = a + static_cast<double>(c.heads), b1 = b + static_cast<double>(c.tails);
    total += beta_kl(a, b, a1, b1);
    a = a1;
    b = b1;
  }
  return total;
}

BoundCase random_bound_case(Rng& rng, std::size_t max_chunks, std::size_t max_flips) {
  if (max_chunks == 0) throw std::invalid_argument("random_bound_case: max_chunks must be positive");
  BoundCase c;
  c.model.a0 = rng.uniform(0.5, 5.0);
  c.model.b0 = rng.uniform(0.5, 5.0);
  const double p = rng.uniform();
  const std::size_t n_chunks = 1 + static_cast<std::size_t>(rng.below(max_chunks));
  std::size_t left = static_cast<std::size_t>(rng.below(max_flips + 1));
  for (std::size_t k = 0; k < n_chunks; ++k) {
    const std::size_t flips = k + 1 == n_chunks ? left : static_cast<std::size_t>(rng.below(left + 1));
    left -= flips;
    CoinChunk ch;
    for (std::size_t f = 0; f < flips; ++f) (rng.uniform() < p ? ch.heads : ch.tails) += 1;
    c.chunks.push_back(ch);
  }
  c.jensen = jensen_gap(c.model, c.chunks);
  c.kl_gap = gap_via_kl(c.model, c.chunks);
  return c;
}

BoundSweep bound_sweep(std::uint64_t seed, std::size_t datasets, std::size_t max_chunks, std::size_t max_flips) {
  BoundSweep s;
  s.min_gap = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < datasets; ++i) {
    Rng rng = Rng::stream(seed, "bound", i);
    s.cases.push_back(random_bound_case(rng, max_chunks, max_flips));
    const BoundCase& c = s.cases.back();
    s.min_gap = std::min(s.min_gap, c.jensen.gap);
    s.max_identity_error = std::max(s.max_identity_error, std::abs(c.jensen.gap - c.kl_gap));
  }
  if (datasets == 0) s.min_gap = 0;
  return s;
}

}  // namespace pnet
