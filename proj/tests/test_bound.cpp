#include <algorithm>
#include <boost/math/special_functions/beta.hpp>
#include <boost/math/special_functions/digamma.hpp>
#include <cmath>
#include <numbers>

#include "doctest.h"
#include "pnet/bound.hpp"

using namespace pnet;

namespace {

// Midpoint-rule quadrature of E_{Beta(a,b)}[h ln x + t ln(1-x)].
double expected_loglik_quadrature(double a, double b, double h, double t) {
  const int n = 400000;
  double acc = 0;
  const double norm = boost::math::beta(a, b);
  for (int i = 0; i < n; ++i) {
    const double x = (i + 0.5) / n;
    const double dens = std::pow(x, a - 1) * std::pow(1 - x, b - 1) / norm;
    acc += dens * (h * std::log(x) + t * std::log1p(-x));
  }
  return acc / n;
}

}  // namespace

TEST_CASE("digamma against boost") {
  for (double x : {1e-3, 0.1, 0.5, 1.0, 1.5, 2.0, 3.7, 9.99, 10.0, 10.5, 42.0, 1e3, 1e6}) {
    const double ref = boost::math::digamma(x);
    CHECK(std::abs(digamma(x) - ref) <= 1e-12 * std::max(1.0, std::abs(ref)));
  }
  CHECK(digamma(1.0) == doctest::Approx(-std::numbers::egamma).epsilon(1e-15));
  CHECK_THROWS_AS(digamma(0.0), std::domain_error);
  CHECK_THROWS_AS(digamma(-1.5), std::domain_error);
}

TEST_CASE("worked one-heads example") {
  const BetaBernoulliModel m{1, 1};
  const BinaryChunks one{{1, 0}};
  CHECK(std::abs(exact_log_marginal(m, one) - std::log(0.5)) < 1e-12);
  CHECK(std::abs(expected_loglik(1, 1, {1, 0}) + 1.0) < 1e-12);
  const JensenGap j = jensen_gap(m, one);
  CHECK(std::abs(j.lhs - -0.693147) < 1e-6);
  CHECK(std::abs(j.rhs - -1.0) < 1e-12);
  CHECK(std::abs(j.gap - 0.306853) < 1e-6);
  CHECK(std::abs(j.gap - (1 - std::log(2.0))) < 1e-12);
  CHECK(std::abs(gap_via_kl(m, one) - (1 - std::log(2.0))) < 1e-12);
  CHECK(std::abs(beta_kl(1, 1, 2, 1) - 0.306853) < 1e-6);
}

TEST_CASE("empty data") {
  const BetaBernoulliModel m{2, 3};
  CHECK(exact_log_marginal(m, {}) == 0.0);
  const JensenGap j = jensen_gap(m, {});
  CHECK(j.lhs == 0.0);
  CHECK(j.rhs == 0.0);
  CHECK(j.gap == 0.0);
  CHECK(expected_loglik(2, 3, {0, 0}) == 0.0);
  CHECK(gap_via_kl(m, {{0, 0}}) == 0.0);
  CHECK(beta_kl(2.5, 1.5, 2.5, 1.5) == 0.0);
}

TEST_CASE("exact marginal against the product of predictive probabilities") {
  // Sequential Polya-urn probabilities of each flip.
  const BetaBernoulliModel m{1.5, 0.7};
  const BinaryChunks chunks{{2, 1}, {0, 3}, {4, 0}};
  double a = m.a0, b = m.b0, ref = 0;
  for (const auto& c : chunks) {
    for (std::size_t i = 0; i < c.heads; ++i, ++a) ref += std::log(a / (a + b));
    for (std::size_t i = 0; i < c.tails; ++i, ++b) ref += std::log(b / (a + b));
  }
  CHECK(std::abs(exact_log_marginal(m, chunks) - ref) < 1e-12);
}

TEST_CASE("expected_loglik against quadrature") {
  for (auto [a, b, h, t] : {std::array{1.0, 1.0, 1.0, 0.0}, std::array{2.5, 1.5, 3.0, 2.0}, std::array{4.0, 6.0, 0.0, 5.0}}) {
    CHECK(expected_loglik(a, b, {static_cast<std::size_t>(h), static_cast<std::size_t>(t)}) ==
          doctest::Approx(expected_loglik_quadrature(a, b, h, t)).epsilon(1e-5));
  }
  // Symmetric prior: heads and tails swap freely.
  CHECK(expected_loglik(2, 2, {3, 1}) == doctest::Approx(expected_loglik(2, 2, {1, 3})).epsilon(1e-15));
}

TEST_CASE("order invariance of the exact marginal") {
  const BetaBernoulliModel m{0.8, 2.2};
  BinaryChunks chunks{{1, 2}, {3, 0}, {0, 4}, {2, 2}};
  const double base = exact_log_marginal(m, chunks);
  std::sort(chunks.begin(), chunks.end(), [](auto& x, auto& y) { return x.heads < y.heads; });
  do {
    CHECK(std::abs(exact_log_marginal(m, chunks) - base) < 1e-12);
  } while (std::next_permutation(chunks.begin(), chunks.end(),
                                 [](auto& x, auto& y) { return std::pair{x.heads, x.tails} < std::pair{y.heads, y.tails}; }));
}

TEST_CASE("bound sweep") {
  const BoundSweep s = bound_sweep(2024, 100);
  REQUIRE(s.cases.size() == 100);
  CHECK(s.min_gap >= -1e-12);
  CHECK(s.max_identity_error <= 1e-9);
  for (const auto& c : s.cases) {
    CHECK(c.chunks.size() >= 1);
    CHECK(c.chunks.size() <= 5);
    std::size_t flips = 0;
    for (auto& k : c.chunks) flips += k.heads + k.tails;
    CHECK(flips <= 20);
    CHECK(c.jensen.gap == doctest::Approx(c.kl_gap).epsilon(1e-9));
  }
  // Same seed, same sweep.
  const BoundSweep again = bound_sweep(2024, 100);
  CHECK(again.min_gap == s.min_gap);
  CHECK(again.max_identity_error == s.max_identity_error);
}

TEST_CASE("validation") {
  CHECK_THROWS_AS((BetaBernoulliModel{0, 1}.validate()), std::invalid_argument);
  CHECK_THROWS_AS((BetaBernoulliModel{1, -2}.validate()), std::invalid_argument);
  CHECK_THROWS_AS(exact_log_marginal({1, 0}, {{1, 0}}), std::invalid_argument);
}
