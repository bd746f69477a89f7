#include <cmath>
#include <string>

#include "look/error.hpp"
#include "look/evalsuite.hpp"

namespace look {

namespace {

long double log_choose(std::size_t m, std::size_t k) {
  const auto lm = static_cast<long double>(m);
  const auto lk = static_cast<long double>(k);
  return std::lgamma(lm + 1.0L) - std::lgamma(lk + 1.0L) - std::lgamma(lm - lk + 1.0L);
}

// log of C(q - removed, n) / C(q, n) as a sum of per-draw log ratios, which
// avoids the cancellation between two large log-binomials.
long double log_miss(std::size_t q, std::size_t removed, std::size_t n) {
  long double s = 0.0L;
  for (std::size_t t = 0; t < n; ++t) {
    s += std::log1p(-static_cast<long double>(removed) / static_cast<long double>(q - t));
  }
  return s;
}

}  // namespace

double coverage_probability(std::size_t c, std::size_t q, std::size_t n) {
  if (c < 1) throw DomainError("coverage_probability: c must be >= 1");
  if (n > q) {
    throw DomainError("coverage_probability: n=" + std::to_string(n) + " exceeds q=" + std::to_string(q));
  }
  if (c == 1) return q >= 1 && n >= 1 ? 1.0 : 0.0;
  if (n < c) return 0.0;
  const std::size_t base = q / c;
  const std::size_t big = q % c;  // pools of size base + 1
  const std::size_t small = c - big;

  // Inclusion-exclusion over which pools are missed: i of the larger pools
  // and j of the smaller ones.
  long double sum = 0.0L;
  for (std::size_t i = 0; i <= big; ++i) {
    for (std::size_t j = 0; j <= small; ++j) {
      const std::size_t removed = i * (base + 1) + j * base;
      if (removed > q || q - removed < n) continue;
      const long double term = std::exp(log_choose(big, i) + log_choose(small, j) + log_miss(q, removed, n));
      sum += ((i + j) % 2 == 0) ? term : -term;
    }
  }
  const double p = static_cast<double>(sum);
  return std::min(1.0, std::max(0.0, p));
}

}  // namespace look
