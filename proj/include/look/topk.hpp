#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <vector>

namespace look {

inline constexpr std::size_t kNoSkip = std::numeric_limits<std::size_t>::max();

/// Indices of the k largest scores ordered by (score desc, tie_key asc),
/// leaving out position `skip`. Only the ties at the k-th largest score are
/// ordered by key, so the result equals a full sort under the same order.
template <typename TieKey>
std::vector<std::size_t> topk_indices(std::span<const double> s, std::size_t k, TieKey tie_key,
                                      std::vector<double>& scratch, std::size_t skip = kNoSkip) {
  const std::size_t avail = s.size() - (skip < s.size() ? 1 : 0);
  const std::size_t keff = std::min(k, avail);
  std::vector<std::size_t> out;
  if (keff == 0) return out;
  // The keff-th largest block maximum t0 is a lower bound on the keff-th
  // largest score (keff blocks each hold a score >= t0), so only scores >= t0
  // can be selected. Exact selection then runs on those candidates only.
  const std::size_t n = s.size();
  const std::size_t block = std::clamp<std::size_t>(n / (4 * keff), 1, 64);
  const std::size_t blocks = (n + block - 1) / block;
  scratch.clear();
  for (std::size_t b = 0; b < blocks; ++b) {
    const std::size_t lo = b * block;
    const std::size_t hi = std::min(n, lo + block);
    double m = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t i = lo; i < hi; ++i) {
      if (i == skip) continue;
      m = std::max(m, s[i]);
      any = true;
    }
    if (any) scratch.push_back(m);
  }
  std::nth_element(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(keff - 1), scratch.end(),
                   std::greater<double>());
  const double t0 = block == 1 ? -std::numeric_limits<double>::infinity() : scratch[keff - 1];
  std::vector<std::size_t> cand;
  for (std::size_t i = 0; i < n; ++i) {
    if (s[i] >= t0 && i != skip) cand.push_back(i);
  }
  scratch.resize(cand.size());
  for (std::size_t i = 0; i < cand.size(); ++i) scratch[i] = s[cand[i]];
  std::nth_element(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(keff - 1), scratch.end(),
                   std::greater<double>());
  const double thr = scratch[keff - 1];
  std::vector<std::size_t> ties;
  out.reserve(keff);
  for (std::size_t i : cand) {
    if (s[i] > thr) {
      out.push_back(i);
    } else if (s[i] == thr) {
      ties.push_back(i);
    }
  }
  std::sort(ties.begin(), ties.end(), [&](std::size_t a, std::size_t b) { return tie_key(a) < tie_key(b); });
  for (std::size_t i = 0; out.size() < keff && i < ties.size(); ++i) out.push_back(ties[i]);
  std::sort(out.begin(), out.end(), [&](std::size_t a, std::size_t b) {
    if (s[a] != s[b]) return s[a] > s[b];
    return tie_key(a) < tie_key(b);
  });
  return out;
}

}  // namespace look
