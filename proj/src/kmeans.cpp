#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>

#include "look/error.hpp"
#include "look/evalsuite.hpp"

namespace look {

namespace {

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

std::size_t nearest(const Matrix& centroids, std::span<const double> p) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.rows(); ++c) {
    const double d = sq_dist(centroids.row(c), p);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

Matrix seed_plus_plus(const Matrix& points, std::size_t k, std::mt19937_64& rng) {
  const std::size_t n = points.rows();
  Matrix centroids(k, points.cols());
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::size_t first = std::min(n - 1, static_cast<std::size_t>(unit(rng) * static_cast<double>(n)));
  std::copy(points.row(first).begin(), points.row(first).end(), centroids.row(0).begin());
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = sq_dist(points.row(i), centroids.row(0));
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (double v : d2) total += v;
    std::size_t pick = 0;
    if (total > 0.0) {
      const double target = unit(rng) * total;
      double acc = 0.0;
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        acc += d2[i];
        if (acc > target && d2[i] > 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = std::min(n - 1, static_cast<std::size_t>(unit(rng) * static_cast<double>(n)));
    }
    std::copy(points.row(pick).begin(), points.row(pick).end(), centroids.row(c).begin());
    for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], sq_dist(points.row(i), centroids.row(c)));
  }
  return centroids;
}

}  // namespace

KMeansResult kmeans(const Matrix& points, std::size_t k, std::mt19937_64& rng, int max_iter, double tol) {
  if (points.rows() == 0) throw StateError("kmeans: no points");
  if (k == 0 || k > points.rows()) {
    throw DomainError("kmeans: k=" + std::to_string(k) + " with " + std::to_string(points.rows()) + " points");
  }
  KMeansResult r;
  r.centroids = seed_plus_plus(points, k, rng);
  r.assignment.assign(points.rows(), 0);
  const std::size_t d = points.cols();
  for (int it = 0; it < max_iter; ++it) {
    for (std::size_t i = 0; i < points.rows(); ++i) r.assignment[i] = nearest(r.centroids, points.row(i));
    Matrix sums(k, d);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < points.rows(); ++i) {
      auto dst = sums.row(r.assignment[i]);
      auto src = points.row(i);
      for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
      ++counts[r.assignment[i]];
    }
    double shift = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      if (counts[j] == 0) continue;  // empty cluster keeps its centroid
      auto row = sums.row(j);
      for (double& v : row) v /= static_cast<double>(counts[j]);
      shift = std::max(shift, std::sqrt(sq_dist(row, r.centroids.row(j))));
      std::copy(row.begin(), row.end(), r.centroids.row(j).begin());
    }
    r.iterations = it + 1;
    if (shift <= tol) break;
  }
  for (std::size_t i = 0; i < points.rows(); ++i) r.assignment[i] = nearest(r.centroids, points.row(i));
  return r;
}

ClassMemory build_class_memory(const Matrix& features, std::span<const Label> labels, std::size_t num_classes,
                               std::size_t clusters_per_class, std::uint64_t seed) {
  if (clusters_per_class < 1) throw ConfigError("clusters_per_class must be >= 1");
  if (features.rows() != labels.size()) throw ShapeError("build_class_memory: rows != labels");
  const Matrix normed = normalize_rows(features);
  std::vector<std::vector<std::size_t>> members(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
      throw ContractError("build_class_memory: label outside [0, num_classes)");
    }
    members[static_cast<std::size_t>(labels[i])].push_back(i);
  }
  ClassMemory mem;
  std::vector<double> rows;
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (members[c].empty()) {
      mem.warnings.push_back("class " + std::to_string(c) + " has no samples; no memory entries");
      continue;
    }
    std::size_t k = clusters_per_class;
    if (members[c].size() < k) {
      mem.warnings.push_back("class " + std::to_string(c) + " has " + std::to_string(members[c].size()) +
                             " samples < " + std::to_string(k) + " clusters; reduced");
      k = members[c].size();
    }
    std::seed_seq seq{seed, static_cast<std::uint64_t>(c)};
    std::mt19937_64 rng(seq);
    const KMeansResult km = kmeans(normed.gather_rows(members[c]), k, rng);
    const Matrix unit = normalize_rows(km.centroids);
    for (std::size_t j = 0; j < unit.rows(); ++j) {
      rows.insert(rows.end(), unit.row(j).begin(), unit.row(j).end());
      mem.labels.push_back(static_cast<Label>(c));
    }
  }
  mem.centroids = Matrix(mem.labels.size(), features.cols(), std::move(rows));
  return mem;
}

}  // namespace look
