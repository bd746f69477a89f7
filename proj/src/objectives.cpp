#include "look/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "look/error.hpp"

namespace look {

namespace {

void check_tau(double tau) {
  if (!(tau > 0.0)) throw ConfigError("temperature must be > 0, got " + std::to_string(tau));
}

void check_eps(double eps) {
  if (!(eps > 0.0 && eps < 1.0)) {
    throw ConfigError("clamp epsilon must lie in (0, 1), got " + std::to_string(eps));
  }
}

// Shared core of the ratio form. Fills `coef` with d loss / d sim_j when the
// caller asks for it (left zero when clamped).
LookLossResult ratio_form(std::span<const double> sims, std::span<const Label> labels,
                          Label query_label, double tau, double eps,
                          std::vector<double>* coef) {
  check_tau(tau);
  check_eps(eps);
  if (sims.empty()) throw StateError("look_loss: empty neighbor set");
  if (sims.size() != labels.size()) throw ShapeError("look_loss: sims/labels length mismatch");

  const std::size_t k = sims.size();
  std::vector<double> scaled(k);
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < k; ++j) {
    scaled[j] = sims[j] / tau;
    top = std::max(top, scaled[j]);
  }
  double pos = 0.0;
  double neg = 0.0;
  std::vector<double> e(k);
  for (std::size_t j = 0; j < k; ++j) {
    e[j] = std::exp(scaled[j] - top);
    if (labels[j] == query_label) {
      pos += e[j];
    } else {
      neg += e[j];
    }
  }
  LookLossResult r;
  const double scale = std::exp(top);
  r.positive_mass = pos * scale;
  r.total_mass = (pos + neg) * scale;
  const double ratio = pos / (pos + neg);
  if (coef != nullptr) coef->assign(k, 0.0);
  if (ratio < eps) {
    r.clamped = true;
    r.loss = -std::log(eps);
    return r;
  }
  r.loss = std::log1p(neg / pos);
  if (coef != nullptr) {
    const double total = pos + neg;
    for (std::size_t j = 0; j < k; ++j) {
      const double p = e[j] / total;
      const double q = labels[j] == query_label ? e[j] / pos : 0.0;
      (*coef)[j] = (p - q) / tau;
    }
  }
  return r;
}

std::vector<double> neighbor_sims(std::span<const double> query, const NeighborSet& n) {
  if (n.size() == 0) throw StateError("look_loss: empty neighbor set");
  if (n.embeddings.rows() != n.size() || n.embeddings.cols() != query.size()) {
    throw ShapeError("look_loss: neighbor embeddings do not match query dim");
  }
  std::vector<double> sims(n.size());
  for (std::size_t j = 0; j < n.size(); ++j) sims[j] = dot(query, n.embeddings.row(j));
  return sims;
}

}  // namespace

std::vector<double> aggregate_knn_labels(const NeighborSet& neighbors, std::size_t num_classes) {
  std::vector<double> out(num_classes, 0.0);
  for (std::size_t j = 0; j < neighbors.size(); ++j) {
    const Label y = neighbors.labels[j];
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      throw ContractError("aggregate_knn_labels: label " + std::to_string(y) + " outside [0, " +
                          std::to_string(num_classes) + ")");
    }
    out[static_cast<std::size_t>(y)] += neighbors.similarities[j];
  }
  return out;
}

LookLossResult look_loss_from_similarities(std::span<const double> sims,
                                           std::span<const Label> labels, Label query_label,
                                           double tau, double eps) {
  return ratio_form(sims, labels, query_label, tau, eps, nullptr);
}

LookLossResult look_loss(std::span<const double> query, Label query_label,
                         const NeighborSet& neighbors, double tau, double eps) {
  const std::vector<double> sims = neighbor_sims(query, neighbors);
  std::vector<double> coef;
  LookLossResult r = ratio_form(sims, neighbors.labels, query_label, tau, eps, &coef);
  r.grad_wrt_query.assign(query.size(), 0.0);
  if (r.clamped) return r;
  for (std::size_t j = 0; j < neighbors.size(); ++j) {
    if (coef[j] == 0.0) continue;
    auto z = neighbors.embeddings.row(j);
    for (std::size_t c = 0; c < z.size(); ++c) r.grad_wrt_query[c] += coef[j] * z[c];
  }
  return r;
}

std::vector<double> look_grad(std::span<const double> query, Label query_label,
                              const NeighborSet& neighbors, double tau, double eps) {
  return look_loss(query, query_label, neighbors, tau, eps).grad_wrt_query;
}

double look_loss_class_form(const NeighborSet& neighbors, Label query_label,
                            std::size_t num_classes, double tau) {
  check_tau(tau);
  if (neighbors.size() == 0) throw StateError("look_loss_class_form: empty neighbor set");
  const std::vector<double> agg = aggregate_knn_labels(neighbors, num_classes);
  double top = -std::numeric_limits<double>::infinity();
  for (double a : agg) top = std::max(top, a / tau);
  double denom = 0.0;
  for (double a : agg) denom += std::exp(a / tau - top);
  return -(agg[static_cast<std::size_t>(query_label)] / tau - top - std::log(denom));
}

CrossEntropyResult ce_loss(const Matrix& logits, std::span<const Label> labels) {
  const std::size_t n = logits.rows();
  const std::size_t classes = logits.cols();
  if (labels.size() != n) throw ShapeError("ce_loss: label count != logit rows");
  if (n == 0) throw StateError("ce_loss: empty batch");
  CrossEntropyResult r;
  r.grad = Matrix(n, classes);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Label y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw ContractError("ce_loss: label " + std::to_string(y) + " outside [0, " +
                          std::to_string(classes) + ")");
    }
    auto row = logits.row(i);
    const double top = *std::max_element(row.begin(), row.end());
    double denom = 0.0;
    for (double v : row) denom += std::exp(v - top);
    const double log_denom = std::log(denom);
    total += -(row[static_cast<std::size_t>(y)] - top - log_denom);
    auto g = r.grad.row(i);
    for (std::size_t c = 0; c < classes; ++c) {
      const double p = std::exp(row[c] - top - log_denom);
      g[c] = (p - (static_cast<std::size_t>(y) == c ? 1.0 : 0.0)) / static_cast<double>(n);
    }
  }
  r.loss = total / static_cast<double>(n);
  return r;
}

namespace {

// keys: m rows of length query.size(), contiguous row-major.
std::optional<SupConResult> supcon_core(std::span<const double> query, Label query_label,
                                        const double* keys, std::size_t m,
                                        std::span<const Label> key_labels, double tau) {
  check_tau(tau);
  if (m != key_labels.size()) throw ShapeError("supcon_loss: keys/labels mismatch");
  if (m == 0) return std::nullopt;
  const std::size_t d = query.size();
  auto key = [&](std::size_t a) { return std::span<const double>(keys + a * d, d); };

  std::vector<double> s(m);
  double top = -std::numeric_limits<double>::infinity();
  std::size_t positives = 0;
  double pos_sum = 0.0;
  for (std::size_t a = 0; a < m; ++a) {
    s[a] = dot(query, key(a)) / tau;
    top = std::max(top, s[a]);
    if (key_labels[a] == query_label) {
      ++positives;
      pos_sum += s[a];
    }
  }
  if (positives == 0) return std::nullopt;
  double denom = 0.0;
  for (double v : s) denom += std::exp(v - top);
  const double lse = top + std::log(denom);

  SupConResult r;
  r.num_positives = positives;
  r.loss = lse - pos_sum / static_cast<double>(positives);
  r.grad_wrt_query.assign(d, 0.0);
  const double inv_pos = 1.0 / static_cast<double>(positives);
  for (std::size_t a = 0; a < m; ++a) {
    double c = std::exp(s[a] - lse);
    if (key_labels[a] == query_label) c -= inv_pos;
    c /= tau;
    auto k = key(a);
    for (std::size_t j = 0; j < d; ++j) r.grad_wrt_query[j] += c * k[j];
  }
  return r;
}

}  // namespace

std::optional<SupConResult> supcon_loss(std::span<const double> query, Label query_label,
                                        const Matrix& keys, std::span<const Label> key_labels,
                                        double tau) {
  if (keys.rows() > 0 && keys.cols() != query.size()) {
    throw ShapeError("supcon_loss: key dim != query dim");
  }
  return supcon_core(query, query_label, keys.data(), keys.rows(), key_labels, tau);
}

std::optional<SupConResult> supcon_loss(std::span<const double> query, Label query_label,
                                        const MemoryQueue& queue, double tau) {
  if (queue.dim() != query.size()) throw ShapeError("supcon_loss: queue dim != query dim");
  return supcon_core(query, query_label, queue.storage().data(), queue.occupancy(),
                     queue.labels(), tau);
}

}  // namespace look
