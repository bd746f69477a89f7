#pragma once

#include <optional>
#include <span>
#include <vector>

#include "look/matrix.hpp"
#include "look/memory_queue.hpp"
#include "look/types.hpp"

namespace look {

struct LookLossResult {
  double loss = 0.0;
  double positive_mass = 0.0;  // sum over same-label neighbors of exp(sim / tau)
  double total_mass = 0.0;     // sum over all neighbors of exp(sim / tau)
  bool clamped = false;
  std::vector<double> grad_wrt_query;
};

/// Per-class sum of cosine weights over the neighbor set.
std::vector<double> aggregate_knn_labels(const NeighborSet& neighbors, std::size_t num_classes);

/// Leave-one-out kNN loss -log(max(eps, positive_mass / total_mass)).
///
/// Similarities are recomputed from the query and the neighbor embeddings so
/// the result is a differentiable function of the query; the neighbor
/// selection itself is held fixed. The queue rows are constants (no gradient).
/// When the ratio falls below eps the loss is -log(eps), `clamped` is set and
/// the gradient is exactly zero.
LookLossResult look_loss(std::span<const double> query, Label query_label,
                         const NeighborSet& neighbors, double tau, double eps);

/// The loss given precomputed similarities (no gradient); look_loss is this
/// evaluated at sims_j = <query, z_j>.
LookLossResult look_loss_from_similarities(std::span<const double> sims,
                                           std::span<const Label> labels, Label query_label,
                                           double tau, double eps);

/// Gradient part of look_loss: (1/tau) sum_j (p_j - r_j) z_j, with p the
/// softmax over all neighbors and r the softmax over positives only.
std::vector<double> look_grad(std::span<const double> query, Label query_label,
                              const NeighborSet& neighbors, double tau, double eps);

/// Softmax over aggregated labels with tau inside (the class-level form).
/// Equal to the ratio form when every class occurs exactly once in the
/// neighborhood; otherwise the two differ.
double look_loss_class_form(const NeighborSet& neighbors, Label query_label,
                            std::size_t num_classes, double tau);

struct CrossEntropyResult {
  double loss = 0.0;
  Matrix grad;  // d loss / d logits, already divided by n
};

/// Mean negative log-softmax of the true class over rows.
CrossEntropyResult ce_loss(const Matrix& logits, std::span<const Label> labels);

struct SupConResult {
  double loss = 0.0;
  std::size_t num_positives = 0;
  std::vector<double> grad_wrt_query;
};

/// Supervised contrastive loss against every entry: mean over same-label
/// entries p of -log(exp(s_p/tau) / sum_a exp(s_a/tau)). Returns nullopt
/// (skip signal) when no entry shares the query label.
std::optional<SupConResult> supcon_loss(std::span<const double> query, Label query_label,
                                        const Matrix& keys, std::span<const Label> key_labels,
                                        double tau);

/// Same loss over the occupied part of a queue.
std::optional<SupConResult> supcon_loss(std::span<const double> query, Label query_label,
                                        const MemoryQueue& queue, double tau);

}  // namespace look
