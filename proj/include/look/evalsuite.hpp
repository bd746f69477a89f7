#pragma once

#include <cstdint>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "look/dataset.hpp"
#include "look/matrix.hpp"
#include "look/model.hpp"
#include "look/types.hpp"

namespace look {

/// One evaluation protocol's outcome. Serialized in long form, one
/// `protocol,seed,kind,name,value` row per parameter or metric.
struct EvalReport {
  std::string protocol;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, std::string>> params;
  std::vector<std::pair<std::string, double>> metrics;
  std::vector<std::string> warnings;

  double metric(const std::string& name) const;
  void write_csv(std::ostream& out, bool header = true) const;
};

/// Frozen features for a downstream task.
struct FeatureSplits {
  Matrix train, val, test;
  std::vector<Label> y_train, y_val, y_test;
  std::size_t num_classes = 0;
};

FeatureSplits make_feature_splits(const Matrix& features, const LabeledDataset& task);
FeatureSplits extract_feature_splits(const ModelState& state, const LabeledDataset& task,
                                      FeatureSource source);

struct ProbeConfig {
  std::vector<double> learning_rates{0.001, 0.01, 0.1};
  std::vector<double> weight_decays{0.0, 1e-4, 1e-5};
  std::vector<std::size_t> batch_sizes{32, 128};
  int epochs = 50;
  std::vector<int> decay_epochs{25, 37};
  double decay_factor = 0.1;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  /// Worker threads for the grid; results are collated in grid order.
  std::size_t threads = 1;

  void validate() const;

  friend bool operator==(const ProbeConfig&, const ProbeConfig&) = default;
};

/// Softmax regression on train-standardized features, grid-searched on val,
/// retrained on train+val with the chosen cell, scored on test.
EvalReport linear_probe(const FeatureSplits& splits, const ProbeConfig& cfg);

/// Probe variant that also updates the encoder: encoder -> fixed
/// standardization (from the initial train features) -> linear head.
EvalReport finetune_probe(const ModelState& state, const LabeledDataset& task, const ProbeConfig& cfg);

struct KMeansResult {
  Matrix centroids;
  std::vector<std::size_t> assignment;
  int iterations = 0;
};

/// Lloyd iterations from k-means++ seeding; stops after max_iter or when no
/// centroid moves more than tol.
KMeansResult kmeans(const Matrix& points, std::size_t k, std::mt19937_64& rng, int max_iter = 50,
                    double tol = 1e-6);

struct ClassMemory {
  Matrix centroids;  // unit rows
  std::vector<Label> labels;
  std::vector<std::string> warnings;
};

/// Per-class k-means over row-normalized features, centroids re-normalized.
/// Classes smaller than clusters_per_class use one cluster per member.
ClassMemory build_class_memory(const Matrix& features, std::span<const Label> labels,
                               std::size_t num_classes, std::size_t clusters_per_class,
                               std::uint64_t seed);

struct MemoryTransferConfig {
  std::vector<std::size_t> clusters_per_class{1, 2, 4, 8};
  std::vector<std::size_t> k_values{1, 3, 5, 10, 20};
  std::vector<double> temperatures{0.05, 0.1, 0.5, 1.0};
  std::uint64_t seed = 0;

  void validate() const;

  friend bool operator==(const MemoryTransferConfig&, const MemoryTransferConfig&) = default;
};

/// Affine-free layer normalization per row (zero mean, unit variance across
/// coordinates), followed by unit normalization.
Matrix layer_normalize_rows(const Matrix& features);

/// Weighted-kNN vote against a class memory (score_c = sum exp(sim/tau)).
std::vector<Label> memory_predict(const ClassMemory& memory, const Matrix& queries, std::size_t k,
                                  double tau, std::size_t num_classes);

EvalReport memory_transfer_eval(const FeatureSplits& splits, const MemoryTransferConfig& cfg);

struct DistanceStats {
  double intra_mean = 0.0;
  double intra_sd = 0.0;
  double inter_mean = 0.0;
  double inter_sd = 0.0;
  std::size_t intra_classes = 0;
  std::vector<std::string> warnings;
};

/// Mean (1 - cosine) within each class and across each class pair; the sd is
/// taken across classes (intra) and across class pairs (inter).
DistanceStats intra_inter_distance(const Matrix& features, std::span<const Label> labels);

struct FallingRatio {
  std::vector<std::pair<Label, double>> per_class;  // sorted by ratio, descending
  double class_mean = 0.0;
  double sample_mean = 0.0;
  std::size_t k_used = 0;
  std::vector<std::string> warnings;
};

/// For every row, the fraction of its k nearest other rows sharing its label.
FallingRatio falling_ratio(const Matrix& bank, std::span<const Label> labels, std::size_t k);

/// Probability that n draws without replacement from q entries, split as
/// evenly as possible into c sub-classes (the first q mod c get one extra),
/// hit every sub-class at least once.
double coverage_probability(std::size_t c, std::size_t q, std::size_t n);

double majority_baseline(std::span<const Label> train_labels, std::span<const Label> test_labels);

void write_distance_csv(const DistanceStats& d, std::ostream& out);
void write_falling_ratio_csv(const FallingRatio& f, std::ostream& out);

/// `id,label,sublabel,e0..e{d-1}`; sublabel is -1 when absent.
void write_embedding_csv(const Matrix& features, const LabeledDataset& data, std::ostream& out);

/// Number of worker threads from LOOK_THREADS (default 1).
std::size_t threads_from_env();

}  // namespace look
