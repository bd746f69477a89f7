#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "look/dataset.hpp"
#include "look/memory_queue.hpp"
#include "look/model.hpp"

namespace look {

enum class Objective { kLook, kCe, kSupCon };

std::string to_string(Objective o);
Objective parse_objective(const std::string& text);

struct TrainConfig {
  int epochs = 60;
  std::size_t batch_size = 128;
  std::size_t queue_capacity = 4096;
  double ema_momentum = 0.99;
  Schedule schedule;
  double clamp_epsilon = 1e-5;
  double sgd_momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 1;
  bool two_views = false;
  double aug_sigma = 0.05;
  double aug_mask_rate = 0.1;
  Objective objective = Objective::kLook;
  /// Run the kNN monitor every this many epochs (and always after the last);
  /// 0 monitors only after the last epoch.
  int monitor_every = 10;
  std::size_t monitor_k = 200;
  double monitor_tau = 0.1;
  /// Upper bound on validation rows scored by the monitor; 0 = all.
  std::size_t monitor_max_queries = 5000;
  MlpSpec encoder{{32, 128, 128}};
  MlpSpec projector{{128, 64, 32}};
  MlpSpec predictor{{32, 32, 32}};
  /// When false the CSV `seconds` column is written as 0 so logs are
  /// byte-reproducible.
  bool record_wallclock = false;

  void validate() const;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Momentum SGD with L2 weight decay folded into the gradient:
/// v <- mu v + (g + wd w); w <- w - lr v. Entries whose decay flag is false
/// (biases, by convention) get no decay; an empty mask decays everything.
class SgdMomentum {
 public:
  SgdMomentum(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  /// grads[i] may be empty (no gradient reached that parameter this step);
  /// such parameters and their velocity are left untouched.
  void step(const std::vector<Matrix*>& params, const std::vector<const Matrix*>& grads, double lr,
            const std::vector<bool>& decay = {});

 private:
  double momentum_;
  double weight_decay_;
  std::vector<Matrix> velocity_;
};

struct StepMetrics {
  double loss = 0.0;
  /// Fraction of clamped samples (look) or skipped samples without a
  /// positive (supcon); 0 for ce.
  double clamp_frac = 0.0;
  std::size_t k = 0;
  double tau = 0.0;
  double lr = 0.0;
  double train_acc = 0.0;  // batch accuracy of the ce head, ce only
};

/// Everything a training loop mutates, owned together.
struct TrainContext {
  TrainConfig cfg;
  ModelState state;
  std::optional<MemoryQueue> queue;
  SgdMomentum optimizer;
  std::mt19937_64 aug_rng;

  TrainContext(TrainConfig config, ModelState initial);
};

/// One update in fixed order: online forward of the query view, top-k
/// against the queue, loss, backprop, SGD, EMA, then the momentum keys of the
/// key view are pushed. Throws StateError when the queue is not full for the
/// look/supcon objectives and NumericError on a non-finite loss.
StepMetrics train_step(TrainContext& ctx, const Batch& batch, int epoch);

struct TrainLogRow {
  int epoch = 0;
  double loss = 0.0;
  double clamp_frac = 0.0;
  std::size_t k = 0;
  double tau = 0.0;
  double lr = 0.0;
  std::optional<double> knn_acc;
  double seconds = 0.0;
};

struct TrainLog {
  std::vector<TrainLogRow> rows;

  /// Header `epoch,loss,clamp_frac,k,tau,lr,knn_acc,seconds`.
  void write_csv(std::ostream& out, bool with_wallclock) const;
};

struct TrainResult {
  ModelState state;
  TrainLog log;
  std::optional<MemoryQueue> queue;
};

using EpochCallback = std::function<void(const TrainLogRow&)>;

/// Prefill then `epochs` passes of shuffled full batches over the train split.
TrainResult train_run(const LabeledDataset& data, const TrainConfig& cfg,
                      const EpochCallback& on_epoch = {});

/// Builds the initial context (model, optional classifier, queue) without training.
TrainContext make_context(const LabeledDataset& data, const TrainConfig& cfg);

/// Fills the queue from a seeded pass over the train split.
void prefill_from_train(TrainContext& ctx, const LabeledDataset& data);

/// Weighted kNN vote: score_c = sum over the k most similar bank rows of
/// exp(sim / tau) [label = c]; ties between classes go to the smaller id,
/// ties between bank rows to the smaller row index. With exclude_self the
/// queries are the bank and row i never votes for query i.
std::vector<Label> knn_predict(const Matrix& bank, std::span<const Label> bank_labels,
                               const Matrix& queries, std::size_t k, double tau,
                               std::size_t num_classes, bool exclude_self = false);

double knn_monitor(const Matrix& bank, std::span<const Label> bank_labels, const Matrix& queries,
                   std::span<const Label> query_labels, std::size_t k, double tau,
                   std::size_t num_classes, bool exclude_self = false);

/// Monitor protocol on a model: bank = momentum embeddings of the train split,
/// queries = momentum embeddings of (at most max_queries) validation rows.
double knn_monitor_model(const ModelState& state, const LabeledDataset& data, std::size_t k,
                         double tau, std::size_t max_queries);

double accuracy(std::span<const Label> predicted, std::span<const Label> truth);

}  // namespace look
