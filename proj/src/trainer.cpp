#include "look/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <ostream>

#include "look/error.hpp"
#include "look/topk.hpp"
#include "look/objectives.hpp"

namespace look {

std::string to_string(Objective o) {
  switch (o) {
    case Objective::kLook:
      return "look";
    case Objective::kCe:
      return "ce";
    case Objective::kSupCon:
      return "supcon";
  }
  return "look";
}

Objective parse_objective(const std::string& text) {
  if (text == "look") return Objective::kLook;
  if (text == "ce") return Objective::kCe;
  if (text == "supcon") return Objective::kSupCon;
  throw ConfigError("objective must be one of look, ce, supcon; got '" + text + "'");
}

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (queue_capacity < 1) throw ConfigError("queue_capacity must be >= 1");
  if (objective != Objective::kCe && batch_size > queue_capacity) {
    throw ConfigError("batch_size (" + std::to_string(batch_size) + ") must not exceed queue_capacity (" +
                      std::to_string(queue_capacity) + ")");
  }
  if (!(ema_momentum >= 0.0 && ema_momentum <= 1.0)) throw ConfigError("ema_momentum must lie in [0, 1]");
  if (!(clamp_epsilon > 0.0 && clamp_epsilon < 1.0)) throw ConfigError("clamp_epsilon must lie in (0, 1)");
  if (!(sgd_momentum >= 0.0 && sgd_momentum < 1.0)) throw ConfigError("sgd_momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (!(aug_sigma >= 0.0)) throw ConfigError("aug_sigma must be >= 0");
  if (!(aug_mask_rate >= 0.0 && aug_mask_rate < 1.0)) throw ConfigError("aug_mask_rate must lie in [0, 1)");
  if (monitor_every < 0) throw ConfigError("monitor_every must be >= 0");
  if (monitor_k < 1) throw ConfigError("monitor_k must be >= 1");
  if (!(monitor_tau > 0.0)) throw ConfigError("monitor_tau must be > 0");
  schedule.validate();
  if (schedule.total_epochs != epochs) {
    throw ConfigError("schedule total_epochs (" + std::to_string(schedule.total_epochs) +
                      ") must equal epochs (" + std::to_string(epochs) + ")");
  }
  encoder.validate("encoder");
  projector.validate("projector");
  predictor.validate("predictor");
}

void SgdMomentum::step(const std::vector<Matrix*>& params, const std::vector<const Matrix*>& grads,
                       double lr, const std::vector<bool>& decay) {
  if (params.size() != grads.size()) throw ShapeError("sgd: params/grads count mismatch");
  if (!decay.empty() && decay.size() != params.size()) throw ShapeError("sgd: decay mask size mismatch");
  if (velocity_.empty()) {
    for (const Matrix* p : params) velocity_.emplace_back(p->rows(), p->cols());
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i] == nullptr || grads[i]->empty()) continue;
    auto w = params[i]->values();
    auto v = velocity_[i].values();
    const double wd = decay.empty() || decay[i] ? weight_decay_ : 0.0;
    const auto g = grads[i]->values();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j] + wd * w[j];
      v[j] = momentum_ * v[j] + gj;
      w[j] -= lr * v[j];
    }
  }
}

TrainContext::TrainContext(TrainConfig config, ModelState initial)
    : cfg(std::move(config)),
      state(std::move(initial)),
      optimizer(cfg.sgd_momentum, cfg.weight_decay),
      aug_rng(cfg.seed ^ 0xa06ULL) {}

namespace {

double finite_or_throw(double v, const char* what, std::uint64_t step) {
  if (!std::isfinite(v)) {
    throw NumericError(std::string("non-finite ") + what + " at step " + std::to_string(step));
  }
  return v;
}

void apply_gradients(TrainContext& ctx, const OnlineForward& fwd, double lr) {
  std::vector<const Matrix*> grads;
  grads.reserve(fwd.param_nodes.size());
  for (NodeId id : fwd.param_nodes) grads.push_back(&fwd.tape.grad(id));
  for (const Matrix* g : grads) {
    if (!g->empty() && !g->all_finite()) {
      throw NumericError("non-finite gradient at step " + std::to_string(ctx.state.step));
    }
  }
  ctx.optimizer.step(online_parameters(ctx.state), grads, lr);
}

}  // namespace

StepMetrics train_step(TrainContext& ctx, const Batch& batch, int epoch) {
  const TrainConfig& cfg = ctx.cfg;
  const std::size_t n = batch.x.rows();
  if (n == 0 || batch.y.size() != n) throw ShapeError("train_step: empty or mislabeled batch");
  const ScheduleValues sv = schedule_at(cfg.schedule, epoch);
  StepMetrics m;
  m.k = sv.k;
  m.tau = sv.tau;
  m.lr = sv.lr;

  const bool uses_queue = cfg.objective != Objective::kCe;
  if (uses_queue && (!ctx.queue || !ctx.queue->full())) {
    throw StateError("train_step: queue must be prefilled to capacity before training");
  }

  const Matrix query_view =
      cfg.two_views ? augment_rows(batch.x, ctx.aug_rng, cfg.aug_sigma, cfg.aug_mask_rate) : batch.x;
  OnlineForward fwd = forward_online(ctx.state, query_view);

  if (cfg.objective == Objective::kCe) {
    const CrossEntropyResult ce = ce_loss(fwd.logits(), batch.y);
    m.loss = finite_or_throw(ce.loss, "cross-entropy loss", ctx.state.step);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < n; ++i) {
      auto row = fwd.logits().row(i);
      const auto pred = static_cast<Label>(std::max_element(row.begin(), row.end()) - row.begin());
      if (pred == batch.y[i]) ++correct;
    }
    m.train_acc = static_cast<double>(correct) / static_cast<double>(n);
    fwd.tape.backward(*fwd.logits_node, ce.grad);
  } else {
    MemoryQueue& queue = *ctx.queue;
    // Leave-one-out: the current batch has not been pushed yet.
    const std::uint64_t batch_first_seq = queue.next_seq();
    if (queue.holds_seq_at_or_after(batch_first_seq)) {
      throw StateError("train_step: queue already holds current-batch entries");
    }
    const Matrix& queries = fwd.p_z();
    Matrix seed(n, queries.cols());
    double loss_sum = 0.0;
    std::size_t flagged = 0;
    std::size_t counted = 0;
    const double inv_n = 1.0 / static_cast<double>(n);
    if (cfg.objective == Objective::kLook) {
      const std::vector<NeighborSet> neighbors = topk_batch(queue, queries, sv.k);
      for (std::size_t i = 0; i < n; ++i) {
        const LookLossResult r = look_loss(queries.row(i), batch.y[i], neighbors[i], sv.tau, cfg.clamp_epsilon);
        loss_sum += r.loss;
        ++counted;
        if (r.clamped) ++flagged;
        auto dst = seed.row(i);
        for (std::size_t c = 0; c < dst.size(); ++c) dst[c] = r.grad_wrt_query[c] * inv_n;
      }
    } else {
      std::vector<std::optional<SupConResult>> results(n);
      for (std::size_t i = 0; i < n; ++i) {
        results[i] = supcon_loss(queries.row(i), batch.y[i], queue, sv.tau);
        if (!results[i]) ++flagged;
      }
      const std::size_t kept = n - flagged;
      const double inv_kept = kept == 0 ? 0.0 : 1.0 / static_cast<double>(kept);
      for (std::size_t i = 0; i < n; ++i) {
        if (!results[i]) continue;
        loss_sum += results[i]->loss;
        ++counted;
        auto dst = seed.row(i);
        for (std::size_t c = 0; c < dst.size(); ++c) dst[c] = results[i]->grad_wrt_query[c] * inv_kept;
      }
    }
    m.loss = counted == 0 ? 0.0 : loss_sum / static_cast<double>(counted);
    finite_or_throw(m.loss, "loss", ctx.state.step);
    m.clamp_frac = static_cast<double>(flagged) / static_cast<double>(n);
    fwd.tape.backward(fwd.p_node, seed);
  }

  apply_gradients(ctx, fwd, sv.lr);
  ema_update(ctx.state, cfg.ema_momentum);

  if (uses_queue) {
    const Matrix key_view =
        cfg.two_views ? augment_rows(batch.x, ctx.aug_rng, cfg.aug_sigma, cfg.aug_mask_rate) : batch.x;
    ctx.queue->push_batch(forward_momentum(ctx.state, key_view), batch.y);
  }
  return m;
}

void TrainLog::write_csv(std::ostream& out, bool with_wallclock) const {
  out << "epoch,loss,clamp_frac,k,tau,lr,knn_acc,seconds\n";
  char buf[256];
  for (const auto& r : rows) {
    char acc[32] = "nan";
    if (r.knn_acc) std::snprintf(acc, sizeof acc, "%.6f", *r.knn_acc);
    std::snprintf(buf, sizeof buf, "%d,%.10g,%.6f,%zu,%.6g,%.6g,%s,%.3f\n", r.epoch, r.loss,
                  r.clamp_frac, r.k, r.tau, r.lr, acc, with_wallclock ? r.seconds : 0.0);
    out << buf;
  }
}

namespace {

std::vector<std::size_t> permuted(std::vector<std::size_t> rows, std::uint64_t seed, std::uint64_t tag) {
  std::seed_seq seq{seed, tag};
  std::mt19937_64 rng(seq);
  std::shuffle(rows.begin(), rows.end(), rng);
  return rows;
}

Batch make_batch(const LabeledDataset& data, std::span<const std::size_t> rows) {
  return Batch{data.x.gather_rows(rows), data.labels_at(rows)};
}

constexpr std::uint64_t kPrefillTag = 0xfeed;

}  // namespace

TrainContext make_context(const LabeledDataset& data, const TrainConfig& cfg) {
  cfg.validate();
  const std::size_t n_train = data.indices(Split::kTrain).size();
  if (cfg.encoder.in_dim() != data.dim()) {
    throw ConfigError("encoder input width " + std::to_string(cfg.encoder.in_dim()) +
                      " != dataset dim " + std::to_string(data.dim()));
  }
  if (cfg.batch_size > n_train) throw ConfigError("batch_size exceeds the train split size");
  if (cfg.objective != Objective::kCe && cfg.queue_capacity >= n_train) {
    throw ConfigError("queue_capacity (" + std::to_string(cfg.queue_capacity) +
                      ") must be smaller than the train split (" + std::to_string(n_train) + ")");
  }
  ModelState state = init_model(cfg.encoder, cfg.projector, cfg.predictor, cfg.seed);
  if (cfg.objective == Objective::kCe) attach_classifier(state, data.num_classes, cfg.seed);
  TrainContext ctx(cfg, std::move(state));
  if (cfg.objective != Objective::kCe) ctx.queue.emplace(cfg.queue_capacity, ctx.state.embedding_dim());
  return ctx;
}

void prefill_from_train(TrainContext& ctx, const LabeledDataset& data) {
  if (!ctx.queue) return;
  const auto order = permuted(data.indices(Split::kTrain), ctx.cfg.seed, kPrefillTag);
  const std::size_t need = ctx.queue->capacity();
  std::size_t pos = 0;
  prefill(*ctx.queue, ctx.state, [&]() -> std::optional<Batch> {
    if (pos >= need) return std::nullopt;
    const std::size_t n = std::min(ctx.cfg.batch_size, need - pos);
    Batch b = make_batch(data, std::span<const std::size_t>(order).subspan(pos, n));
    pos += n;
    return b;
  });
}

TrainResult train_run(const LabeledDataset& data, const TrainConfig& cfg, const EpochCallback& on_epoch) {
  TrainContext ctx = make_context(data, cfg);
  prefill_from_train(ctx, data);
  const auto train_rows = data.indices(Split::kTrain);
  TrainLog log;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const auto order = permuted(train_rows, cfg.seed, static_cast<std::uint64_t>(epoch));
    TrainLogRow row;
    row.epoch = epoch;
    double loss_sum = 0.0;
    double clamp_sum = 0.0;
    std::size_t steps = 0;
    // The trailing partial batch is dropped.
    for (std::size_t pos = 0; pos + cfg.batch_size <= order.size(); pos += cfg.batch_size) {
      const Batch b = make_batch(data, std::span<const std::size_t>(order).subspan(pos, cfg.batch_size));
      const StepMetrics sm = train_step(ctx, b, epoch);
      loss_sum += sm.loss;
      clamp_sum += sm.clamp_frac;
      ++steps;
    }
    const ScheduleValues sv = schedule_at(cfg.schedule, epoch);
    row.loss = steps == 0 ? 0.0 : loss_sum / static_cast<double>(steps);
    row.clamp_frac = steps == 0 ? 0.0 : clamp_sum / static_cast<double>(steps);
    row.k = sv.k;
    row.tau = sv.tau;
    row.lr = sv.lr;
    const bool last = epoch + 1 == cfg.epochs;
    if (last || (cfg.monitor_every > 0 && (epoch + 1) % cfg.monitor_every == 0)) {
      row.knn_acc = knn_monitor_model(ctx.state, data, cfg.monitor_k, cfg.monitor_tau, cfg.monitor_max_queries);
    }
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    log.rows.push_back(row);
    if (on_epoch) on_epoch(row);
  }
  return TrainResult{std::move(ctx.state), std::move(log), std::move(ctx.queue)};
}

std::vector<Label> knn_predict(const Matrix& bank, std::span<const Label> bank_labels, const Matrix& queries,
                               std::size_t k, double tau, std::size_t num_classes, bool exclude_self) {
  if (bank.rows() == 0) throw StateError("knn_predict: empty bank");
  if (bank.rows() != bank_labels.size()) throw ShapeError("knn_predict: bank rows != labels");
  if (!(tau > 0.0)) throw ConfigError("knn_predict: tau must be > 0");
  if (exclude_self && queries.rows() != bank.rows()) {
    throw ShapeError("knn_predict: exclude_self needs the queries to be the bank");
  }
  for (Label y : bank_labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      throw ContractError("knn_predict: bank label outside [0, num_classes)");
    }
  }
  const std::size_t available = exclude_self ? bank.rows() - 1 : bank.rows();
  const std::size_t keff = std::min(k, available);
  std::vector<Label> out(queries.rows(), 0);
  constexpr std::size_t kBlock = 64;
  std::vector<double> scratch;
  std::vector<double> sims;
  std::vector<double> score(num_classes);
  const std::size_t nb = bank.rows();
  for (std::size_t start = 0; start < queries.rows(); start += kBlock) {
    const std::size_t end = std::min(queries.rows(), start + kBlock);
    matmul_bt_rows(queries, start, end, bank, sims);
    for (std::size_t qi = start; qi < end; ++qi) {
      const std::span<const double> s(sims.data() + (qi - start) * nb, nb);
      const auto top = topk_indices(s, keff, [](std::size_t j) { return j; }, scratch, exclude_self ? qi : kNoSkip);
      std::fill(score.begin(), score.end(), 0.0);
      for (std::size_t j : top) score[static_cast<std::size_t>(bank_labels[j])] += std::exp(s[j] / tau);
      out[qi] = static_cast<Label>(std::max_element(score.begin(), score.end()) - score.begin());
    }
  }
  return out;
}

double accuracy(std::span<const Label> predicted, std::span<const Label> truth) {
  if (predicted.size() != truth.size()) throw ShapeError("accuracy: length mismatch");
  if (truth.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hit += predicted[i] == truth[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

double knn_monitor(const Matrix& bank, std::span<const Label> bank_labels, const Matrix& queries,
                   std::span<const Label> query_labels, std::size_t k, double tau, std::size_t num_classes,
                   bool exclude_self) {
  const auto pred = knn_predict(bank, bank_labels, queries, k, tau, num_classes, exclude_self);
  return accuracy(pred, query_labels);
}

double knn_monitor_model(const ModelState& state, const LabeledDataset& data, std::size_t k, double tau,
                         std::size_t max_queries) {
  const auto train = data.indices(Split::kTrain);
  auto val = data.indices(Split::kVal);
  if (val.empty()) val = data.indices(Split::kTest);
  if (val.empty()) throw StateError("knn monitor: no validation rows");
  if (max_queries > 0 && val.size() > max_queries) {
    // Evenly strided subsample keeps every class represented.
    std::vector<std::size_t> picked;
    for (std::size_t i = 0; i < max_queries; ++i) picked.push_back(val[i * val.size() / max_queries]);
    val = std::move(picked);
  }
  const Matrix bank = forward_momentum(state, data.x.gather_rows(train));
  const Matrix queries = forward_momentum(state, data.x.gather_rows(val));
  return knn_monitor(bank, data.labels_at(train), queries, data.labels_at(val), k, tau, data.num_classes);
}

}  // namespace look
