#include "look/evalsuite.hpp"

#include <algorithm>
#include <atomic>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <numeric>
#include <ostream>
#include <string>
#include <thread>

#include "look/error.hpp"
#include "look/topk.hpp"
#include "look/objectives.hpp"
#include "look/trainer.hpp"

namespace look {

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_short(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

std::string csv_safe(std::string s) {
  std::replace(s.begin(), s.end(), ',', ';');
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

void check_labels(std::span<const Label> labels, std::size_t num_classes, const char* what) {
  for (Label y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      throw ContractError(std::string(what) + ": label " + std::to_string(y) + " outside [0, " +
                          std::to_string(num_classes) + ")");
    }
  }
}

Matrix vstack(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw ShapeError("vstack: column mismatch");
  std::vector<double> data(a.values().begin(), a.values().end());
  data.insert(data.end(), b.values().begin(), b.values().end());
  return Matrix(a.rows() + b.rows(), a.cols(), std::move(data));
}

std::vector<Label> concat(std::span<const Label> a, std::span<const Label> b) {
  std::vector<Label> out(a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

// Per-dimension statistics of the fitting set; a constant dimension keeps sd 1.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> sd;

  static Standardizer fit(const Matrix& x) {
    Standardizer s;
    const std::size_t d = x.cols();
    s.mean.assign(d, 0.0);
    s.sd.assign(d, 0.0);
    const double n = static_cast<double>(x.rows());
    for (std::size_t r = 0; r < x.rows(); ++r) {
      for (std::size_t c = 0; c < d; ++c) s.mean[c] += x(r, c);
    }
    for (double& m : s.mean) m /= n;
    for (std::size_t r = 0; r < x.rows(); ++r) {
      for (std::size_t c = 0; c < d; ++c) s.sd[c] += (x(r, c) - s.mean[c]) * (x(r, c) - s.mean[c]);
    }
    for (double& v : s.sd) {
      v = std::sqrt(v / n);
      if (!(v > 1e-12)) v = 1.0;
    }
    return s;
  }

  Matrix apply(const Matrix& x) const {
    Matrix out(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
      for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) = (x(r, c) - mean[c]) / sd[c];
    }
    return out;
  }
};

struct GridCell {
  double lr = 0.0;
  double wd = 0.0;
  std::size_t batch = 0;
};

std::vector<GridCell> probe_grid(const ProbeConfig& cfg) {
  std::vector<GridCell> cells;
  for (double lr : cfg.learning_rates) {
    for (double wd : cfg.weight_decays) {
      for (std::size_t bs : cfg.batch_sizes) cells.push_back({lr, wd, bs});
    }
  }
  return cells;
}

double probe_lr(const ProbeConfig& cfg, double lr, int epoch) {
  for (int e : cfg.decay_epochs) {
    if (epoch >= e) lr *= cfg.decay_factor;
  }
  return lr;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t cell, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::seed_seq seq{seed, cell, static_cast<std::uint64_t>(epoch), std::uint64_t{0x9b0e}};
  std::mt19937_64 rng(seq);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

struct LinearHead {
  Matrix weight;  // [d x C]
  Matrix bias;    // [1 x C]

  Matrix logits(const Matrix& x) const {
    Matrix out = matmul(x, weight);
    for (std::size_t r = 0; r < out.rows(); ++r) {
      for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += bias(0, c);
    }
    return out;
  }

  std::vector<Label> predict(const Matrix& x) const {
    const Matrix z = logits(x);
    std::vector<Label> out(z.rows());
    for (std::size_t r = 0; r < z.rows(); ++r) {
      auto row = z.row(r);
      out[r] = static_cast<Label>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    return out;
  }
};

// Softmax regression from a zero start; every example is visited once per
// epoch, the trailing partial batch included.
LinearHead fit_softmax(const Matrix& x, std::span<const Label> y, std::size_t num_classes,
                       const GridCell& cell, const ProbeConfig& cfg, std::uint64_t cell_tag) {
  LinearHead head{Matrix(x.cols(), num_classes), Matrix(1, num_classes)};
  SgdMomentum opt(cfg.momentum, cell.wd);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = probe_lr(cfg, cell.lr, epoch);
    const auto order = epoch_order(x.rows(), cfg.seed, cell_tag, epoch);
    for (std::size_t start = 0; start < order.size(); start += cell.batch) {
      const std::size_t end = std::min(order.size(), start + cell.batch);
      std::span<const std::size_t> rows(order.data() + start, end - start);
      const Matrix xb = x.gather_rows(rows);
      std::vector<Label> yb(rows.size());
      for (std::size_t i = 0; i < rows.size(); ++i) yb[i] = y[rows[i]];
      const CrossEntropyResult ce = ce_loss(head.logits(xb), yb);
      if (!std::isfinite(ce.loss)) throw NumericError("linear probe: non-finite loss");
      Matrix gw = matmul_at(xb, ce.grad);
      Matrix gb(1, num_classes);
      for (std::size_t r = 0; r < ce.grad.rows(); ++r) {
        for (std::size_t c = 0; c < num_classes; ++c) gb(0, c) += ce.grad(r, c);
      }
      opt.step({&head.weight, &head.bias}, {&gw, &gb}, lr);
    }
  }
  return head;
}

template <typename Fn>
void run_cells(std::size_t count, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, count));
  if (threads == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(count);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

void require_all_classes(std::span<const Label> y, std::size_t num_classes, const char* what) {
  std::vector<std::size_t> counts(num_classes, 0);
  for (Label v : y) ++counts[static_cast<std::size_t>(v)];
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (counts[c] == 0) {
      throw DataError(std::string(what) + ": class " + std::to_string(c) + " has no training rows");
    }
  }
}

void check_splits(const FeatureSplits& s, const char* what) {
  if (s.num_classes < 2) throw DataError(std::string(what) + ": need at least two classes");
  if (s.train.rows() != s.y_train.size() || s.val.rows() != s.y_val.size() || s.test.rows() != s.y_test.size()) {
    throw ShapeError(std::string(what) + ": split rows != labels");
  }
  if (s.val.rows() == 0 || s.test.rows() == 0) throw DataError(std::string(what) + ": empty val or test split");
  check_labels(s.y_train, s.num_classes, what);
  check_labels(s.y_val, s.num_classes, what);
  check_labels(s.y_test, s.num_classes, what);
  require_all_classes(s.y_train, s.num_classes, what);
}

void add_grid_params(EvalReport& r, const GridCell& cell) {
  r.params.emplace_back("lr", fmt_short(cell.lr));
  r.params.emplace_back("weight_decay", fmt_short(cell.wd));
  r.params.emplace_back("batch_size", std::to_string(cell.batch));
}

}  // namespace

double EvalReport::metric(const std::string& name) const {
  for (const auto& [k, v] : metrics) {
    if (k == name) return v;
  }
  throw ContractError("EvalReport: no metric '" + name + "' in " + protocol);
}

void EvalReport::write_csv(std::ostream& out, bool header) const {
  if (header) out << "protocol,seed,kind,name,value\n";
  for (const auto& [k, v] : params) out << protocol << ',' << seed << ",param," << k << ',' << csv_safe(v) << '\n';
  for (const auto& [k, v] : metrics) out << protocol << ',' << seed << ",metric," << k << ',' << fmt_double(v) << '\n';
  for (const auto& w : warnings) out << protocol << ',' << seed << ",warning," << csv_safe(w) << ",\n";
}

FeatureSplits make_feature_splits(const Matrix& features, const LabeledDataset& task) {
  if (features.rows() != task.size()) throw ShapeError("make_feature_splits: feature rows != dataset rows");
  FeatureSplits s;
  const auto tr = task.indices(Split::kTrain);
  const auto va = task.indices(Split::kVal);
  const auto te = task.indices(Split::kTest);
  s.train = features.gather_rows(tr);
  s.val = features.gather_rows(va);
  s.test = features.gather_rows(te);
  s.y_train = task.labels_at(tr);
  s.y_val = task.labels_at(va);
  s.y_test = task.labels_at(te);
  s.num_classes = task.num_classes;
  return s;
}

FeatureSplits extract_feature_splits(const ModelState& state, const LabeledDataset& task, FeatureSource source) {
  return make_feature_splits(extract_features(state, task.x, source), task);
}

void ProbeConfig::validate() const {
  if (learning_rates.empty() || weight_decays.empty() || batch_sizes.empty()) {
    throw ConfigError("probe grid must be nonempty");
  }
  for (double lr : learning_rates) {
    if (!(lr > 0.0)) throw ConfigError("probe learning rates must be > 0");
  }
  for (double wd : weight_decays) {
    if (!(wd >= 0.0)) throw ConfigError("probe weight decays must be >= 0");
  }
  for (std::size_t b : batch_sizes) {
    if (b == 0) throw ConfigError("probe batch sizes must be >= 1");
  }
  if (epochs < 1) throw ConfigError("probe epochs must be >= 1");
  if (!(decay_factor > 0.0 && decay_factor <= 1.0)) throw ConfigError("probe decay factor must be in (0, 1]");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("probe momentum must be in [0, 1)");
  if (threads == 0) throw ConfigError("probe threads must be >= 1");
}

EvalReport linear_probe(const FeatureSplits& splits, const ProbeConfig& cfg) {
  cfg.validate();
  check_splits(splits, "linear_probe");
  const auto cells = probe_grid(cfg);

  const Standardizer st = Standardizer::fit(splits.train);
  const Matrix train = st.apply(splits.train);
  const Matrix val = st.apply(splits.val);
  std::vector<double> val_acc(cells.size(), 0.0);
  run_cells(cells.size(), cfg.threads, [&](std::size_t i) {
    const LinearHead head = fit_softmax(train, splits.y_train, splits.num_classes, cells[i], cfg, i);
    val_acc[i] = accuracy(head.predict(val), splits.y_val);
  });
  const std::size_t best =
      static_cast<std::size_t>(std::max_element(val_acc.begin(), val_acc.end()) - val_acc.begin());

  const Matrix full_raw = vstack(splits.train, splits.val);
  const auto full_y = concat(splits.y_train, splits.y_val);
  const Standardizer full_st = Standardizer::fit(full_raw);
  const LinearHead head = fit_softmax(full_st.apply(full_raw), full_y, splits.num_classes, cells[best], cfg, best);

  EvalReport r;
  r.protocol = "linear_probe";
  r.seed = cfg.seed;
  add_grid_params(r, cells[best]);
  r.metrics.emplace_back("val_acc", val_acc[best]);
  r.metrics.emplace_back("test_acc", accuracy(head.predict(full_st.apply(splits.test)), splits.y_test));
  return r;
}

namespace {

struct FinetuneModel {
  Mlp encoder;
  LinearHead head;
  Matrix scale;  // diagonal [h x h], constant
  Matrix shift;  // [1 x h], constant

  std::vector<Label> predict(const Matrix& x) const {
    Matrix h = matmul(mlp_forward(encoder, x, "encoder"), scale);
    for (std::size_t r = 0; r < h.rows(); ++r) {
      for (std::size_t c = 0; c < h.cols(); ++c) h(r, c) += shift(0, c);
    }
    return head.predict(h);
  }
};

FinetuneModel fit_finetune(const Mlp& encoder, const Matrix& x, std::span<const Label> y, std::size_t num_classes,
                           const GridCell& cell, const ProbeConfig& cfg, std::uint64_t cell_tag) {
  FinetuneModel m;
  m.encoder = encoder;
  const Standardizer st = Standardizer::fit(mlp_forward(encoder, x, "encoder"));
  const std::size_t h = encoder.out_dim();
  m.scale = Matrix(h, h);
  m.shift = Matrix(1, h);
  for (std::size_t c = 0; c < h; ++c) {
    m.scale(c, c) = 1.0 / st.sd[c];
    m.shift(0, c) = -st.mean[c] / st.sd[c];
  }
  m.head = LinearHead{Matrix(h, num_classes), Matrix(1, num_classes)};
  SgdMomentum opt(cfg.momentum, cell.wd);

  std::vector<Matrix*> params;
  for (auto& layer : m.encoder.layers) {
    params.push_back(&layer.weight);
    params.push_back(&layer.bias);
  }
  params.push_back(&m.head.weight);
  params.push_back(&m.head.bias);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = probe_lr(cfg, cell.lr, epoch);
    const auto order = epoch_order(x.rows(), cfg.seed, cell_tag, epoch);
    for (std::size_t start = 0; start < order.size(); start += cell.batch) {
      const std::size_t end = std::min(order.size(), start + cell.batch);
      std::span<const std::size_t> rows(order.data() + start, end - start);
      std::vector<Label> yb(rows.size());
      for (std::size_t i = 0; i < rows.size(); ++i) yb[i] = y[rows[i]];

      Tape tape;
      std::vector<NodeId> nodes;
      NodeId cur = tape.leaf(x.gather_rows(rows));
      for (std::size_t l = 0; l < m.encoder.layers.size(); ++l) {
        const NodeId w = tape.leaf(m.encoder.layers[l].weight, true);
        const NodeId b = tape.leaf(m.encoder.layers[l].bias, true);
        nodes.push_back(w);
        nodes.push_back(b);
        cur = tape.add_row_bias(tape.matmul(cur, w), b);
        if (l + 1 < m.encoder.layers.size()) cur = tape.relu(cur);
      }
      cur = tape.add_row_bias(tape.matmul(cur, tape.leaf(m.scale)), tape.leaf(m.shift));
      const NodeId hw = tape.leaf(m.head.weight, true);
      const NodeId hb = tape.leaf(m.head.bias, true);
      nodes.push_back(hw);
      nodes.push_back(hb);
      const NodeId logits = tape.add_row_bias(tape.matmul(cur, hw), hb);
      const CrossEntropyResult ce = ce_loss(tape.value(logits), yb);
      if (!std::isfinite(ce.loss)) throw NumericError("finetune probe: non-finite loss");
      tape.backward(logits, ce.grad);
      std::vector<const Matrix*> grads;
      for (NodeId id : nodes) grads.push_back(&tape.grad(id));
      opt.step(params, grads, lr);
    }
  }
  return m;
}

}  // namespace

EvalReport finetune_probe(const ModelState& state, const LabeledDataset& task, const ProbeConfig& cfg) {
  cfg.validate();
  const auto tr = task.indices(Split::kTrain);
  const auto va = task.indices(Split::kVal);
  const auto te = task.indices(Split::kTest);
  if (task.dim() != state.input_dim()) throw ShapeError("finetune_probe: input dim != encoder input");
  FeatureSplits labels_only;
  labels_only.y_train = task.labels_at(tr);
  labels_only.y_val = task.labels_at(va);
  labels_only.y_test = task.labels_at(te);
  labels_only.num_classes = task.num_classes;
  labels_only.train = Matrix(tr.size(), 0);
  labels_only.val = Matrix(va.size(), 0);
  labels_only.test = Matrix(te.size(), 0);
  check_splits(labels_only, "finetune_probe");

  const Matrix x_train = task.x.gather_rows(tr);
  const Matrix x_val = task.x.gather_rows(va);
  const auto cells = probe_grid(cfg);
  std::vector<double> val_acc(cells.size(), 0.0);
  run_cells(cells.size(), cfg.threads, [&](std::size_t i) {
    const FinetuneModel m =
        fit_finetune(state.encoder, x_train, labels_only.y_train, task.num_classes, cells[i], cfg, i);
    val_acc[i] = accuracy(m.predict(x_val), labels_only.y_val);
  });
  const std::size_t best =
      static_cast<std::size_t>(std::max_element(val_acc.begin(), val_acc.end()) - val_acc.begin());

  const Matrix x_full = vstack(x_train, x_val);
  const auto y_full = concat(labels_only.y_train, labels_only.y_val);
  const FinetuneModel m = fit_finetune(state.encoder, x_full, y_full, task.num_classes, cells[best], cfg, best);

  EvalReport r;
  r.protocol = "finetune_probe";
  r.seed = cfg.seed;
  add_grid_params(r, cells[best]);
  r.metrics.emplace_back("val_acc", val_acc[best]);
  r.metrics.emplace_back("test_acc", accuracy(m.predict(task.x.gather_rows(te)), labels_only.y_test));
  return r;
}

void MemoryTransferConfig::validate() const {
  if (clusters_per_class.empty() || k_values.empty() || temperatures.empty()) {
    throw ConfigError("memory transfer grid must be nonempty");
  }
  for (std::size_t c : clusters_per_class) {
    if (c < 1) throw ConfigError("clusters per class must be >= 1");
  }
  for (std::size_t k : k_values) {
    if (k < 1) throw ConfigError("memory transfer k must be >= 1");
  }
  for (double t : temperatures) {
    if (!(t > 0.0)) throw ConfigError("memory transfer temperature must be > 0");
  }
}

Matrix layer_normalize_rows(const Matrix& features) {
  Matrix out(features.rows(), features.cols());
  const double d = static_cast<double>(features.cols());
  for (std::size_t r = 0; r < features.rows(); ++r) {
    auto in = features.row(r);
    const double mu = std::accumulate(in.begin(), in.end(), 0.0) / d;
    double var = 0.0;
    for (double v : in) var += (v - mu) * (v - mu);
    var /= d;
    if (!(var > 0.0)) continue;  // constant row: no direction, stays zero
    const double inv = 1.0 / std::sqrt(var);
    auto dst = out.row(r);
    for (std::size_t c = 0; c < in.size(); ++c) dst[c] = (in[c] - mu) * inv;
  }
  return normalize_rows(out);
}

std::vector<Label> memory_predict(const ClassMemory& memory, const Matrix& queries, std::size_t k, double tau,
                                  std::size_t num_classes) {
  if (memory.labels.empty()) throw StateError("memory_predict: empty memory");
  return knn_predict(memory.centroids, memory.labels, queries, k, tau, num_classes);
}

EvalReport memory_transfer_eval(const FeatureSplits& splits, const MemoryTransferConfig& cfg) {
  cfg.validate();
  check_splits(splits, "memory_transfer_eval");
  const Matrix train = layer_normalize_rows(splits.train);
  const Matrix val = layer_normalize_rows(splits.val);
  const Matrix test = layer_normalize_rows(splits.test);

  EvalReport r;
  r.protocol = "memory_transfer";
  r.seed = cfg.seed;
  double best_acc = -1.0;
  std::size_t best_c = 0, best_k = 0;
  double best_tau = 0.0;
  for (std::size_t c : cfg.clusters_per_class) {
    const ClassMemory mem = build_class_memory(train, splits.y_train, splits.num_classes, c, cfg.seed);
    for (const auto& w : mem.warnings) r.warnings.push_back("c=" + std::to_string(c) + ": " + w);
    for (std::size_t k : cfg.k_values) {
      for (double tau : cfg.temperatures) {
        const double acc = accuracy(memory_predict(mem, val, k, tau, splits.num_classes), splits.y_val);
        if (acc > best_acc) {
          best_acc = acc;
          best_c = c;
          best_k = k;
          best_tau = tau;
        }
      }
    }
  }

  const Matrix full = vstack(train, val);
  const auto full_y = concat(splits.y_train, splits.y_val);
  const ClassMemory mem = build_class_memory(full, full_y, splits.num_classes, best_c, cfg.seed);
  for (const auto& w : mem.warnings) r.warnings.push_back("final: " + w);

  r.params.emplace_back("clusters_per_class", std::to_string(best_c));
  r.params.emplace_back("k", std::to_string(best_k));
  r.params.emplace_back("tau", fmt_short(best_tau));
  r.metrics.emplace_back("val_acc", best_acc);
  r.metrics.emplace_back("test_acc",
                         accuracy(memory_predict(mem, test, best_k, best_tau, splits.num_classes), splits.y_test));
  r.metrics.emplace_back("majority_acc", majority_baseline(full_y, splits.y_test));
  r.metrics.emplace_back("memory_size", static_cast<double>(mem.labels.size()));
  return r;
}

DistanceStats intra_inter_distance(const Matrix& features, std::span<const Label> labels) {
  if (features.rows() != labels.size()) throw ShapeError("intra_inter_distance: rows != labels");
  if (features.rows() == 0) throw StateError("intra_inter_distance: no rows");
  const Matrix z = normalize_rows(features);
  Label max_label = 0;
  for (Label y : labels) {
    if (y < 0) throw ContractError("intra_inter_distance: negative label");
    max_label = std::max(max_label, y);
  }
  const std::size_t classes = static_cast<std::size_t>(max_label) + 1;
  const std::size_t d = z.cols();
  Matrix sums(classes, d);
  std::vector<double> sq(classes, 0.0);
  std::vector<std::size_t> count(classes, 0);
  for (std::size_t i = 0; i < z.rows(); ++i) {
    const auto c = static_cast<std::size_t>(labels[i]);
    auto row = z.row(i);
    auto s = sums.row(c);
    for (std::size_t j = 0; j < d; ++j) s[j] += row[j];
    sq[c] += dot(row, row);
    ++count[c];
  }

  DistanceStats out;
  std::vector<double> intra;
  for (std::size_t c = 0; c < classes; ++c) {
    if (count[c] == 0) continue;
    if (count[c] < 2) {
      out.warnings.push_back("class " + std::to_string(c) + " has one sample; excluded from intra");
      continue;
    }
    const double n = static_cast<double>(count[c]);
    const double pair_dot = (dot(sums.row(c), sums.row(c)) - sq[c]) / (n * (n - 1.0));
    intra.push_back(1.0 - pair_dot);
  }
  std::vector<double> inter;
  for (std::size_t a = 0; a < classes; ++a) {
    if (count[a] == 0) continue;
    for (std::size_t b = a + 1; b < classes; ++b) {
      if (count[b] == 0) continue;
      const double denom = static_cast<double>(count[a]) * static_cast<double>(count[b]);
      inter.push_back(1.0 - dot(sums.row(a), sums.row(b)) / denom);
    }
  }
  if (inter.empty()) out.warnings.push_back("fewer than two classes; inter distance undefined");

  auto mean_sd = [](const std::vector<double>& v, double& mean, double& sd) {
    if (v.empty()) {
      mean = std::nan("");
      sd = std::nan("");
      return;
    }
    mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double acc = 0.0;
    for (double x : v) acc += (x - mean) * (x - mean);
    sd = std::sqrt(acc / static_cast<double>(v.size()));
  };
  mean_sd(intra, out.intra_mean, out.intra_sd);
  mean_sd(inter, out.inter_mean, out.inter_sd);
  out.intra_classes = intra.size();
  return out;
}

FallingRatio falling_ratio(const Matrix& bank, std::span<const Label> labels, std::size_t k) {
  if (bank.rows() != labels.size()) throw ShapeError("falling_ratio: rows != labels");
  if (bank.rows() < 2) throw StateError("falling_ratio: bank needs at least two rows");
  if (k == 0) throw ConfigError("falling_ratio: k must be >= 1");
  FallingRatio out;
  const std::size_t n = bank.rows();
  out.k_used = k;
  if (k >= n) {
    out.k_used = n - 1;
    out.warnings.push_back("k=" + std::to_string(k) + " >= bank size " + std::to_string(n) + "; clipped to " +
                           std::to_string(n - 1));
  }
  const std::size_t kk = out.k_used;
  const Matrix z = normalize_rows(bank);

  std::vector<double> ratio(n, 0.0);
  std::vector<double> scratch;
  std::vector<double> sims;
  constexpr std::size_t kBlock = 64;
  for (std::size_t start = 0; start < n; start += kBlock) {
    const std::size_t end = std::min(n, start + kBlock);
    matmul_bt_rows(z, start, end, z, sims);
    for (std::size_t qi = start; qi < end; ++qi) {
      const std::span<const double> s(sims.data() + (qi - start) * n, n);
      const auto top = topk_indices(s, kk, [](std::size_t j) { return j; }, scratch, qi);
      std::size_t same = 0;
      for (std::size_t j : top) same += labels[j] == labels[qi] ? 1 : 0;
      ratio[qi] = static_cast<double>(same) / static_cast<double>(kk);
    }
  }

  std::vector<Label> sorted_labels(labels.begin(), labels.end());
  std::sort(sorted_labels.begin(), sorted_labels.end());
  sorted_labels.erase(std::unique(sorted_labels.begin(), sorted_labels.end()), sorted_labels.end());
  std::vector<double> sum(sorted_labels.size(), 0.0);
  std::vector<std::size_t> cnt(sorted_labels.size(), 0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto pos = static_cast<std::size_t>(
        std::lower_bound(sorted_labels.begin(), sorted_labels.end(), labels[i]) - sorted_labels.begin());
    sum[pos] += ratio[i];
    ++cnt[pos];
  }
  for (std::size_t c = 0; c < sorted_labels.size(); ++c) {
    out.per_class.emplace_back(sorted_labels[c], sum[c] / static_cast<double>(cnt[c]));
  }
  std::stable_sort(out.per_class.begin(), out.per_class.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  double cm = 0.0;
  for (const auto& [c, v] : out.per_class) cm += v;
  out.class_mean = cm / static_cast<double>(out.per_class.size());
  out.sample_mean = std::accumulate(ratio.begin(), ratio.end(), 0.0) / static_cast<double>(n);
  return out;
}

double majority_baseline(std::span<const Label> train_labels, std::span<const Label> test_labels) {
  if (train_labels.empty()) throw StateError("majority_baseline: no training labels");
  Label max_label = 0;
  for (Label y : train_labels) {
    if (y < 0) throw ContractError("majority_baseline: negative label");
    max_label = std::max(max_label, y);
  }
  std::vector<std::size_t> counts(static_cast<std::size_t>(max_label) + 1, 0);
  for (Label y : train_labels) ++counts[static_cast<std::size_t>(y)];
  const auto majority = static_cast<Label>(std::max_element(counts.begin(), counts.end()) - counts.begin());
  std::vector<Label> pred(test_labels.size(), majority);
  return accuracy(pred, test_labels);
}

void write_distance_csv(const DistanceStats& d, std::ostream& out) {
  out << "metric,mean,sd\n";
  out << "intra," << fmt_double(d.intra_mean) << ',' << fmt_double(d.intra_sd) << '\n';
  out << "inter," << fmt_double(d.inter_mean) << ',' << fmt_double(d.inter_sd) << '\n';
}

void write_falling_ratio_csv(const FallingRatio& f, std::ostream& out) {
  out << "kind,class,ratio\n";
  for (const auto& [c, v] : f.per_class) out << "class," << c << ',' << fmt_double(v) << '\n';
  out << "class_mean,," << fmt_double(f.class_mean) << '\n';
  out << "sample_mean,," << fmt_double(f.sample_mean) << '\n';
}

void write_embedding_csv(const Matrix& features, const LabeledDataset& data, std::ostream& out) {
  if (features.rows() != data.size()) throw ShapeError("write_embedding_csv: rows != dataset rows");
  out << "id,label,sublabel";
  for (std::size_t j = 0; j < features.cols(); ++j) out << ",e" << j;
  out << '\n';
  for (std::size_t i = 0; i < features.rows(); ++i) {
    out << i << ',' << data.y[i] << ',' << (data.has_sublabels() ? data.y_sub[i] : -1);
    for (double v : features.row(i)) out << ',' << fmt_double(v);
    out << '\n';
  }
}

std::size_t threads_from_env() {
  const char* raw = std::getenv("LOOK_THREADS");
  if (raw == nullptr || *raw == '\0') return 1;
  char* end = nullptr;
  const long v = std::strtol(raw, &end, 10);
  if (*end != '\0' || v < 1 || v > 1024) {
    throw ConfigError(std::string("LOOK_THREADS must be an integer in [1, 1024], got '") + raw + "'");
  }
  return static_cast<std::size_t>(v);
}

}  // namespace look
