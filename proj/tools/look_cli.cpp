// look_cli: data generation, pre-training, evaluation and analysis runs.

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "look/config.hpp"
#include "look/dataset.hpp"
#include "look/error.hpp"
#include "look/evalsuite.hpp"
#include "look/model.hpp"
#include "look/trainer.hpp"

namespace fs = std::filesystem;

namespace {

using namespace look;

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;

constexpr std::array<std::size_t, 12> kCoverageRows{1, 2, 3, 4, 5, 8, 12, 16, 20, 24, 28, 32};

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string data_path;
  std::string checkpoint;
  std::string out;
  std::string report;
};

void add_config_flags(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config_path, "key = value configuration file");
  sub->add_option("--set", c.overrides, "override one key, e.g. --set epochs=5")->take_all();
}

RunConfig load_run_config(const Common& c) {
  RunConfig cfg = c.config_path.empty() ? parse_config("") : load_config_file(c.config_path);
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (!c.data_path.empty()) cfg.data_path = c.data_path;
  cfg.resolve();
  cfg.validate();
  cfg.probe.threads = threads_from_env();
  return cfg;
}

void ensure_dir(const fs::path& dir) {
  if (dir.empty()) return;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory '" + dir.string() + "': " + ec.message());
}

void write_resolved(const RunConfig& cfg, const fs::path& dir, const std::string& command) {
  ensure_dir(dir);
  save_config_file(cfg, (dir / (command + ".resolved.cfg")).string());
}

std::ofstream open_out(const fs::path& path) {
  ensure_dir(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  return out;
}

// Data file if one is configured, otherwise the synthetic benchmark. Files
// carry no splits, so they get the same stratified splits as generation.
LabeledDataset obtain_data(const RunConfig& cfg) {
  if (cfg.data_path.empty()) return gen_synthetic(cfg.data, cfg.data_seed).data;
  LabeledDataset d = load_dataset(cfg.data_path, format_from_path(cfg.data_path));
  assign_splits(d, cfg.data.test_fraction, cfg.data.val_fraction, cfg.data_seed);
  return d;
}

ModelState load_model(const std::string& path) {
  if (path.empty()) throw ConfigError("--checkpoint is required");
  return load_checkpoint_file(path);
}

LabeledDataset downstream(const RunConfig& cfg, const LabeledDataset& data, const std::string& task) {
  if (task == "sub") {
    return make_downstream_task(data, cfg.downstream_per_subclass, cfg.data.test_fraction, cfg.data.val_fraction,
                                cfg.data_seed);
  }
  if (task == "label") {
    LabeledDataset out = data;
    assign_splits(out, cfg.data.test_fraction, cfg.data.val_fraction, cfg.data_seed);
    return out;
  }
  throw ConfigError("--task must be sub or label, got '" + task + "'");
}

void append_report(const EvalReport& r, const std::string& path) {
  if (path.empty()) return;
  ensure_dir(fs::path(path).parent_path());
  const bool fresh = !fs::exists(path) || fs::file_size(path) == 0;
  std::ofstream out(path, std::ios::app | std::ios::binary);
  if (!out) throw DataError("cannot append to '" + path + "'");
  r.write_csv(out, fresh);
}

void print_report(const EvalReport& r) {
  for (const auto& [k, v] : r.params) std::printf("%s %s\n", k.c_str(), v.c_str());
  for (const auto& [k, v] : r.metrics) std::printf("%s %.6f\n", k.c_str(), v);
  for (const auto& w : r.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
}

fs::path report_dir(const Common& c) {
  if (!c.report.empty()) return fs::path(c.report).parent_path();
  return fs::path(c.out);
}

int cmd_gen_data(const Common& c) {
  const RunConfig cfg = load_run_config(c);
  const std::string out = c.out.empty() ? "data.lkbin" : c.out;
  const SyntheticDataset s = gen_synthetic(cfg.data, cfg.data_seed);
  ensure_dir(fs::path(out).parent_path());
  save_dataset(s.data, out, format_from_path(out));
  write_resolved(cfg, fs::path(out).parent_path(), "gen-data");
  std::printf("wrote %zu rows (%zu classes, %zu sub-classes, d=%zu) to %s\n", s.data.size(), s.data.num_classes,
              s.data.num_subclasses, s.data.dim(), out.c_str());
  return 0;
}

int cmd_pretrain(const Common& c, const std::string& objective) {
  RunConfig cfg = load_run_config(c);
  if (!objective.empty()) cfg.train.objective = parse_objective(objective);
  const fs::path dir = c.out.empty() ? fs::path(cfg.out_dir) : fs::path(c.out);
  cfg.out_dir = dir.string();
  const LabeledDataset data = obtain_data(cfg);
  write_resolved(cfg, dir, "pretrain");
  const TrainResult res = train_run(data, cfg.train, [](const TrainLogRow& row) {
    std::fprintf(stderr, "epoch %d loss %.6f clamp %.4f k %zu lr %.4g%s\n", row.epoch, row.loss, row.clamp_frac,
                 row.k, row.lr, row.knn_acc ? (" knn " + std::to_string(*row.knn_acc)).c_str() : "");
  });
  save_checkpoint_file(res.state, (dir / "model.ckpt").string());
  auto log = open_out(dir / "train_log.csv");
  res.log.write_csv(log, cfg.train.record_wallclock);
  std::printf("checkpoint %s\n", (dir / "model.ckpt").string().c_str());
  return 0;
}

int cmd_eval_knn(const Common& c) {
  const RunConfig cfg = load_run_config(c);
  const ModelState state = load_model(c.checkpoint);
  const LabeledDataset data = obtain_data(cfg);
  const double acc =
      knn_monitor_model(state, data, cfg.train.monitor_k, cfg.train.monitor_tau, cfg.train.monitor_max_queries);
  EvalReport r;
  r.protocol = "knn_monitor";
  r.seed = cfg.seed;
  r.params.emplace_back("k", std::to_string(cfg.train.monitor_k));
  r.params.emplace_back("tau", std::to_string(cfg.train.monitor_tau));
  r.metrics.emplace_back("knn_acc", acc);
  append_report(r, c.report);
  if (!c.report.empty()) write_resolved(cfg, report_dir(c), "eval-knn");
  std::printf("knn_acc %.6f\n", acc);
  return 0;
}

int cmd_probe(const Common& c, const std::string& task, bool finetune, const std::string& source) {
  RunConfig cfg = load_run_config(c);
  if (!source.empty()) cfg.feature_source = parse_feature_source(source);
  const ModelState state = load_model(c.checkpoint);
  const LabeledDataset t = downstream(cfg, obtain_data(cfg), task);
  EvalReport r = finetune ? finetune_probe(state, t, cfg.probe)
                          : linear_probe(extract_feature_splits(state, t, cfg.feature_source), cfg.probe);
  r.params.emplace_back("feature_source", to_string(cfg.feature_source));
  r.params.emplace_back("task", task);
  append_report(r, c.report);
  if (!c.report.empty()) write_resolved(cfg, report_dir(c), finetune ? "finetune" : "probe");
  print_report(r);
  return 0;
}

int cmd_mem_transfer(const Common& c, const std::string& task, const std::string& source) {
  RunConfig cfg = load_run_config(c);
  if (!source.empty()) cfg.feature_source = parse_feature_source(source);
  const ModelState state = load_model(c.checkpoint);
  const LabeledDataset t = downstream(cfg, obtain_data(cfg), task);
  EvalReport r = memory_transfer_eval(extract_feature_splits(state, t, cfg.feature_source), cfg.memory);
  r.params.emplace_back("feature_source", to_string(cfg.feature_source));
  r.params.emplace_back("task", task);
  append_report(r, c.report);
  if (!c.report.empty()) write_resolved(cfg, report_dir(c), "mem-transfer");
  print_report(r);
  return 0;
}

std::size_t parse_assignment(const std::string& token, const std::string& key) {
  const std::string prefix = key + "=";
  if (token.rfind(prefix, 0) != 0) throw ConfigError("--coverage expects c=.. q=.. n=.., got '" + token + "'");
  const std::string v = token.substr(prefix.size());
  std::size_t pos = 0;
  unsigned long long x = 0;
  try {
    x = std::stoull(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty() || v[0] == '-') throw ConfigError("--coverage: bad value in '" + token + "'");
  return static_cast<std::size_t>(x);
}

std::vector<std::size_t> strided(const std::vector<std::size_t>& rows, std::size_t cap) {
  if (cap == 0 || rows.size() <= cap) return rows;
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < cap; ++i) out.push_back(rows[i * rows.size() / cap]);
  return out;
}

int cmd_analyze(const Common& c, const std::vector<std::string>& coverage, std::size_t cov_q, std::size_t cov_n,
                std::size_t falling_k, std::size_t purity_k) {
  if (!coverage.empty()) {
    if (coverage.size() != 3) throw ConfigError("--coverage expects c=.. q=.. n=..");
    const std::size_t cc = parse_assignment(coverage[0], "c");
    const std::size_t q = parse_assignment(coverage[1], "q");
    const std::size_t n = parse_assignment(coverage[2], "n");
    std::printf("%.10f\n", coverage_probability(cc, q, n));
    return 0;
  }
  const RunConfig cfg = load_run_config(c);
  const ModelState state = load_model(c.checkpoint);
  const LabeledDataset data = obtain_data(cfg);
  const fs::path dir = c.out.empty() ? fs::path(cfg.out_dir) : fs::path(c.out);
  write_resolved(cfg, dir, "analyze");

  auto rows = data.indices(Split::kTest);
  if (rows.empty()) rows = data.indices(Split::kTrain);
  const Matrix z = extract_features(state, data.x.gather_rows(rows), cfg.feature_source);
  const auto y = data.labels_at(rows);

  const DistanceStats dist = intra_inter_distance(z, y);
  auto dist_out = open_out(dir / "intra_inter.csv");
  write_distance_csv(dist, dist_out);
  for (const auto& w : dist.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());

  // Falling ratio over a queue-sized bank of momentum keys from the train split.
  const auto bank_rows = strided(data.indices(Split::kTrain), cfg.train.queue_capacity);
  const Matrix bank = forward_momentum(state, data.x.gather_rows(bank_rows));
  const std::size_t fk = falling_k > 0 ? falling_k : cfg.train.schedule.k_end;
  const FallingRatio fr = falling_ratio(bank, data.labels_at(bank_rows), fk);
  auto fr_out = open_out(dir / "falling_ratio.csv");
  write_falling_ratio_csv(fr, fr_out);
  for (const auto& w : fr.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());

  std::printf("intra %.6f +- %.6f\ninter %.6f +- %.6f\nfalling_ratio %.6f (k=%zu)\n", dist.intra_mean,
              dist.intra_sd, dist.inter_mean, dist.inter_sd, fr.class_mean, fr.k_used);

  if (data.has_sublabels()) {
    std::vector<Label> sub;
    for (std::size_t i : rows) sub.push_back(data.y_sub[i]);
    const FallingRatio purity = falling_ratio(z, sub, purity_k);
    auto p_out = open_out(dir / "subclass_purity.csv");
    write_falling_ratio_csv(purity, p_out);
    std::printf("subclass_purity %.6f (k=%zu)\n", purity.sample_mean, purity.k_used);
  }

  auto cov_out = open_out(dir / "coverage.csv");
  cov_out << "c,q,n,probability\n";
  for (std::size_t cc : kCoverageRows) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%zu,%zu,%zu,%.10f\n", cc, cov_q, cov_n, coverage_probability(cc, cov_q, cov_n));
    cov_out << buf;
  }
  return 0;
}

int cmd_export(const Common& c, const std::string& source) {
  RunConfig cfg = load_run_config(c);
  if (!source.empty()) cfg.feature_source = parse_feature_source(source);
  const ModelState state = load_model(c.checkpoint);
  const LabeledDataset data = obtain_data(cfg);
  const fs::path out = c.out.empty() ? fs::path("embeddings.csv") : fs::path(c.out);
  auto f = open_out(out);
  write_embedding_csv(extract_features(state, data.x, cfg.feature_source), data, f);
  write_resolved(cfg, out.parent_path(), "export-embeddings");
  std::printf("wrote %zu embeddings to %s\n", data.size(), out.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LOOK pre-training and analysis"};
  app.require_subcommand(1);
  app.fallthrough(false);

  Common c;
  std::string objective, task = "sub", source;
  bool finetune = false;
  std::vector<std::string> coverage;
  std::size_t cov_q = 65536, cov_n = 65, falling_k = 0, purity_k = 10;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic benchmark");
  add_config_flags(gen, c);
  gen->add_option("--out", c.out, "output dataset (.lkbin or .csv)");

  auto* pre = app.add_subcommand("pretrain", "pre-train an encoder");
  add_config_flags(pre, c);
  pre->add_option("--objective", objective, "look, ce or supcon");
  pre->add_option("--data", c.data_path, "dataset file; synthetic when omitted");
  pre->add_option("--out", c.out, "output directory");

  auto* knn = app.add_subcommand("eval-knn", "weighted kNN monitor accuracy");
  auto* probe = app.add_subcommand("probe", "linear probe on a downstream task");
  auto* mem = app.add_subcommand("mem-transfer", "memory-based transfer");
  auto* ana = app.add_subcommand("analyze", "distances, falling ratio, coverage table");
  auto* exp = app.add_subcommand("export-embeddings", "write embeddings as CSV");
  for (auto* sub : {knn, probe, mem, ana, exp}) {
    add_config_flags(sub, c);
    sub->add_option("--checkpoint", c.checkpoint, "model checkpoint");
    sub->add_option("--data", c.data_path, "dataset file; synthetic when omitted");
  }
  for (auto* sub : {knn, probe, mem}) sub->add_option("--report", c.report, "append the report to this CSV");
  for (auto* sub : {probe, mem}) sub->add_option("--task", task, "sub (sub-class task) or label");
  for (auto* sub : {probe, mem, ana, exp}) sub->add_option("--features", source, "encoder or embedding");
  probe->add_flag("--finetune", finetune, "also update the encoder");
  ana->add_option("--out", c.out, "output directory");
  ana->add_option("--coverage", coverage, "only print coverage for c=.. q=.. n=..")->expected(3);
  ana->add_option("--coverage-q", cov_q, "queue size for the coverage table");
  ana->add_option("--coverage-n", cov_n, "draws for the coverage table");
  ana->add_option("--falling-k", falling_k, "k for the falling ratio (default knn_k_end)");
  ana->add_option("--purity-k", purity_k, "k for sub-class purity");
  exp->add_option("--out", c.out, "output CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return kExitUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(c);
    if (pre->parsed()) return cmd_pretrain(c, objective);
    if (knn->parsed()) return cmd_eval_knn(c);
    if (probe->parsed()) return cmd_probe(c, task, finetune, source);
    if (mem->parsed()) return cmd_mem_transfer(c, task, source);
    if (ana->parsed()) return cmd_analyze(c, coverage, cov_q, cov_n, falling_k, purity_k);
    if (exp->parsed()) return cmd_export(c, source);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitData;
  }
  return kExitUsage;
}
