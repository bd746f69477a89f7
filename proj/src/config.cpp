#include "look/config.hpp"

#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <set>
#include <sstream>

#include "look/error.hpp"

namespace look {

namespace {

// Raised by value parsers; the caller adds line and key context.
struct ValueError {
  std::string message;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) out.push_back(trim(item));
  if (out.empty() || (out.size() == 1 && out[0].empty())) throw ValueError{"expected a nonempty list"};
  return out;
}

template <typename T>
T parse_integer(const std::string& s) {
  T v{};
  const auto* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (s.empty() || ec != std::errc() || ptr != end) {
    throw ValueError{"expected an integer, got '" + s + "'"};
  }
  return v;
}

double parse_real(const std::string& s) {
  if (s.empty()) throw ValueError{"expected a number, got ''"};
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size() || errno == ERANGE || !std::isfinite(v)) {
    throw ValueError{"expected a finite number, got '" + s + "'"};
  }
  return v;
}

bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ValueError{"expected true or false, got '" + s + "'"};
}

std::string fmt_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Closed or open numeric interval used for range checks.
struct Range {
  double lo = -std::numeric_limits<double>::infinity();
  double hi = std::numeric_limits<double>::infinity();
  bool lo_open = false;
  bool hi_open = false;

  void check(double v) const {
    const bool ok = (lo_open ? v > lo : v >= lo) && (hi_open ? v < hi : v <= hi);
    if (!ok) {
      std::string msg = "value " + fmt_real(v) + " outside " + (lo_open ? "(" : "[") +
                        (std::isinf(lo) ? "-inf" : fmt_real(lo)) + ", " + (std::isinf(hi) ? "inf" : fmt_real(hi)) +
                        (hi_open ? ")" : "]");
      throw ValueError{msg};
    }
  }
};

Range at_least(double lo) { return Range{lo}; }
Range positive() { return Range{0.0, std::numeric_limits<double>::infinity(), true, false}; }
Range closed(double lo, double hi) { return Range{lo, hi, false, false}; }
Range half_open(double lo, double hi) { return Range{lo, hi, false, true}; }
Range open_closed(double lo, double hi) { return Range{lo, hi, true, false}; }
Range open(double lo, double hi) { return Range{lo, hi, true, true}; }

struct Entry {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

// Field accessors are generic lambdas returning a reference so the same
// accessor serves both the setter and the const getter.
template <typename Ref>
Entry real(std::string key, Ref ref, Range range) {
  return {std::move(key),
          [ref, range](RunConfig& c, const std::string& s) {
            const double v = parse_real(s);
            range.check(v);
            ref(c) = v;
          },
          [ref](const RunConfig& c) { return fmt_real(ref(c)); }};
}

template <typename T, typename Ref>
Entry integer(std::string key, Ref ref, Range range) {
  return {std::move(key),
          [ref, range](RunConfig& c, const std::string& s) {
            const T v = parse_integer<T>(s);
            range.check(static_cast<double>(v));
            ref(c) = v;
          },
          [ref](const RunConfig& c) { return std::to_string(ref(c)); }};
}

template <typename Ref>
Entry boolean(std::string key, Ref ref) {
  return {std::move(key), [ref](RunConfig& c, const std::string& s) { ref(c) = parse_bool(s); },
          [ref](const RunConfig& c) { return std::string(ref(c) ? "true" : "false"); }};
}

template <typename Ref>
Entry text(std::string key, Ref ref) {
  return {std::move(key),
          [ref](RunConfig& c, const std::string& s) {
            if (s.find('#') != std::string::npos) throw ValueError{"'#' is not allowed in values"};
            ref(c) = s;
          },
          [ref](const RunConfig& c) { return ref(c); }};
}

template <typename Ref>
Entry real_list(std::string key, Ref ref, Range range) {
  return {std::move(key),
          [ref, range](RunConfig& c, const std::string& s) {
            std::vector<double> out;
            for (const auto& item : split_list(s)) {
              out.push_back(parse_real(item));
              range.check(out.back());
            }
            ref(c) = out;
          },
          [ref](const RunConfig& c) {
            std::string out;
            for (double v : ref(c)) out += (out.empty() ? "" : ", ") + fmt_real(v);
            return out;
          }};
}

template <typename T, typename Ref>
Entry integer_list(std::string key, Ref ref, Range range, std::size_t min_items = 1) {
  return {std::move(key),
          [ref, range, min_items](RunConfig& c, const std::string& s) {
            std::vector<T> out;
            for (const auto& item : split_list(s)) {
              out.push_back(parse_integer<T>(item));
              range.check(static_cast<double>(out.back()));
            }
            if (out.size() < min_items) {
              throw ValueError{"expected at least " + std::to_string(min_items) + " items"};
            }
            ref(c) = out;
          },
          [ref](const RunConfig& c) {
            std::string out;
            for (T v : ref(c)) out += (out.empty() ? "" : ", ") + std::to_string(v);
            return out;
          }};
}

// An empty decay list is legal (constant learning rate), so it gets its own
// spelling: "none".
template <typename Ref>
Entry epoch_list(std::string key, Ref ref) {
  return {std::move(key),
          [ref](RunConfig& c, const std::string& s) {
            std::vector<int> out;
            if (s != "none") {
              for (const auto& item : split_list(s)) {
                out.push_back(parse_integer<int>(item));
                at_least(0).check(out.back());
              }
            }
            ref(c) = out;
          },
          [ref](const RunConfig& c) {
            std::string out;
            for (int v : ref(c)) out += (out.empty() ? "" : ", ") + std::to_string(v);
            return out.empty() ? std::string("none") : out;
          }};
}

const std::vector<Entry>& entries() {
  using C = RunConfig;
  static const std::vector<Entry> table = [] {
    std::vector<Entry> t;
    t.push_back(integer<std::uint64_t>("seed", [](auto& c) -> auto& { return c.seed; }, at_least(0)));
    t.push_back(integer<std::uint64_t>("data_seed", [](auto& c) -> auto& { return c.data_seed; }, at_least(0)));
    t.push_back(text("data_path", [](auto& c) -> auto& { return c.data_path; }));
    t.push_back(text("out_dir", [](auto& c) -> auto& { return c.out_dir; }));

    t.push_back(integer<std::size_t>("num_classes", [](auto& c) -> auto& { return c.data.num_classes; }, at_least(1)));
    t.push_back(integer<std::size_t>("subclasses_per_class",
                                     [](auto& c) -> auto& { return c.data.subclasses_per_class; }, at_least(1)));
    t.push_back(integer<std::size_t>("input_dim", [](auto& c) -> auto& { return c.data.input_dim; }, at_least(1)));
    t.push_back(integer<std::size_t>("samples_per_subclass",
                                     [](auto& c) -> auto& { return c.data.samples_per_subclass; }, at_least(1)));
    t.push_back(real("sigma", [](auto& c) -> auto& { return c.data.sigma; }, positive()));
    t.push_back(integer<std::uint64_t>("center_seed", [](auto& c) -> auto& { return c.data.center_seed; },
                                       at_least(0)));
    t.push_back(real("proximity_degrees", [](auto& c) -> auto& { return c.data.proximity_degrees; },
                     closed(-180.0, 180.0)));
    t.push_back(real("test_fraction", [](auto& c) -> auto& { return c.data.test_fraction; }, half_open(0.0, 1.0)));
    t.push_back(real("val_fraction", [](auto& c) -> auto& { return c.data.val_fraction; }, half_open(0.0, 1.0)));

    t.push_back(integer<int>("epochs", [](auto& c) -> auto& { return c.train.epochs; }, at_least(1)));
    t.push_back(integer<std::size_t>("batch_size", [](auto& c) -> auto& { return c.train.batch_size; }, at_least(1)));
    t.push_back(integer<std::size_t>("queue_capacity", [](auto& c) -> auto& { return c.train.queue_capacity; },
                                     at_least(1)));
    t.push_back(real("ema_momentum", [](auto& c) -> auto& { return c.train.ema_momentum; }, closed(0.0, 1.0)));
    t.push_back(integer<std::size_t>("knn_k_start", [](auto& c) -> auto& { return c.train.schedule.k_start; },
                                     at_least(1)));
    t.push_back(integer<std::size_t>("knn_k_end", [](auto& c) -> auto& { return c.train.schedule.k_end; },
                                     at_least(1)));
    t.push_back(real("temperature_start", [](auto& c) -> auto& { return c.train.schedule.tau_start; }, positive()));
    t.push_back(real("temperature_end", [](auto& c) -> auto& { return c.train.schedule.tau_end; }, positive()));
    t.push_back(real("lr_init", [](auto& c) -> auto& { return c.train.schedule.lr_init; }, positive()));
    t.push_back(epoch_list("lr_decay_epochs", [](auto& c) -> auto& { return c.train.schedule.lr_decay_epochs; }));
    t.push_back(real("lr_decay_factor", [](auto& c) -> auto& { return c.train.schedule.lr_decay_factor; },
                     open_closed(0.0, 1.0)));
    t.push_back(real("clamp_epsilon", [](auto& c) -> auto& { return c.train.clamp_epsilon; }, open(0.0, 1.0)));
    t.push_back(real("sgd_momentum", [](auto& c) -> auto& { return c.train.sgd_momentum; }, half_open(0.0, 1.0)));
    t.push_back(real("weight_decay", [](auto& c) -> auto& { return c.train.weight_decay; }, at_least(0.0)));
    t.push_back(boolean("two_views", [](auto& c) -> auto& { return c.train.two_views; }));
    t.push_back(real("aug_sigma", [](auto& c) -> auto& { return c.train.aug_sigma; }, at_least(0.0)));
    t.push_back(real("aug_mask_rate", [](auto& c) -> auto& { return c.train.aug_mask_rate; }, half_open(0.0, 1.0)));
    t.push_back({"objective",
                 [](C& c, const std::string& s) {
                   try {
                     c.train.objective = parse_objective(s);
                   } catch (const ConfigError& e) {
                     throw ValueError{e.what()};
                   }
                 },
                 [](const C& c) { return to_string(c.train.objective); }});
    t.push_back(integer<int>("monitor_every", [](auto& c) -> auto& { return c.train.monitor_every; }, at_least(0)));
    t.push_back(integer<std::size_t>("monitor_k", [](auto& c) -> auto& { return c.train.monitor_k; }, at_least(1)));
    t.push_back(real("monitor_tau", [](auto& c) -> auto& { return c.train.monitor_tau; }, positive()));
    t.push_back(integer<std::size_t>("monitor_max_queries",
                                     [](auto& c) -> auto& { return c.train.monitor_max_queries; }, at_least(0)));
    t.push_back(integer_list<std::size_t>("encoder_widths", [](auto& c) -> auto& { return c.train.encoder.widths; },
                                          at_least(1), 2));
    t.push_back(integer_list<std::size_t>("projector_widths",
                                          [](auto& c) -> auto& { return c.train.projector.widths; }, at_least(1), 2));
    t.push_back(integer_list<std::size_t>("predictor_widths",
                                          [](auto& c) -> auto& { return c.train.predictor.widths; }, at_least(1), 2));
    t.push_back(boolean("record_wallclock", [](auto& c) -> auto& { return c.train.record_wallclock; }));

    t.push_back(real_list("probe_learning_rates", [](auto& c) -> auto& { return c.probe.learning_rates; },
                          positive()));
    t.push_back(real_list("probe_weight_decays", [](auto& c) -> auto& { return c.probe.weight_decays; },
                          at_least(0.0)));
    t.push_back(integer_list<std::size_t>("probe_batch_sizes", [](auto& c) -> auto& { return c.probe.batch_sizes; },
                                          at_least(1)));
    t.push_back(integer<int>("probe_epochs", [](auto& c) -> auto& { return c.probe.epochs; }, at_least(1)));
    t.push_back(epoch_list("probe_decay_epochs", [](auto& c) -> auto& { return c.probe.decay_epochs; }));
    t.push_back(real("probe_decay_factor", [](auto& c) -> auto& { return c.probe.decay_factor; },
                     open_closed(0.0, 1.0)));
    t.push_back(real("probe_momentum", [](auto& c) -> auto& { return c.probe.momentum; }, half_open(0.0, 1.0)));

    t.push_back(integer_list<std::size_t>("mem_clusters_per_class",
                                          [](auto& c) -> auto& { return c.memory.clusters_per_class; }, at_least(1)));
    t.push_back(integer_list<std::size_t>("mem_k_values", [](auto& c) -> auto& { return c.memory.k_values; },
                                          at_least(1)));
    t.push_back(real_list("mem_temperatures", [](auto& c) -> auto& { return c.memory.temperatures; }, positive()));

    t.push_back(integer<std::size_t>("downstream_per_subclass",
                                     [](auto& c) -> auto& { return c.downstream_per_subclass; }, at_least(0)));
    t.push_back({"feature_source",
                 [](C& c, const std::string& s) {
                   try {
                     c.feature_source = parse_feature_source(s);
                   } catch (const ConfigError& e) {
                     throw ValueError{e.what()};
                   }
                 },
                 [](const C& c) { return to_string(c.feature_source); }});
    return t;
  }();
  return table;
}

// Accepted spellings that map onto a canonical key.
std::string canonical_key(const std::string& key) {
  if (key == "momentum") return "ema_momentum";
  return key;
}

const Entry* find_entry(const std::string& key) {
  const std::string k = canonical_key(key);
  for (const auto& e : entries()) {
    if (e.key == k) return &e;
  }
  return nullptr;
}

}  // namespace

void RunConfig::resolve() {
  train.seed = seed;
  probe.seed = seed;
  memory.seed = seed;
  train.schedule.total_epochs = train.epochs;
}

void RunConfig::validate() const {
  data.validate();
  train.validate();
  probe.validate();
  memory.validate();
  if (train.projector.in_dim() != train.encoder.out_dim()) {
    throw ConfigError("projector_widths must start at the encoder output width");
  }
  if (train.predictor.in_dim() != train.projector.out_dim() ||
      train.predictor.out_dim() != train.projector.out_dim()) {
    throw ConfigError("predictor_widths must start and end at the projector output width");
  }
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& e : entries()) keys.push_back(e.key);
  return keys;
}

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  const Entry* e = find_entry(key);
  if (e == nullptr) throw ConfigError("unknown key '" + key + "'");
  try {
    e->set(cfg, value);
  } catch (const ValueError& v) {
    throw ConfigError("key '" + key + "': " + v.message);
  }
}

RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const std::string where = "line " + std::to_string(line_no) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value', got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const Entry* e = find_entry(key);
    if (e == nullptr) throw ConfigError(where + "unknown key '" + key + "'");
    if (!seen.insert(e->key).second) throw ConfigError(where + "key '" + e->key + "' set twice");
    try {
      e->set(cfg, value);
    } catch (const ValueError& v) {
      throw ConfigError(where + "key '" + key + "': " + v.message);
    }
  }
  cfg.resolve();
  cfg.validate();
  return cfg;
}

RunConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::string serialize_config(const RunConfig& cfg) {
  std::string out = "# resolved run configuration\n";
  for (const auto& e : entries()) out += e.key + " = " + e.get(cfg) + "\n";
  return out;
}

void save_config_file(const RunConfig& cfg, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write config file '" + path + "'");
  out << serialize_config(cfg);
  if (!out) throw DataError("write failed for '" + path + "'");
}

}  // namespace look
