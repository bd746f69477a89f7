#include "look/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <numbers>
#include <ostream>
#include <sstream>

#include "look/error.hpp"

namespace look {

std::vector<std::size_t> LabeledDataset::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < split.size(); ++i) {
    if (split[i] == s) out.push_back(i);
  }
  return out;
}

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> which) const {
  LabeledDataset out;
  out.x = x.gather_rows(which);
  out.num_classes = num_classes;
  out.num_subclasses = num_subclasses;
  for (std::size_t i : which) {
    out.y.push_back(y[i]);
    if (has_sublabels()) out.y_sub.push_back(y_sub[i]);
    out.split.push_back(split.empty() ? Split::kTrain : split[i]);
  }
  return out;
}

std::vector<Label> LabeledDataset::labels_at(std::span<const std::size_t> which) const {
  std::vector<Label> out;
  out.reserve(which.size());
  for (std::size_t i : which) out.push_back(y[i]);
  return out;
}

void SyntheticSpec::validate() const {
  if (num_classes < 1 || subclasses_per_class < 1 || input_dim < 1 || samples_per_subclass < 1) {
    throw ConfigError("synthetic spec: counts must be >= 1");
  }
  if (!(sigma > 0.0)) throw ConfigError("synthetic spec: sigma must be > 0");
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) {
    throw ConfigError("synthetic spec: test_fraction must lie in [0, 1)");
  }
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) {
    throw ConfigError("synthetic spec: val_fraction must lie in [0, 1)");
  }
}

namespace {

std::vector<double> random_unit(std::mt19937_64& rng, std::size_t d) {
  std::normal_distribution<double> g(0.0, 1.0);
  for (;;) {
    std::vector<double> v(d);
    for (double& x : v) x = g(rng);
    NormalizedRow n = l2_normalize(v);
    if (!n.degenerate) return n.values;
  }
}

// Unit vector at `angle` radians from the unit vector a.
std::vector<double> near_unit(std::mt19937_64& rng, std::span<const double> a, double angle) {
  const std::size_t d = a.size();
  if (d == 1) return {a[0]};
  for (;;) {
    std::vector<double> u = random_unit(rng, d);
    const double proj = dot(u, a);
    for (std::size_t i = 0; i < d; ++i) u[i] -= proj * a[i];
    NormalizedRow n = l2_normalize(u);
    if (n.degenerate) continue;
    std::vector<double> out(d);
    for (std::size_t i = 0; i < d; ++i) {
      out[i] = std::cos(angle) * a[i] + std::sin(angle) * n.values[i];
    }
    return l2_normalize(out).values;
  }
}

Matrix place_centers(const SyntheticSpec& spec, std::mt19937_64& rng) {
  const std::size_t C = spec.num_classes;
  const std::size_t S = spec.subclasses_per_class;
  const std::size_t d = spec.input_dim;
  Matrix centers(C * S, d);
  auto set = [&](std::size_t row, const std::vector<double>& v) {
    std::copy(v.begin(), v.end(), centers.row(row).begin());
  };
  const bool anchored = spec.proximity_degrees > 0.0 && C >= 2;
  const double angle = spec.proximity_degrees * std::numbers::pi / 180.0;
  for (std::size_t r = 0; r < C * S; ++r) {
    if (!(anchored && r % S == 0)) set(r, random_unit(rng, d));
  }
  if (anchored) {
    for (std::size_t c = 0; c < C; ++c) {
      if (S >= 2) {
        // Sub-class 0 of class c sits next to the last sub-class of class c+1.
        const std::size_t anchor = ((c + 1) % C) * S + (S - 1);
        set(c * S, near_unit(rng, centers.row(anchor), angle));
      } else if (c == 0) {
        set(0, random_unit(rng, d));
      } else {
        set(c, near_unit(rng, centers.row(c - 1), angle));
      }
    }
  }
  return centers;
}

bool centers_distinct(const Matrix& centers) {
  for (std::size_t i = 0; i < centers.rows(); ++i) {
    for (std::size_t j = i + 1; j < centers.rows(); ++j) {
      if (dot(centers.row(i), centers.row(j)) > 1.0 - 1e-9) return false;
    }
  }
  return true;
}

double quantize(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace

void assign_splits(LabeledDataset& ds, double test_fraction, double val_fraction,
                   std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x5b11ULL);
  ds.split.assign(ds.size(), Split::kTrain);
  std::map<Label, std::vector<std::size_t>> by_label;
  for (std::size_t i = 0; i < ds.size(); ++i) by_label[ds.y[i]].push_back(i);
  for (auto& [label, rows] : by_label) {
    std::shuffle(rows.begin(), rows.end(), rng);
    const std::size_t n = rows.size();
    const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
    const std::size_t rest = n - n_test;
    const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(rest)));
    for (std::size_t i = 0; i < n; ++i) {
      Split s = Split::kTrain;
      if (i < n_test) {
        s = Split::kTest;
      } else if (i < n_test + n_val) {
        s = Split::kVal;
      }
      ds.split[rows[i]] = s;
    }
  }
}

SyntheticDataset gen_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  spec.validate();
  SyntheticDataset out;
  const std::size_t C = spec.num_classes;
  const std::size_t S = spec.subclasses_per_class;
  const std::size_t d = spec.input_dim;

  constexpr int kMaxRetries = 16;
  std::mt19937_64 center_rng(spec.center_seed);
  Matrix centers;
  int attempt = 0;
  for (; attempt < kMaxRetries; ++attempt) {
    centers = place_centers(spec, center_rng);
    if (centers_distinct(centers)) break;
  }
  if (attempt == kMaxRetries) {
    throw ConfigError("gen_synthetic: could not place distinct sub-class centers after " +
                      std::to_string(kMaxRetries) + " attempts");
  }

  out.truth.centers = centers;
  out.truth.sigma = spec.sigma;
  for (std::size_t s = 0; s < C * S; ++s) out.truth.center_class.push_back(static_cast<Label>(s / S));

  LabeledDataset& ds = out.data;
  const std::size_t n = C * S * spec.samples_per_subclass;
  ds.x = Matrix(n, d);
  ds.num_classes = C;
  ds.num_subclasses = C * S;
  ds.y.reserve(n);
  ds.y_sub.reserve(n);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, spec.sigma);
  std::size_t row = 0;
  for (std::size_t s = 0; s < C * S; ++s) {
    for (std::size_t i = 0; i < spec.samples_per_subclass; ++i, ++row) {
      auto dst = ds.x.row(row);
      auto ctr = centers.row(s);
      for (std::size_t c = 0; c < d; ++c) dst[c] = quantize(ctr[c] + noise(rng));
      ds.y.push_back(static_cast<Label>(s / S));
      ds.y_sub.push_back(static_cast<Label>(s));
    }
  }
  assign_splits(ds, spec.test_fraction, spec.val_fraction, seed);
  return out;
}

double bayes_accuracy(const SyntheticTruth& truth, const Matrix& x, std::span<const Label> labels,
                      bool subclass_task) {
  if (x.rows() != labels.size()) throw ShapeError("bayes_accuracy: rows != labels");
  if (x.rows() == 0) return 0.0;
  const std::size_t K = truth.centers.rows();
  Label num_classes = 0;
  for (Label c : truth.center_class) num_classes = std::max(num_classes, static_cast<Label>(c + 1));
  const double inv2s2 = 1.0 / (2.0 * truth.sigma * truth.sigma);
  std::size_t correct = 0;
  std::vector<double> logp(K);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto xi = x.row(i);
    for (std::size_t s = 0; s < K; ++s) {
      auto mu = truth.centers.row(s);
      double d2 = 0.0;
      for (std::size_t c = 0; c < xi.size(); ++c) d2 += (xi[c] - mu[c]) * (xi[c] - mu[c]);
      logp[s] = -d2 * inv2s2;
    }
    Label pred = 0;
    if (subclass_task) {
      pred = static_cast<Label>(std::max_element(logp.begin(), logp.end()) - logp.begin());
    } else {
      double best = -std::numeric_limits<double>::infinity();
      for (Label c = 0; c < num_classes; ++c) {
        double top = -std::numeric_limits<double>::infinity();
        for (std::size_t s = 0; s < K; ++s) {
          if (truth.center_class[s] == c) top = std::max(top, logp[s]);
        }
        double acc = 0.0;
        for (std::size_t s = 0; s < K; ++s) {
          if (truth.center_class[s] == c) acc += std::exp(logp[s] - top);
        }
        const double score = top + std::log(acc);
        if (score > best) {
          best = score;
          pred = c;
        }
      }
    }
    if (pred == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(x.rows());
}

LabeledDataset make_downstream_task(const LabeledDataset& ds, std::size_t per_subclass,
                                    double test_fraction, double val_fraction,
                                    std::uint64_t seed) {
  if (!ds.has_sublabels()) throw DataError("downstream task needs sub-labels");
  std::mt19937_64 rng(seed ^ 0xd0ULL);
  std::map<Label, std::vector<std::size_t>> by_sub;
  for (std::size_t i = 0; i < ds.size(); ++i) by_sub[ds.y_sub[i]].push_back(i);
  std::vector<std::size_t> keep;
  for (auto& [sub, rows] : by_sub) {
    std::shuffle(rows.begin(), rows.end(), rng);
    if (per_subclass > 0 && rows.size() > per_subclass) rows.resize(per_subclass);
    std::sort(rows.begin(), rows.end());
    keep.insert(keep.end(), rows.begin(), rows.end());
  }
  std::sort(keep.begin(), keep.end());
  LabeledDataset out = ds.subset(keep);
  // Coarse labels move to y_sub's slot: y is the downstream label.
  std::swap(out.y, out.y_sub);
  out.num_classes = ds.num_subclasses;
  out.num_subclasses = ds.num_classes;
  assign_splits(out, test_fraction, val_fraction, seed);
  return out;
}

DatasetFormat format_from_path(const std::string& path) {
  if (path.size() >= 4 && path.compare(path.size() - 4, 4, ".csv") == 0) return DatasetFormat::kCsv;
  return DatasetFormat::kLkbin;
}

namespace {

constexpr char kLkbinMagic[4] = {'L', 'K', 'D', 'S'};
constexpr std::uint32_t kLkbinVersion = 1;

template <typename T>
void put_le(std::ostream& out, T v) {
  using U = std::make_unsigned_t<T>;
  auto u = static_cast<U>(v);
  char bytes[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<char>((u >> (8 * i)) & 0xff);
  out.write(bytes, sizeof(T));
}

class ByteReader {
 public:
  ByteReader(std::istream& in, std::size_t start) : in_(in), offset_(start) {}

  template <typename T>
  T get(const char* what) {
    using U = std::make_unsigned_t<T>;
    unsigned char b[sizeof(T)];
    in_.read(reinterpret_cast<char*>(b), sizeof(T));
    const auto got = static_cast<std::size_t>(in_.gcount());
    if (got != sizeof(T)) {
      throw ParseError(std::string("lkbin truncated reading ") + what + " at byte offset " +
                       std::to_string(offset_) + ": expected " + std::to_string(sizeof(T)) +
                       " bytes, found " + std::to_string(got) + " (file needs " +
                       std::to_string(expected_total_) + " bytes)");
    }
    offset_ += sizeof(T);
    U v = 0;
    for (std::size_t i = sizeof(T); i-- > 0;) v = static_cast<U>((v << 8) | b[i]);
    return static_cast<T>(v);
  }

  void set_expected_total(std::size_t n) { expected_total_ = n; }
  std::size_t offset() const { return offset_; }

 private:
  std::istream& in_;
  std::size_t offset_ = 0;
  std::size_t expected_total_ = 0;
};

void validate_labels(LabeledDataset& ds) {
  Label max_y = -1;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.y[i] < 0) {
      throw DataError("label " + std::to_string(ds.y[i]) + " at row " + std::to_string(i) +
                      " is negative");
    }
    max_y = std::max(max_y, ds.y[i]);
  }
  ds.num_classes = static_cast<std::size_t>(max_y + 1);
  ds.num_subclasses = 0;
  if (ds.has_sublabels()) {
    std::map<Label, Label> owner;
    Label max_sub = -1;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const Label s = ds.y_sub[i];
      if (s < 0) {
        throw DataError("sub-label " + std::to_string(s) + " at row " + std::to_string(i) +
                        " is negative");
      }
      auto [it, fresh] = owner.emplace(s, ds.y[i]);
      if (!fresh && it->second != ds.y[i]) {
        throw DataError("sub-label " + std::to_string(s) + " maps to classes " +
                        std::to_string(it->second) + " and " + std::to_string(ds.y[i]));
      }
      max_sub = std::max(max_sub, s);
    }
    ds.num_subclasses = static_cast<std::size_t>(max_sub + 1);
  }
  ds.split.assign(ds.size(), Split::kTrain);
}

void write_lkbin(const LabeledDataset& ds, std::ostream& out) {
  out.write(kLkbinMagic, 4);
  put_le<std::uint32_t>(out, kLkbinVersion);
  put_le<std::uint64_t>(out, ds.size());
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ds.dim()));
  put_le<std::uint8_t>(out, ds.has_sublabels() ? 1 : 0);
  for (double v : ds.x.values()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  for (Label y : ds.y) put_le<std::int32_t>(out, y);
  if (ds.has_sublabels()) {
    for (Label y : ds.y_sub) put_le<std::int32_t>(out, y);
  }
}

LabeledDataset read_lkbin(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, kLkbinMagic, 4) != 0) {
    throw ParseError("lkbin: bad magic at byte offset 0");
  }
  ByteReader r(in, 4);
  auto version = r.get<std::uint32_t>("version");
  if (version != kLkbinVersion) throw ParseError("lkbin: unsupported version " + std::to_string(version));
  const auto n = r.get<std::uint64_t>("row count");
  const auto d = r.get<std::uint32_t>("input dim");
  const auto has_sub = r.get<std::uint8_t>("sub-label flag");
  if (has_sub > 1) throw ParseError("lkbin: sub-label flag must be 0 or 1 at byte offset 20");
  if (d == 0 || n > (std::uint64_t{1} << 34) / std::max<std::uint32_t>(d, 1)) {
    throw ParseError("lkbin: implausible shape " + std::to_string(n) + "x" + std::to_string(d));
  }
  r.set_expected_total(4 + 17 + n * d * 4 + n * 4 * (1 + has_sub));

  LabeledDataset ds;
  ds.x = Matrix(n, d);
  for (double& v : ds.x.values()) {
    v = static_cast<double>(std::bit_cast<float>(r.get<std::uint32_t>("feature")));
    if (!std::isfinite(v)) throw DataError("lkbin: non-finite feature value");
  }
  ds.y.resize(n);
  for (Label& y : ds.y) y = r.get<std::int32_t>("label");
  if (has_sub) {
    ds.y_sub.resize(n);
    for (Label& y : ds.y_sub) y = r.get<std::int32_t>("sub-label");
  }
  validate_labels(ds);
  return ds;
}

void write_csv(const LabeledDataset& ds, std::ostream& out) {
  out << "label";
  if (ds.has_sublabels()) out << ",sublabel";
  for (std::size_t c = 0; c < ds.dim(); ++c) out << ",f" << c;
  out << '\n';
  char buf[48];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out << ds.y[i];
    if (ds.has_sublabels()) out << ',' << ds.y_sub[i];
    for (double v : ds.x.row(i)) {
      std::snprintf(buf, sizeof buf, ",%.9g", static_cast<double>(static_cast<float>(v)));
      out << buf;
    }
    out << '\n';
  }
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream ss(line);
  while (std::getline(ss, cur, ',')) out.push_back(cur);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

LabeledDataset read_csv(std::istream& in) {
  std::string line;
  std::size_t offset = 0;
  if (!std::getline(in, line)) throw ParseError("csv: missing header at byte offset 0");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_fields(line);
  if (header.empty() || header[0] != "label") {
    throw ParseError("csv: header must start with 'label' (byte offset 0)");
  }
  const bool has_sub = header.size() > 1 && header[1] == "sublabel";
  const std::size_t first_feature = has_sub ? 2 : 1;
  const std::size_t d = header.size() - first_feature;
  for (std::size_t c = 0; c < d; ++c) {
    if (header[first_feature + c] != "f" + std::to_string(c)) {
      throw ParseError("csv: expected header column f" + std::to_string(c) + ", found '" +
                       header[first_feature + c] + "' (byte offset 0)");
    }
  }
  offset += line.size() + 1;

  LabeledDataset ds;
  std::vector<double> values;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    const std::size_t line_offset = offset;
    offset += line.size() + 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_fields(line);
    if (fields.size() != header.size()) {
      throw ParseError("csv: row " + std::to_string(row) + " at byte offset " +
                       std::to_string(line_offset) + " has " + std::to_string(fields.size()) +
                       " fields, expected " + std::to_string(header.size()));
    }
    auto parse_int = [&](const std::string& f) {
      char* end = nullptr;
      const long v = std::strtol(f.c_str(), &end, 10);
      if (f.empty() || *end != '\0') {
        throw ParseError("csv: bad integer '" + f + "' at byte offset " + std::to_string(line_offset));
      }
      return static_cast<Label>(v);
    };
    ds.y.push_back(parse_int(fields[0]));
    if (has_sub) ds.y_sub.push_back(parse_int(fields[1]));
    for (std::size_t c = 0; c < d; ++c) {
      const std::string& f = fields[first_feature + c];
      char* end = nullptr;
      const float v = std::strtof(f.c_str(), &end);
      if (f.empty() || *end != '\0' || !std::isfinite(v)) {
        throw ParseError("csv: bad number '" + f + "' at byte offset " + std::to_string(line_offset));
      }
      values.push_back(static_cast<double>(v));
    }
    ++row;
  }
  ds.x = Matrix(row, d, std::move(values));
  validate_labels(ds);
  return ds;
}

}  // namespace

void write_dataset(const LabeledDataset& ds, std::ostream& out, DatasetFormat format) {
  if (format == DatasetFormat::kCsv) {
    write_csv(ds, out);
  } else {
    write_lkbin(ds, out);
  }
  if (!out) throw DataError("failed writing dataset");
}

LabeledDataset read_dataset(std::istream& in, DatasetFormat format) {
  return format == DatasetFormat::kCsv ? read_csv(in) : read_lkbin(in);
}

void save_dataset(const LabeledDataset& ds, const std::string& path, DatasetFormat format) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open for writing: " + path);
  write_dataset(ds, out, format);
}

LabeledDataset load_dataset(const std::string& path, DatasetFormat format) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open dataset: " + path);
  return read_dataset(in, format);
}

std::vector<double> augment(std::span<const double> x, std::mt19937_64& rng, double sigma_aug,
                            double mask_rate) {
  std::vector<double> out(x.begin(), x.end());
  if (sigma_aug > 0.0) {
    std::normal_distribution<double> g(0.0, sigma_aug);
    for (double& v : out) v += g(rng);
  }
  if (mask_rate > 0.0) {
    std::bernoulli_distribution drop(mask_rate);
    for (double& v : out) {
      if (drop(rng)) v = 0.0;
    }
  }
  return out;
}

Matrix augment_rows(const Matrix& x, std::mt19937_64& rng, double sigma_aug, double mask_rate) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto row = augment(x.row(r), rng, sigma_aug, mask_rate);
    std::copy(row.begin(), row.end(), out.row(r).begin());
  }
  return out;
}

}  // namespace look
