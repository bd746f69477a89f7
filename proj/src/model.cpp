#include "look/model.hpp"

#include <cmath>
#include <random>
#include <string>

#include "look/error.hpp"

namespace look {

void MlpSpec::validate(const char* name) const {
  if (widths.size() < 2) {
    throw ShapeError(std::string(name) + ": an MLP needs at least one layer (two widths)");
  }
  for (std::size_t w : widths) {
    if (w == 0) throw ShapeError(std::string(name) + ": layer widths must be >= 1");
  }
}

MlpSpec Mlp::spec() const {
  MlpSpec s;
  if (layers.empty()) return s;
  s.widths.push_back(layers.front().weight.rows());
  for (const auto& l : layers) s.widths.push_back(l.weight.cols());
  return s;
}

Mlp init_mlp(const MlpSpec& spec, std::uint64_t seed) {
  spec.validate("mlp");
  std::mt19937_64 rng(seed);
  Mlp mlp;
  for (std::size_t i = 0; i + 1 < spec.widths.size(); ++i) {
    const std::size_t fan_in = spec.widths[i];
    const std::size_t fan_out = spec.widths[i + 1];
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Linear layer{Matrix(fan_in, fan_out), Matrix(1, fan_out)};
    for (double& w : layer.weight.values()) w = dist(rng);
    mlp.layers.push_back(std::move(layer));
  }
  return mlp;
}

Matrix mlp_forward(const Mlp& mlp, const Matrix& x, const char* name) {
  Matrix h = x;
  for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
    const Linear& l = mlp.layers[i];
    h = matmul(h, l.weight);
    const bool last = i + 1 == mlp.layers.size();
    for (std::size_t r = 0; r < h.rows(); ++r) {
      auto row = h.row(r);
      for (std::size_t c = 0; c < row.size(); ++c) {
        double v = row[c] + l.bias(0, c);
        if (!last && v < 0.0) v = 0.0;
        row[c] = v;
      }
    }
    if (!h.all_finite()) {
      throw NumericError(std::string("non-finite activation in ") + name + " layer " +
                         std::to_string(i));
    }
  }
  return h;
}

bool operator==(const ModelState& a, const ModelState& b) {
  auto pa = online_parameters(a);
  auto pb = online_parameters(b);
  if (pa.size() != pb.size() || a.step != b.step) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (!(*pa[i] == *pb[i])) return false;
  }
  auto qa = momentum_parameters(a);
  auto qb = momentum_parameters(b);
  for (std::size_t i = 0; i < qa.size(); ++i) {
    if (!(*qa[i] == *qb[i])) return false;
  }
  return true;
}

ModelState init_model(const MlpSpec& encoder, const MlpSpec& projector,
                      const MlpSpec& predictor, std::uint64_t seed) {
  encoder.validate("encoder");
  projector.validate("projector");
  predictor.validate("predictor");
  if (encoder.out_dim() != projector.in_dim()) {
    throw ShapeError("encoder output width " + std::to_string(encoder.out_dim()) +
                     " != projector input width " + std::to_string(projector.in_dim()));
  }
  if (predictor.in_dim() != projector.out_dim() || predictor.out_dim() != projector.out_dim()) {
    throw ShapeError("predictor must map d_emb=" + std::to_string(projector.out_dim()) +
                     " to itself");
  }
  // Independent streams per sub-network so widths of one do not perturb another.
  std::seed_seq seq{seed, std::uint64_t{0x4c4f4f4b}};
  std::vector<std::uint64_t> seeds(3);
  seq.generate(seeds.begin(), seeds.end());

  ModelState s;
  s.encoder = init_mlp(encoder, seeds[0]);
  s.projector = init_mlp(projector, seeds[1]);
  s.predictor = init_mlp(predictor, seeds[2]);
  s.momentum_encoder = s.encoder;
  s.momentum_projector = s.projector;
  s.step = 0;
  return s;
}

void attach_classifier(ModelState& state, std::size_t num_classes, std::uint64_t seed) {
  state.classifier = init_mlp(MlpSpec{{state.embedding_dim(), num_classes}}, seed ^ 0xce);
}

namespace {

template <typename StateT, typename Ptr>
void collect(StateT& state, std::vector<Ptr>& out) {
  auto add = [&](auto& mlp) {
    for (auto& l : mlp.layers) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
  };
  add(state.encoder);
  add(state.projector);
  add(state.predictor);
  if (state.classifier) add(*state.classifier);
}

template <typename Ptr, typename MlpT>
void collect_layers(MlpT& mlp, std::vector<Ptr>& out) {
  for (auto& l : mlp.layers) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
}

NodeId record_mlp(Tape& tape, NodeId input, const Mlp& mlp, std::vector<NodeId>& params,
                  const char* name) {
  NodeId h = input;
  for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
    const NodeId w = tape.leaf(mlp.layers[i].weight, true);
    const NodeId b = tape.leaf(mlp.layers[i].bias, true);
    params.push_back(w);
    params.push_back(b);
    h = tape.add_row_bias(tape.matmul(h, w), b);
    if (i + 1 < mlp.layers.size()) h = tape.relu(h);
    if (!tape.value(h).all_finite()) {
      throw NumericError(std::string("non-finite activation in ") + name + " layer " +
                         std::to_string(i));
    }
  }
  return h;
}

}  // namespace

std::vector<Matrix*> online_parameters(ModelState& state) {
  std::vector<Matrix*> out;
  collect(state, out);
  return out;
}

std::vector<const Matrix*> online_parameters(const ModelState& state) {
  std::vector<const Matrix*> out;
  collect(state, out);
  return out;
}

std::vector<Matrix*> momentum_parameters(ModelState& state) {
  std::vector<Matrix*> out;
  collect_layers(state.momentum_encoder, out);
  collect_layers(state.momentum_projector, out);
  return out;
}

std::vector<const Matrix*> momentum_parameters(const ModelState& state) {
  std::vector<const Matrix*> out;
  collect_layers(state.momentum_encoder, out);
  collect_layers(state.momentum_projector, out);
  return out;
}

std::vector<const Matrix*> tracked_online_parameters(const ModelState& state) {
  std::vector<const Matrix*> out;
  collect_layers(state.encoder, out);
  collect_layers(state.projector, out);
  return out;
}

OnlineForward forward_online(const ModelState& state, const Matrix& x) {
  if (x.cols() != state.input_dim()) {
    throw ShapeError("forward_online: input width " + std::to_string(x.cols()) +
                     " != encoder input " + std::to_string(state.input_dim()));
  }
  require_finite(x, "forward_online input");
  OnlineForward f;
  const NodeId in = f.tape.leaf(x, false);
  const NodeId enc = record_mlp(f.tape, in, state.encoder, f.param_nodes, "encoder");
  const NodeId proj = record_mlp(f.tape, enc, state.projector, f.param_nodes, "projector");
  f.z_node = f.tape.normalize_rows(proj);
  const NodeId pred = record_mlp(f.tape, proj, state.predictor, f.param_nodes, "predictor");
  f.p_node = f.tape.normalize_rows(pred);
  if (state.classifier) {
    f.logits_node = record_mlp(f.tape, f.z_node, *state.classifier, f.param_nodes, "classifier");
  }
  return f;
}

Matrix forward_momentum(const ModelState& state, const Matrix& x) {
  if (x.cols() != state.input_dim()) {
    throw ShapeError("forward_momentum: input width mismatch");
  }
  require_finite(x, "forward_momentum input");
  const Matrix h = mlp_forward(state.momentum_encoder, x, "momentum encoder");
  return normalize_rows(mlp_forward(state.momentum_projector, h, "momentum projector"));
}

void ema_update(ModelState& state, double m) {
  if (!(m >= 0.0 && m <= 1.0)) {
    throw ConfigError("ema momentum must lie in [0, 1], got " + std::to_string(m));
  }
  auto target = momentum_parameters(state);
  auto source = tracked_online_parameters(state);
  for (std::size_t i = 0; i < target.size(); ++i) {
    auto t = target[i]->values();
    auto s = source[i]->values();
    for (std::size_t j = 0; j < t.size(); ++j) t[j] = m * t[j] + (1.0 - m) * s[j];
  }
  ++state.step;
}

Matrix extract_features(const ModelState& state, const Matrix& x, FeatureSource source) {
  const Matrix h = mlp_forward(state.encoder, x, "encoder");
  if (source == FeatureSource::kEncoder) return h;
  return normalize_rows(mlp_forward(state.projector, h, "projector"));
}

std::string to_string(FeatureSource source) {
  return source == FeatureSource::kEncoder ? "encoder" : "embedding";
}

FeatureSource parse_feature_source(const std::string& text) {
  if (text == "encoder") return FeatureSource::kEncoder;
  if (text == "embedding") return FeatureSource::kEmbedding;
  throw ConfigError("feature source must be 'encoder' or 'embedding', got '" + text + "'");
}

void Schedule::validate() const {
  if (k_start < 1 || k_end < 1) throw ConfigError("schedule: k values must be >= 1");
  if (!(tau_start > 0.0) || !(tau_end > 0.0)) {
    throw ConfigError("schedule: temperatures must be > 0");
  }
  if (!(lr_init > 0.0)) throw ConfigError("schedule: lr_init must be > 0");
  if (total_epochs < 0) throw ConfigError("schedule: total_epochs must be >= 0");
}

ScheduleValues schedule_at(const Schedule& s, int epoch) {
  if (epoch < 0 || epoch > s.total_epochs) {
    throw ConfigError("schedule_at: epoch " + std::to_string(epoch) + " outside [0, " +
                      std::to_string(s.total_epochs) + "]");
  }
  const double t =
      s.total_epochs == 0 ? 0.0 : static_cast<double>(epoch) / static_cast<double>(s.total_epochs);
  const double k0 = static_cast<double>(s.k_start);
  const double k1 = static_cast<double>(s.k_end);
  ScheduleValues v;
  v.k = static_cast<std::size_t>(std::llround(k0 + (k1 - k0) * t));
  v.tau = s.tau_start + (s.tau_end - s.tau_start) * t;
  int decays = 0;
  for (int e : s.lr_decay_epochs) {
    if (e <= epoch) ++decays;
  }
  v.lr = s.lr_init * std::pow(s.lr_decay_factor, decays);
  return v;
}

}  // namespace look
