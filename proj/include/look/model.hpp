#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "look/matrix.hpp"
#include "look/tape.hpp"

namespace look {

/// Layer widths from input to output; ReLU between layers, none after the last.
struct MlpSpec {
  std::vector<std::size_t> widths;

  std::size_t in_dim() const { return widths.front(); }
  std::size_t out_dim() const { return widths.back(); }
  std::size_t num_layers() const { return widths.size() - 1; }
  void validate(const char* name) const;

  friend bool operator==(const MlpSpec&, const MlpSpec&) = default;
};

/// y = x W + b, W is [in x out], b is [1 x out].
struct Linear {
  Matrix weight;
  Matrix bias;
};

struct Mlp {
  std::vector<Linear> layers;

  MlpSpec spec() const;
  std::size_t in_dim() const { return layers.front().weight.rows(); }
  std::size_t out_dim() const { return layers.back().weight.cols(); }
};

Mlp init_mlp(const MlpSpec& spec, std::uint64_t seed);

/// Plain forward pass; throws NumericError naming the layer on non-finite output.
Matrix mlp_forward(const Mlp& mlp, const Matrix& x, const char* name = "mlp");

struct ModelState {
  Mlp encoder;
  Mlp projector;
  Mlp predictor;
  /// Linear head on z, present only for cross-entropy pre-training.
  std::optional<Mlp> classifier;

  Mlp momentum_encoder;
  Mlp momentum_projector;

  std::uint64_t step = 0;

  std::size_t embedding_dim() const { return projector.out_dim(); }
  std::size_t input_dim() const { return encoder.in_dim(); }

  friend bool operator==(const ModelState&, const ModelState&);
};

ModelState init_model(const MlpSpec& encoder, const MlpSpec& projector,
                      const MlpSpec& predictor, std::uint64_t seed);

/// Attaches a [d_emb -> num_classes] linear classifier used by the CE objective.
void attach_classifier(ModelState& state, std::size_t num_classes, std::uint64_t seed);

/// Online parameters in a fixed order: encoder, projector, predictor,
/// classifier; each layer contributes weight then bias.
std::vector<Matrix*> online_parameters(ModelState& state);
std::vector<const Matrix*> online_parameters(const ModelState& state);
/// Momentum parameters (encoder then projector) and their online counterparts.
std::vector<Matrix*> momentum_parameters(ModelState& state);
std::vector<const Matrix*> momentum_parameters(const ModelState& state);
std::vector<const Matrix*> tracked_online_parameters(const ModelState& state);

struct OnlineForward {
  Tape tape;
  NodeId z_node = 0;       // normalized projector output
  NodeId p_node = 0;       // normalized predictor output
  std::optional<NodeId> logits_node;
  std::vector<NodeId> param_nodes;  // same order as online_parameters()

  const Matrix& z() const { return tape.value(z_node); }
  const Matrix& p_z() const { return tape.value(p_node); }
  const Matrix& logits() const { return tape.value(*logits_node); }
};

OnlineForward forward_online(const ModelState& state, const Matrix& x);

/// Normalized projector(encoder(x)) under the momentum parameters.
Matrix forward_momentum(const ModelState& state, const Matrix& x);

/// p_m <- m p_m + (1 - m) p for every tracked parameter; step += 1.
void ema_update(ModelState& state, double m);

enum class FeatureSource { kEncoder, kEmbedding };

/// Frozen representation used by downstream evaluation: either the raw
/// encoder output or the normalized projector output z, online branch.
Matrix extract_features(const ModelState& state, const Matrix& x, FeatureSource source);

std::string to_string(FeatureSource source);
FeatureSource parse_feature_source(const std::string& text);

// Checkpoint: "LOOKCKPT", u32 version, shape table, LE f64 parameters for the
// online then momentum branch, u64 step.
void save_checkpoint(const ModelState& state, std::ostream& out);
ModelState load_checkpoint(std::istream& in);
void save_checkpoint_file(const ModelState& state, const std::string& path);
ModelState load_checkpoint_file(const std::string& path);

struct Schedule {
  std::size_t k_start = 64;
  std::size_t k_end = 8;
  double tau_start = 1.0;
  double tau_end = 1.0;
  double lr_init = 0.05;
  std::vector<int> lr_decay_epochs{20, 40};
  double lr_decay_factor = 0.1;
  int total_epochs = 60;

  void validate() const;

  friend bool operator==(const Schedule&, const Schedule&) = default;
};

struct ScheduleValues {
  std::size_t k = 0;
  double tau = 0.0;
  double lr = 0.0;
};

/// Values at epoch in [0, total_epochs]: k and tau interpolate linearly from
/// their start values at 0 to their end values at total_epochs (k rounded to
/// nearest); lr drops by the factor at every listed decay epoch <= epoch.
/// Training visits epochs 0..total_epochs-1.
ScheduleValues schedule_at(const Schedule& s, int epoch);

}  // namespace look
