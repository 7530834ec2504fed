// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale residual CNN: a stem conv followed by S stages of residual
// blocks, global average pooling and a linear classifier. One feature tap per
// stage, taken at the output of the stage's last block.
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "akt/nn.hpp"
#include "akt/quantizer.hpp"
#include "akt/tensor.hpp"

namespace akt {

enum class TapPoint { kPostActivation, kPreActivation };

const char* tap_point_name(TapPoint p);
TapPoint parse_tap_point(const std::string& s);

struct ModelConfig {
  std::size_t stages = 3;
  std::size_t blocks_per_stage = 1;
  std::size_t base_channels = 8;
  std::size_t num_classes = 4;
  std::size_t in_channels = 1;
  std::size_t in_height = 16;
  std::size_t in_width = 16;
  TapPoint tap_point = TapPoint::kPostActivation;

  void validate() const;
  std::size_t tap_count() const { return stages; }
  Shape input_shape(std::size_t batch) const { return {batch, in_channels, in_height, in_width}; }

  bool operator==(const ModelConfig&) const = default;
};

struct ConvLayer {
  std::string name;
  Tensor weight;  // [O, C, kh, kw]
  Conv2dGeometry geo;
  int weight_bits = kFullPrecisionBits;
  RangeTracker range{RangeMode::kWeightMinMax};
};

struct BatchNormLayer {
  std::string name;
  Tensor gamma;
  Tensor beta;
  RunningStats stats;
};

struct LinearLayer {
  std::string name;
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
  int weight_bits = kFullPrecisionBits;
  RangeTracker range{RangeMode::kWeightMinMax};
};

/// An activation site (optional relu, then the activation quantizer) frozen
/// at a reference pre-activation x0: y = mask * x + offset. mask is the relu
/// derivative times the clip indicator at x0; offset makes y(x0) equal the
/// real output. The gradient matches the straight-through gradient at x0, and
/// the piece has no jumps or kinks.
struct LocalLinearization {
  Tensor mask;
  Tensor offset;
};

struct ActQuantizer {
  std::string name;
  int bits = kFullPrecisionBits;
  RangeTracker tracker;
  std::optional<LocalLinearization> linearized;
};

struct ResidualBlock {
  ConvLayer conv1;
  BatchNormLayer bn1;
  ActQuantizer act1;
  ConvLayer conv2;
  BatchNormLayer bn2;
  std::optional<ConvLayer> proj;
  std::optional<BatchNormLayer> proj_bn;
  ActQuantizer out_act;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

enum class Mode { kTrain, kEval };

struct ForwardOptions {
  Mode mode = Mode::kEval;
  /// Update activation-quantizer EMA ranges (defaults to mode == kTrain).
  std::optional<bool> update_ranges;
  /// Record the input of every batchnorm layer (for statistics matching).
  bool collect_bn_inputs = false;
};

struct BnProbe {
  const BatchNormLayer* layer = nullptr;
  Tensor input;
};

struct ForwardResult {
  Tensor logits;             // [B, classes], pre-softmax
  std::vector<Tensor> taps;  // one per stage
  std::vector<BnProbe> bn_inputs;
};

class Model {
 public:
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  /// He-style fan-in initialization from a seeded generator.
  static Model build(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  ForwardResult forward(const Tensor& batch, const ForwardOptions& opts);

  /// Trainable tensors in declaration order.
  std::vector<NamedTensor> parameters() const;
  /// Trainable tensors followed by running statistics (as tensors), the
  /// order used by checkpoints.
  std::vector<NamedTensor> state() const;
  /// Copies values from `state` (names and shapes must match).
  void load_state(const std::vector<NamedTensor>& state);
  std::size_t parameter_count() const;

  Model clone() const;

  /// When set, batchnorm uses running statistics even in training mode.
  bool bn_frozen() const { return bn_frozen_; }
  void set_bn_frozen(bool on) { bn_frozen_ = on; }

  void apply_quantization(const QuantSpec& spec);
  const QuantSpec& quant_spec() const { return quant_; }
  std::size_t weight_quantizer_count() const;
  /// Replaces every quantized weight by its current dequantized value and
  /// turns the weight quantizer into a pass-through.
  void bake_weight_quantization();
  std::vector<ActQuantizer*> activation_quantizers();
  std::vector<const ActQuantizer*> activation_quantizers() const;
  std::vector<const BatchNormLayer*> batchnorm_layers() const;

  /// Freezes every activation site (relu pattern and rounding) at its value
  /// for `batch` (eval mode, ranges untouched). Later forwards must use inputs
  /// of the same shape until clear_linearization().
  void linearize_at(const Tensor& batch);
  void clear_linearization();

  void set_requires_grad(bool on);

 private:
  Model() = default;
  // Shallow: tensors alias. Only clone() uses it.
  Model(const Model&) = default;
  Model& operator=(const Model&) = default;

  Tensor conv(ConvLayer& layer, const Tensor& x);
  Tensor norm(BatchNormLayer& layer, const Tensor& x, const ForwardOptions& opts,
              ForwardResult& result);
  Tensor act(ActQuantizer& q, const Tensor& x, bool update);
  /// act(q, relu(pre)) or act(q, pre), honouring a frozen linearization.
  Tensor activation_site(ActQuantizer& q, const Tensor& pre, bool with_relu, bool update);

  ModelConfig config_;
  ConvLayer stem_conv_;
  BatchNormLayer stem_bn_;
  ActQuantizer stem_act_;
  std::vector<std::vector<ResidualBlock>> stages_;
  ActQuantizer head_act_;
  LinearLayer fc_;
  QuantSpec quant_;
  bool bn_frozen_ = false;
  bool capture_linearization_ = false;
};

/// Forward pass returning logits and the per-stage taps.
ForwardResult forward_with_taps(Model& model, const Tensor& batch, Mode mode);

/// Evaluates `model` on `images` in eval mode, `batch` rows at a time, and
/// returns the predicted class per sample.
std::vector<std::int32_t> predict(Model& model, const Tensor& images, std::size_t batch = 256);

double top1_accuracy(std::span<const std::int32_t> predictions,
                     std::span<const std::int32_t> labels);

// --- checkpoints ---------------------------------------------------------

inline constexpr char kCheckpointMagic[4] = {'A', 'K', 'T', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

using CheckpointMeta = std::map<std::string, std::string>;

struct LoadedCheckpoint {
  Model model;
  CheckpointMeta meta;
};

/// Layout: "AKTC", u32 version, u32 header length, UTF-8 key=value header,
/// then every state tensor as contiguous little-endian float32 in header order.
std::vector<std::uint8_t> encode_checkpoint(const Model& model, const CheckpointMeta& meta = {});
LoadedCheckpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Model& model, const std::string& path, const CheckpointMeta& meta = {});
LoadedCheckpoint read_checkpoint(const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace akt
