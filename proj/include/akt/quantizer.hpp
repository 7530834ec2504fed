// SPDX-License-Identifier: Apache-2.0
//
// Asymmetric uniform quantization:
//   s = (x_max - x_min) / (2^k - 1),  z = round(-x_min / s)
//   q = clamp(round(x / s + z), 0, 2^k - 1),  x_hat = s * (q - z)
// Rounding is half-to-even throughout.
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "akt/tensor.hpp"

namespace akt {

class Model;

/// Bit-width that disables a quantizer (values pass through untouched).
inline constexpr int kFullPrecisionBits = 32;
inline constexpr int kMinBits = 2;
inline constexpr int kMaxBits = 16;

struct QuantParams {
  float scale = 1.0f;
  std::int32_t zero_point = 0;
  int bits = 8;
  float x_min = 0.0f;
  float x_max = 1.0f;

  std::int32_t qmax() const { return static_cast<std::int32_t>((1u << bits) - 1u); }
};

/// ConfigError if x_min > x_max or bits outside [2, 16]. A degenerate range
/// (x_min == x_max) is widened by kEps with a warning on stderr.
QuantParams calc_qparams(float x_min, float x_max, int bits);

struct QTensor {
  Shape shape;
  std::vector<std::int32_t> values;
};

std::int32_t quantize_value(float x, const QuantParams& qp);
float dequantize_value(std::int32_t q, const QuantParams& qp);

QTensor quantize(const Tensor& x, const QuantParams& qp);
Tensor dequantize(const QTensor& q, const QuantParams& qp);

/// dequantize(quantize(x)). Backward is the clipped straight-through
/// estimator: the upstream gradient passes where x lies in [x_min, x_max] of
/// `qp` and is zero elsewhere.
Tensor fake_quant(const Tensor& x, const QuantParams& qp);

enum class RangeMode { kWeightMinMax, kActivationEma };

/// Source of the clip range for one quantizer. Weight trackers take a fresh
/// min/max on every observation; activation trackers keep an EMA that only
/// moves when the caller asks it to (training / calibration).
class RangeTracker {
 public:
  explicit RangeTracker(RangeMode mode = RangeMode::kActivationEma, float ema_momentum = 0.9f);

  void observe(std::span<const float> values);
  /// Clip range widened to contain 0, so zero stays exactly representable.
  QuantParams params(int bits) const;

  RangeMode mode() const { return mode_; }
  float ema_momentum() const { return momentum_; }
  bool initialized() const { return initialized_; }
  float x_min() const { return x_min_; }
  float x_max() const { return x_max_; }
  void set_range(float x_min, float x_max);

 private:
  RangeMode mode_;
  float momentum_;
  bool initialized_ = false;
  float x_min_ = 0.0f;
  float x_max_ = 0.0f;
};

/// Quantize-dequantize through a tracker. `update_range` lets the tracker
/// observe x first; bits >= kFullPrecisionBits returns x unchanged.
Tensor fake_quant(const Tensor& x, RangeTracker& tracker, int bits, bool update_range);

struct QuantSpec {
  int weight_bits = kFullPrecisionBits;
  int act_bits = kFullPrecisionBits;
  float act_ema_momentum = 0.9f;
  std::vector<std::string> skip;  // layer names kept at full precision

  bool enabled() const {
    return weight_bits < kFullPrecisionBits || act_bits < kFullPrecisionBits;
  }
};

/// Copy of `fp` with every conv/linear weight wrapped in a per-step min/max
/// fake-quantizer and every post-activation output (plus the classifier
/// input) wrapped in an EMA-tracked activation fake-quantizer.
Model quantize_model(const Model& fp, const QuantSpec& spec);

/// Number of active weight quantizers in `m`.
std::size_t count_weight_quantizers(const Model& m);

}  // namespace akt
