// SPDX-License-Identifier: Apache-2.0
#include "akt/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>

#include "akt/model.hpp"

namespace akt {

QuantParams calc_qparams(float x_min, float x_max, int bits) {
  if (bits < kMinBits || bits > kMaxBits) {
    throw ConfigError("quantizer bit-width must be in [" + std::to_string(kMinBits) + ", " +
                      std::to_string(kMaxBits) + "], got " + std::to_string(bits));
  }
  if (!std::isfinite(x_min) || !std::isfinite(x_max)) {
    throw NumericError("quantizer range is not finite");
  }
  if (x_min > x_max) {
    throw ConfigError("quantizer range inverted: x_min=" + std::to_string(x_min) +
                      " > x_max=" + std::to_string(x_max));
  }
  if (x_min == x_max) {
    std::clog << "warning: degenerate quantization range at " << x_min << ", widening by "
              << kEps << '\n';
    x_max = std::max(x_min + kEps, std::nextafter(x_min, std::numeric_limits<float>::infinity()));
  }
  QuantParams qp;
  qp.bits = bits;
  qp.x_min = x_min;
  qp.x_max = x_max;
  const double levels = static_cast<double>(qp.qmax());
  qp.scale = static_cast<float>((static_cast<double>(x_max) - static_cast<double>(x_min)) / levels);
  const double z = std::nearbyint(-static_cast<double>(x_min) / static_cast<double>(qp.scale));
  qp.zero_point = static_cast<std::int32_t>(std::clamp(z, 0.0, levels));
  return qp;
}

std::int32_t quantize_value(float x, const QuantParams& qp) {
  const double v = static_cast<double>(x) / static_cast<double>(qp.scale) + qp.zero_point;
  const double q = std::nearbyint(v);
  return static_cast<std::int32_t>(std::clamp(q, 0.0, static_cast<double>(qp.qmax())));
}

float dequantize_value(std::int32_t q, const QuantParams& qp) {
  return static_cast<float>(static_cast<double>(qp.scale) *
                            static_cast<double>(q - qp.zero_point));
}

QTensor quantize(const Tensor& x, const QuantParams& qp) {
  QTensor out{x.shape(), std::vector<std::int32_t>(x.numel())};
  const auto xv = x.data();
  for (std::size_t i = 0; i < xv.size(); ++i) out.values[i] = quantize_value(xv[i], qp);
  return out;
}

Tensor dequantize(const QTensor& q, const QuantParams& qp) {
  Tensor out(q.shape);
  auto y = out.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = dequantize_value(q.values[i], qp);
  return out;
}

Tensor fake_quant(const Tensor& x, const QuantParams& qp) {
  Tensor out(x.shape());
  auto y = out.data();
  const auto xv = x.data();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    y[i] = dequantize_value(quantize_value(xv[i], qp), qp);
  }
  detail::check_finite("fake_quant", y);
  if (detail::tracking({&x})) {
    auto sx = x.storage();
    auto so = out.storage();
    const float lo = qp.x_min;
    const float hi = qp.x_max;
    detail::record("fake_quant", out, [sx, so, lo, hi]() {
      auto gx = sx->ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) {
        const float v = sx->data[i];
        if (v >= lo && v <= hi) gx[i] += so->grad[i];
      }
    });
  }
  return out;
}

RangeTracker::RangeTracker(RangeMode mode, float ema_momentum)
    : mode_(mode), momentum_(ema_momentum) {
  if (!(ema_momentum > 0.0f && ema_momentum < 1.0f)) {
    throw ConfigError("range tracker EMA momentum must lie in (0,1)");
  }
}

void RangeTracker::observe(std::span<const float> values) {
  if (values.empty()) return;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  if (mode_ == RangeMode::kWeightMinMax || !initialized_) {
    x_min_ = *lo;
    x_max_ = *hi;
  } else {
    x_min_ = momentum_ * x_min_ + (1.0f - momentum_) * *lo;
    x_max_ = momentum_ * x_max_ + (1.0f - momentum_) * *hi;
  }
  initialized_ = true;
}

void RangeTracker::set_range(float x_min, float x_max) {
  x_min_ = x_min;
  x_max_ = x_max;
  initialized_ = true;
}

QuantParams RangeTracker::params(int bits) const {
  if (!initialized_) throw ConfigError("quantizer range used before any observation");
  return calc_qparams(std::min(x_min_, 0.0f), std::max(x_max_, 0.0f), bits);
}

Tensor fake_quant(const Tensor& x, RangeTracker& tracker, int bits, bool update_range) {
  if (bits >= kFullPrecisionBits) return x;
  if (update_range || tracker.mode() == RangeMode::kWeightMinMax) tracker.observe(x.data());
  return fake_quant(x, tracker.params(bits));
}

Model quantize_model(const Model& fp, const QuantSpec& spec) {
  for (int bits : {spec.weight_bits, spec.act_bits}) {
    if (bits != kFullPrecisionBits && (bits < kMinBits || bits > kMaxBits)) {
      throw ConfigError("unsupported bit-width " + std::to_string(bits));
    }
  }
  Model q = fp.clone();
  q.apply_quantization(spec);
  return q;
}

std::size_t count_weight_quantizers(const Model& m) { return m.weight_quantizer_count(); }

}  // namespace akt
