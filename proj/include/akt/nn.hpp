// SPDX-License-Identifier: Apache-2.0
//
// Layer-level differentiable ops: convolution, batch normalization, softmax
// and cross-entropy.
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "akt/tensor.hpp"

namespace akt {

struct Conv2dGeometry {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

/// Output spatial extent; ConfigError unless (in + 2 pad - kernel) is a
/// non-negative multiple of stride.
std::size_t conv_output_size(std::size_t in, std::size_t kernel, Conv2dGeometry geo);

/// Cross-correlation of x [B,C,H,W] with w [O,C,kh,kw], zero padding.
Tensor conv2d(const Tensor& x, const Tensor& w, Conv2dGeometry geo);

struct PooledStats {
  Tensor mean;
  Tensor var;  // biased (divide by group size)
};

/// Mean and variance over `axes`; both outputs are differentiable w.r.t. x.
PooledStats pooled_stats(const Tensor& x, const std::vector<std::size_t>& axes);

struct RunningStats {
  std::vector<float> mean;
  std::vector<float> var;

  static RunningStats fresh(std::size_t channels) {
    return RunningStats{std::vector<float>(channels, 0.0f), std::vector<float>(channels, 1.0f)};
  }
};

struct BatchNormOptions {
  bool training = false;
  float ema_decay = 0.9f;  // running <- decay * running + (1 - decay) * batch
  float eps = 1e-5f;
};

/// Per-channel normalization of x [B,C,...]. Training mode normalizes with
/// batch moments and folds them into `stats`; eval mode uses `stats`.
Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, RunningStats& stats,
                 BatchNormOptions opts);

/// softmax(x / temperature) along `axis`, max-subtracted.
Tensor softmax(const Tensor& x, float temperature, std::size_t axis);

/// Mean over the batch of -log softmax(logits)[label]; logits are [B,K].
Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> labels);

/// Row-wise argmax of [B,K] logits.
std::vector<std::int32_t> argmax_rows(const Tensor& logits);

}  // namespace akt
