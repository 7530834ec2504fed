// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

#include "akt/tensor.hpp"

namespace akt {

struct SgdOptions {
  float momentum = 0.9f;
  float weight_decay = 1e-4f;
  bool nesterov = true;
};

/// One in-place update of `param`:
///   g' = g + wd * w;  v = mu * v + g';  w -= lr * (g' + mu * v)   (nesterov)
///                                       w -= lr * v               (classic)
void sgd_nesterov_step(std::span<float> param, std::span<const float> grad,
                       std::span<float> velocity, float lr, const SgdOptions& opts);

/// Optimizer over a fixed parameter list, holding one velocity buffer per tensor.
class NesterovSgd {
 public:
  NesterovSgd(std::vector<Tensor> params, SgdOptions opts);

  /// Applies the update from each parameter's accumulated gradient.
  void step(float lr);
  void zero_grad();

  const std::vector<Tensor>& params() const { return params_; }
  const std::vector<std::vector<float>>& velocity() const { return velocity_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<float>> velocity_;
  SgdOptions opts_;
};

/// L2 norm of the concatenated gradients of `params`.
double grad_norm(const std::vector<Tensor>& params);

}  // namespace akt
