// SPDX-License-Identifier: Apache-2.0
#include "akt/optim.hpp"

#include <cmath>

namespace akt {

void sgd_nesterov_step(std::span<float> param, std::span<const float> grad,
                       std::span<float> velocity, float lr, const SgdOptions& opts) {
  if (param.size() != grad.size() || param.size() != velocity.size()) {
    throw ConfigError("sgd: parameter/gradient/velocity sizes differ (" +
                      std::to_string(param.size()) + ", " + std::to_string(grad.size()) + ", " +
                      std::to_string(velocity.size()) + ")");
  }
  for (std::size_t i = 0; i < param.size(); ++i) {
    const float g = grad[i] + opts.weight_decay * param[i];
    velocity[i] = opts.momentum * velocity[i] + g;
    const float update = opts.nesterov ? g + opts.momentum * velocity[i] : velocity[i];
    param[i] -= lr * update;
  }
}

NesterovSgd::NesterovSgd(std::vector<Tensor> params, SgdOptions opts)
    : params_(std::move(params)), opts_(opts) {
  velocity_.reserve(params_.size());
  for (const Tensor& p : params_) velocity_.emplace_back(p.numel(), 0.0f);
}

void NesterovSgd::step(float lr) {
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& p = params_[k];
    if (!p.has_grad()) continue;
    auto& grad = p.storage()->grad;
    sgd_nesterov_step(p.data(), grad, velocity_[k], lr, opts_);
  }
}

void NesterovSgd::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

double grad_norm(const std::vector<Tensor>& params) {
  double total = 0.0;
  for (const Tensor& p : params) {
    if (!p.has_grad()) continue;
    for (float g : p.storage()->grad) total += static_cast<double>(g) * g;
  }
  return std::sqrt(total);
}

}  // namespace akt
