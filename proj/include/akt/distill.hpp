// SPDX-License-Identifier: Apache-2.0
//
// Attention decomposition of feature maps and the distillation objectives
// built on it.
//
//   spatial:  m = mean_c x_c^2 (per pixel),  att_sp = m / (||m||_2 + eps)
//   channel:  v = mean_hw x^2 (per channel), att_ch = softmax(v / tau_feat)
//
// The refined feature loss averages, over the N stage taps, a spatial and a
// channel divergence between teacher and student attention; the combined
// objective mixes it with temperature-scaled logit distillation:
//
//   L_rfd = lambda / N * sum_i (L_sp,i + L_ch,i)
//   L_akt = alpha * L_rfd + (1 - alpha) * L_kl
//
// Every KL here is forward KL(teacher || student) with the teacher side
// detached.
#pragma once

#include <optional>
#include <span>
#include <string>

#include "akt/tensor.hpp"

namespace akt {

enum class LossMode { kLogitOnly, kSpatial, kChannel, kRfd };

const char* loss_mode_name(LossMode m);
LossMode parse_loss_mode(const std::string& s);

/// How the spatial maps are compared. kKl renormalizes both maps to sum to
/// one and takes KL; kL2 is the squared distance of the unit-norm maps.
enum class SpatialDivergence { kKl, kL2 };

const char* spatial_divergence_name(SpatialDivergence d);
SpatialDivergence parse_spatial_divergence(const std::string& s);

struct LossConfig {
  float alpha = 0.5f;
  float lambda = 1.0f;
  float tau_logit = 20.0f;
  float tau_feat = 8.0f;
  LossMode mode = LossMode::kRfd;
  SpatialDivergence spatial = SpatialDivergence::kKl;

  void validate() const;
  /// Weight given to L_rfd; logit-only mode forces it to zero.
  float effective_alpha() const { return mode == LossMode::kLogitOnly ? 0.0f : alpha; }
};

struct FeatureTap {
  std::size_t stage = 0;
  Tensor teacher;  // alpha_i
  Tensor student;  // beta_i
};

struct LossBreakdown {
  std::optional<double> l_sp;   // mean over taps of the spatial term
  std::optional<double> l_ch;   // mean over taps of the channel term (incl. tau^2)
  std::optional<double> l_rfd;  // unset when the feature loss was not computed
  double l_kl = 0.0;
  double l_akt = 0.0;
  double grad_norm = 0.0;
  std::size_t zero_spatial_maps = 0;
};

/// [B,C,H,W] -> [B,H,W]
Tensor att_sp(const Tensor& x);
/// [B,C,H,W] -> [B,C]
Tensor att_ch(const Tensor& x, float tau_feat);

/// mean over rows of sum_k p (log(p + eps) - log(q + eps)); p is detached.
Tensor kl_rows(const Tensor& p, const Tensor& q);

/// tau^2 * KL(softmax(T / tau) || softmax(S / tau)), averaged over the batch.
Tensor loss_logit_kd(const Tensor& teacher_logits, const Tensor& student_logits, float tau);

struct LossValue {
  Tensor loss;
  LossBreakdown breakdown;
};

/// Refined feature distillation over all taps. ConfigError if a tap's teacher
/// and student maps differ in shape, or no taps are given.
LossValue loss_rfd(std::span<const FeatureTap> taps, const LossConfig& cfg);

/// alpha * l_rfd + (1 - alpha) * l_kl; ConfigError unless alpha is in [0, 1].
double loss_akt(double l_rfd, double l_kl, double alpha);
Tensor loss_akt(const Tensor& l_rfd, const Tensor& l_kl, float alpha);

/// Full training objective for the configured mode. In logit-only mode the
/// feature loss is never evaluated.
LossValue akt_objective(const Tensor& teacher_logits, const Tensor& student_logits,
                        std::span<const FeatureTap> taps, const LossConfig& cfg);

}  // namespace akt
