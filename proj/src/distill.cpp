// SPDX-License-Identifier: Apache-2.0
#include "akt/distill.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "akt/nn.hpp"
#include "akt/ops.hpp"

namespace akt {

namespace {

// Row-wise x / (||x||_2 + eps) for x [R, K].
Tensor l2_normalize_rows(const Tensor& x) {
  const std::size_t rows = x.dim(0);
  const std::size_t cols = x.numel() / rows;
  Tensor out(x.shape());
  auto y = out.data();
  const auto xv = x.data();
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t k = 0; k < cols; ++k) ss += static_cast<double>(xv[r * cols + k]) * xv[r * cols + k];
    norms[r] = std::sqrt(ss);
    const double den = norms[r] + kEps;
    for (std::size_t k = 0; k < cols; ++k) y[r * cols + k] = static_cast<float>(xv[r * cols + k] / den);
  }
  detail::check_finite("att_sp", y);
  if (detail::tracking({&x})) {
    auto sx = x.storage();
    auto so = out.storage();
    detail::record("att_sp", out, [sx, so, rows, cols, norms]() {
      auto gx = sx->ensure_grad();
      const auto& g = so->grad;
      for (std::size_t r = 0; r < rows; ++r) {
        const double n = norms[r];
        const double den = n + kEps;
        double dot = 0.0;
        for (std::size_t k = 0; k < cols; ++k) dot += static_cast<double>(g[r * cols + k]) * sx->data[r * cols + k];
        const double radial = n > 0.0 ? dot / (den * den * n) : 0.0;
        for (std::size_t k = 0; k < cols; ++k) {
          const std::size_t i = r * cols + k;
          gx[i] += static_cast<float>(g[i] / den - sx->data[i] * radial);
        }
      }
    });
  }
  return out;
}

void check_map(const Tensor& x, const char* what) {
  if (x.rank() != 4) {
    throw ConfigError(std::string(what) + ": expected a [B,C,H,W] feature map, got " +
                      shape_str(x.shape()));
  }
}

// Rows of [B, K] that sum to zero (all-zero attention maps).
std::size_t count_zero_rows(const Tensor& m) {
  const std::size_t rows = m.dim(0);
  const std::size_t cols = m.numel() / rows;
  std::size_t zeros = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    bool all_zero = true;
    for (std::size_t k = 0; k < cols && all_zero; ++k) all_zero = m.data()[r * cols + k] == 0.0f;
    zeros += all_zero ? 1 : 0;
  }
  return zeros;
}

Tensor spatial_term(const Tensor& teacher, const Tensor& student, SpatialDivergence div,
                    std::size_t& zero_maps) {
  const std::size_t batch = teacher.dim(0);
  Tensor at = reshape(att_sp(teacher.detach()), {batch, teacher.dim(2) * teacher.dim(3)});
  Tensor as = reshape(att_sp(student), {batch, student.dim(2) * student.dim(3)});
  zero_maps += count_zero_rows(at) + count_zero_rows(as);
  if (div == SpatialDivergence::kL2) {
    return mul(sum(square(sub(at, as))), 1.0f / static_cast<float>(batch));
  }
  Tensor pt = div_leading(at, sum_over(at, {1}));
  Tensor ps = div_leading(as, sum_over(as, {1}));
  return kl_rows(pt, ps);
}

// tau^2 * mean over rows of KL(softmax(t / tau) || softmax(s / tau)) for
// [R, K] scores, fused and evaluated in double. The tau^2 factor would
// otherwise amplify the float rounding of the probabilities. Only `s` gets a
// gradient.
Tensor softmax_kl(const Tensor& t, const Tensor& s, float tau) {
  const std::size_t rows = s.dim(0);
  const std::size_t k = s.numel() / rows;
  const double tau_d = tau;
  auto probs = [&](std::span<const float> v, std::size_t r, std::vector<double>& out) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, static_cast<double>(v[r * k + j]));
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += (out[j] = std::exp((v[r * k + j] - mx) / tau_d));
    for (double& x : out) x /= z;
  };
  std::vector<double> p(rows * k), q(rows * k), pr(k), qr(k);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    probs(t.data(), r, pr);
    probs(s.data(), r, qr);
    for (std::size_t j = 0; j < k; ++j) {
      p[r * k + j] = pr[j];
      q[r * k + j] = qr[j];
      total += pr[j] * (std::log(pr[j] + kEps) - std::log(qr[j] + kEps));
    }
  }
  const double scale = tau_d * tau_d / static_cast<double>(rows);
  Tensor out = Tensor::scalar(static_cast<float>(total * scale));
  detail::check_finite("softmax_kl", out.data());
  if (detail::tracking({&s})) {
    auto ss = s.storage();
    auto so = out.storage();
    detail::record("softmax_kl", out, [ss, so, p = std::move(p), q = std::move(q), rows, k, tau_d]() {
      auto gs = ss->ensure_grad();
      const double g = so->grad[0] * tau_d / static_cast<double>(rows);
      for (std::size_t r = 0; r < rows; ++r) {
        // d/dq_j = -p_j / (q_j + eps); chain through softmax(s / tau).
        double dot = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
          const std::size_t i = r * k + j;
          dot += p[i] * q[i] / (q[i] + kEps);
        }
        for (std::size_t j = 0; j < k; ++j) {
          const std::size_t i = r * k + j;
          gs[i] -= static_cast<float>(g * (p[i] * q[i] / (q[i] + kEps) - q[i] * dot));
        }
      }
    });
  }
  return out;
}

Tensor channel_term(const Tensor& teacher, const Tensor& student, float tau) {
  // Same scores att_ch feeds to its softmax.
  Tensor vt = mean_over(square(teacher.detach()), {2, 3});
  Tensor vs = mean_over(square(student), {2, 3});
  return softmax_kl(vt, vs, tau);
}

}  // namespace

const char* loss_mode_name(LossMode m) {
  switch (m) {
    case LossMode::kLogitOnly: return "logit-only";
    case LossMode::kSpatial: return "spatial";
    case LossMode::kChannel: return "channel";
    case LossMode::kRfd: return "rfd";
  }
  return "?";
}

LossMode parse_loss_mode(const std::string& s) {
  if (s == "logit-only") return LossMode::kLogitOnly;
  if (s == "spatial") return LossMode::kSpatial;
  if (s == "channel") return LossMode::kChannel;
  if (s == "rfd") return LossMode::kRfd;
  throw ConfigError("unknown loss mode '" + s + "' (logit-only|spatial|channel|rfd)");
}

const char* spatial_divergence_name(SpatialDivergence d) {
  return d == SpatialDivergence::kKl ? "kl" : "l2";
}

SpatialDivergence parse_spatial_divergence(const std::string& s) {
  if (s == "kl") return SpatialDivergence::kKl;
  if (s == "l2") return SpatialDivergence::kL2;
  throw ConfigError("unknown spatial divergence '" + s + "' (kl|l2)");
}

void LossConfig::validate() const {
  if (!(alpha >= 0.0f && alpha <= 1.0f)) {
    throw ConfigError("alpha must lie in [0,1], got " + std::to_string(alpha));
  }
  if (!(lambda > 0.0f)) throw ConfigError("lambda must be positive");
  if (!(tau_logit > 0.0f) || !(tau_feat > 0.0f)) throw ConfigError("temperatures must be positive");
}

Tensor att_sp(const Tensor& x) {
  check_map(x, "att_sp");
  const std::size_t batch = x.dim(0), h = x.dim(2), w = x.dim(3);
  Tensor m = reshape(mean_over(square(x), {1}), {batch, h * w});
  return reshape(l2_normalize_rows(m), {batch, h, w});
}

Tensor att_ch(const Tensor& x, float tau_feat) {
  check_map(x, "att_ch");
  return softmax(mean_over(square(x), {2, 3}), tau_feat, 1);
}

Tensor kl_rows(const Tensor& p, const Tensor& q) {
  if (p.shape() != q.shape() || p.rank() < 1) {
    throw ConfigError("kl_rows: shape mismatch " + shape_str(p.shape()) + " vs " +
                      shape_str(q.shape()));
  }
  // Fused and accumulated in double: the tau^2 factors downstream amplify any
  // rounding left in the log terms.
  const std::size_t rows = p.dim(0);
  const auto pv = p.data();
  const auto qv = q.data();
  double total = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double pi = pv[i];
    total += pi * (std::log(pi + kEps) - std::log(static_cast<double>(qv[i]) + kEps));
  }
  Tensor out = Tensor::scalar(static_cast<float>(total / static_cast<double>(rows)));
  detail::check_finite("kl_rows", out.data());
  if (detail::tracking({&q})) {
    auto sp = p.detach().storage();
    auto sq = q.storage();
    auto so = out.storage();
    detail::record("kl_rows", out, [sp, sq, so, rows]() {
      auto gq = sq->ensure_grad();
      const double g = so->grad[0] / static_cast<double>(rows);
      for (std::size_t i = 0; i < gq.size(); ++i) {
        gq[i] -= static_cast<float>(g * sp->data[i] / (static_cast<double>(sq->data[i]) + kEps));
      }
    });
  }
  return out;
}

Tensor loss_logit_kd(const Tensor& teacher_logits, const Tensor& student_logits, float tau) {
  if (teacher_logits.shape() != student_logits.shape() || teacher_logits.rank() != 2) {
    throw ConfigError("logit distillation: teacher " + shape_str(teacher_logits.shape()) +
                      " vs student " + shape_str(student_logits.shape()));
  }
  if (!(tau > 0.0f)) throw ConfigError("logit distillation: temperature must be positive");
  return softmax_kl(teacher_logits.detach(), student_logits, tau);
}

LossValue loss_rfd(std::span<const FeatureTap> taps, const LossConfig& cfg) {
  cfg.validate();
  if (taps.empty()) throw ConfigError("feature distillation needs at least one tap");
  const bool use_sp = cfg.mode == LossMode::kRfd || cfg.mode == LossMode::kSpatial;
  const bool use_ch = cfg.mode == LossMode::kRfd || cfg.mode == LossMode::kChannel;
  if (!use_sp && !use_ch) throw ConfigError("feature distillation requested in logit-only mode");

  LossBreakdown bd;
  double sp_total = 0.0, ch_total = 0.0;
  Tensor total;
  for (const FeatureTap& tap : taps) {
    check_map(tap.teacher, "feature tap");
    if (tap.teacher.shape() != tap.student.shape()) {
      throw ConfigError("feature tap at stage " + std::to_string(tap.stage) + ": teacher " +
                        shape_str(tap.teacher.shape()) + " vs student " +
                        shape_str(tap.student.shape()));
    }
    Tensor term;
    if (use_sp) {
      Tensor sp = spatial_term(tap.teacher, tap.student, cfg.spatial, bd.zero_spatial_maps);
      sp_total += sp.item();
      term = sp;
    }
    if (use_ch) {
      Tensor ch = channel_term(tap.teacher, tap.student, cfg.tau_feat);
      ch_total += ch.item();
      term = term.defined() ? add(term, ch) : ch;
    }
    total = total.defined() ? add(total, term) : term;
  }
  const double n = static_cast<double>(taps.size());
  bd.l_sp = use_sp ? sp_total / n : 0.0;
  bd.l_ch = use_ch ? ch_total / n : 0.0;
  bd.l_rfd = static_cast<double>(cfg.lambda) * (*bd.l_sp + *bd.l_ch);
  Tensor loss = mul(total, cfg.lambda / static_cast<float>(taps.size()));
  return LossValue{loss, bd};
}

double loss_akt(double l_rfd, double l_kl, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ConfigError("alpha must lie in [0,1], got " + std::to_string(alpha));
  }
  return alpha * l_rfd + (1.0 - alpha) * l_kl;
}

Tensor loss_akt(const Tensor& l_rfd, const Tensor& l_kl, float alpha) {
  if (!(alpha >= 0.0f && alpha <= 1.0f)) {
    throw ConfigError("alpha must lie in [0,1], got " + std::to_string(alpha));
  }
  return add(mul(l_rfd, alpha), mul(l_kl, 1.0f - alpha));
}

LossValue akt_objective(const Tensor& teacher_logits, const Tensor& student_logits,
                        std::span<const FeatureTap> taps, const LossConfig& cfg) {
  cfg.validate();
  Tensor kl = loss_logit_kd(teacher_logits, student_logits, cfg.tau_logit);
  if (cfg.mode == LossMode::kLogitOnly) {
    LossBreakdown bd;
    bd.l_kl = kl.item();
    bd.l_akt = bd.l_kl;
    return LossValue{kl, bd};
  }
  LossValue rfd = loss_rfd(taps, cfg);
  LossBreakdown bd = rfd.breakdown;
  bd.l_kl = kl.item();
  bd.l_akt = loss_akt(*bd.l_rfd, bd.l_kl, cfg.alpha);
  return LossValue{loss_akt(rfd.loss, kl, cfg.alpha), bd};
}

}  // namespace akt
