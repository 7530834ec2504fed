// SPDX-License-Identifier: Apache-2.0
//
// Hessian-trace probe: Hutchinson sampling with Rademacher vectors, where
// each Hessian-vector product is a central difference of gradients.
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "akt/data.hpp"
#include "akt/distill.hpp"
#include "akt/model.hpp"

namespace akt {

/// Gradient of a scalar loss at the given flat parameter vector.
using LossGradFn = std::function<std::vector<double>(std::span<const double>)>;

struct TraceEstimate {
  double mean_trace = 0.0;
  std::vector<double> per_sample;
  std::size_t probes = 0;
  double fd_step = 0.0;

  /// Sample standard deviation of the per-probe values (0 when M == 1).
  double std_dev() const;
  double std_error() const;
};

/// 1e-3 * (1 + ||w||) / ||v||
double default_fd_step(std::span<const double> w, std::span<const double> v);

/// (grad(w + eps v) - grad(w - eps v)) / (2 eps). NumericError names the
/// first non-finite gradient entry using `names` when given.
std::vector<double> hvp_fd(const LossGradFn& grad, std::span<const double> w,
                           std::span<const double> v, double eps,
                           std::span<const std::string> names = {});

/// fd_step <= 0 selects default_fd_step per probe.
TraceEstimate hutchinson_trace(const LossGradFn& grad, std::span<const double> w, std::size_t probes,
                               std::uint64_t seed, double fd_step = 0.0,
                               std::span<const std::string> names = {});

/// Rademacher vector used for probe `index` under `seed`.
std::vector<double> rademacher_probe(std::size_t dim, std::uint64_t seed, std::size_t index);

/// Distillation loss of a student on one fixed synthesized batch, as a
/// function of the student's trainable weights. Weight quantizers are frozen
/// at the snapshot (their dequantized values become the weights), activation
/// ranges are frozen and batchnorm uses running statistics, so the surface is
/// a deterministic function of the weights. Activation rounding stays in the
/// forward pass, so finite-difference probes see its jumps; with `linearize`
/// every relu/quantizer site is frozen to its local linear piece instead (see
/// LocalLinearization), which removes the jumps but exposes the sharp wells
/// the log guard creates where a student spatial map is near zero.
class StudentLossSurface {
 public:
  StudentLossSurface(const Model& student, Model& teacher, const SynthBatch& batch,
                     const LossConfig& loss, bool linearize = false);

  std::span<const double> weights() const { return w0_; }
  std::span<const std::string> names() const { return names_; }
  std::size_t dim() const { return w0_.size(); }

  double loss(std::span<const double> w);
  std::vector<double> gradient(std::span<const double> w);
  LossGradFn as_function();

 private:
  double evaluate(std::span<const double> w, std::vector<double>* grad);

  Model student_;
  std::vector<std::int32_t> labels_;
  Tensor images_;
  Tensor teacher_logits_;
  std::vector<Tensor> teacher_taps_;
  LossConfig loss_;
  std::vector<double> w0_;
  std::vector<std::string> names_;
};

/// Quadratic 0.5 w^T A w with diagonal A = (1, 2, 3) at w = (1, 1, 1); the
/// true trace is 6.
TraceEstimate quadratic_self_test(std::size_t probes, std::uint64_t seed);

}  // namespace akt
