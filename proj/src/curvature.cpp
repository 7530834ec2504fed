// SPDX-License-Identifier: Apache-2.0
#include "akt/curvature.hpp"

#include <cmath>
#include <numeric>
#include <random>

namespace akt {

namespace {

double norm2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

double TraceEstimate::std_dev() const {
  const std::size_t m = per_sample.size();
  if (m < 2) return 0.0;
  double ss = 0.0;
  for (double v : per_sample) ss += (v - mean_trace) * (v - mean_trace);
  return std::sqrt(ss / static_cast<double>(m - 1));
}

double TraceEstimate::std_error() const {
  return per_sample.empty() ? 0.0 : std_dev() / std::sqrt(static_cast<double>(per_sample.size()));
}

double default_fd_step(std::span<const double> w, std::span<const double> v) {
  const double nv = norm2(v);
  if (!(nv > 0.0)) throw ConfigError("finite-difference direction must be nonzero");
  return 1e-3 * (1.0 + norm2(w)) / nv;
}

std::vector<double> hvp_fd(const LossGradFn& grad, std::span<const double> w,
                           std::span<const double> v, double eps,
                           std::span<const std::string> names) {
  if (v.size() != w.size()) {
    throw ConfigError("hvp: direction has " + std::to_string(v.size()) + " entries, weights " +
                      std::to_string(w.size()));
  }
  if (!(eps > 0.0)) throw ConfigError("hvp: finite-difference step must be positive");
  std::vector<double> plus(w.begin(), w.end()), minus(w.begin(), w.end());
  for (std::size_t i = 0; i < w.size(); ++i) {
    plus[i] += eps * v[i];
    minus[i] -= eps * v[i];
  }
  const std::vector<double> gp = grad(plus);
  const std::vector<double> gm = grad(minus);
  if (gp.size() != w.size() || gm.size() != w.size()) {
    throw ConfigError("hvp: gradient size does not match weights");
  }
  std::vector<double> hv(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (!std::isfinite(gp[i]) || !std::isfinite(gm[i])) {
      const std::string who = i < names.size() ? names[i] : "parameter[" + std::to_string(i) + "]";
      throw NumericError("non-finite gradient for " + who + " in Hessian-vector product");
    }
    hv[i] = (gp[i] - gm[i]) / (2.0 * eps);
  }
  return hv;
}

std::vector<double> rademacher_probe(std::size_t dim, std::uint64_t seed, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), 0x7ace5u};
  std::mt19937_64 rng(seq);
  std::vector<double> v(dim);
  std::uint64_t bits = 0;
  for (std::size_t i = 0; i < dim; ++i) {
    if (i % 64 == 0) bits = rng();
    v[i] = (bits >> (i % 64)) & 1u ? 1.0 : -1.0;
  }
  return v;
}

TraceEstimate hutchinson_trace(const LossGradFn& grad, std::span<const double> w, std::size_t probes,
                               std::uint64_t seed, double fd_step,
                               std::span<const std::string> names) {
  if (probes == 0) throw ConfigError("Hutchinson estimate needs at least one probe");
  if (w.empty()) throw ConfigError("Hutchinson estimate needs a nonempty weight vector");
  TraceEstimate est;
  est.probes = probes;
  est.per_sample.reserve(probes);
  for (std::size_t m = 0; m < probes; ++m) {
    const std::vector<double> v = rademacher_probe(w.size(), seed, m);
    const double eps = fd_step > 0.0 ? fd_step : default_fd_step(w, v);
    est.fd_step = eps;
    const std::vector<double> hv = hvp_fd(grad, w, v, eps, names);
    est.per_sample.push_back(std::inner_product(v.begin(), v.end(), hv.begin(), 0.0));
  }
  est.mean_trace = std::accumulate(est.per_sample.begin(), est.per_sample.end(), 0.0) /
                   static_cast<double>(probes);
  return est;
}

StudentLossSurface::StudentLossSurface(const Model& student, Model& teacher,
                                       const SynthBatch& batch, const LossConfig& loss,
                                       bool linearize)
    : student_(student.clone()),
      labels_(batch.target_labels()),
      images_(batch.images()),
      loss_(loss) {
  loss_.validate();
  student_.bake_weight_quantization();
  student_.set_bn_frozen(true);
  for (const ActQuantizer* a : student_.activation_quantizers()) {
    if (a->bits < kFullPrecisionBits && !a->tracker.initialized()) {
      throw ConfigError("activation quantizer '" + a->name + "' has no calibrated range");
    }
  }
  if (linearize) student_.linearize_at(images_);
  {
    NoGrad off;
    ForwardResult fr = teacher.forward(images_, ForwardOptions{Mode::kEval, false, false});
    teacher_logits_ = fr.logits;
    teacher_taps_ = fr.taps;
  }
  for (const auto& p : student_.parameters()) {
    for (std::size_t k = 0; k < p.tensor.numel(); ++k) {
      w0_.push_back(p.tensor.data()[k]);
      names_.push_back(p.name + "[" + std::to_string(k) + "]");
    }
  }
}

double StudentLossSurface::evaluate(std::span<const double> w, std::vector<double>* grad) {
  if (w.size() != w0_.size()) throw ConfigError("loss surface: weight vector has wrong size");
  auto params = student_.parameters();
  std::size_t at = 0;
  for (auto& p : params) {
    for (float& x : p.tensor.data()) x = static_cast<float>(w[at++]);
    p.tensor.set_requires_grad(grad != nullptr);
    p.tensor.zero_grad();
  }
  GradTape tape;
  ForwardResult fr = student_.forward(images_, ForwardOptions{Mode::kEval, false, false});
  std::vector<FeatureTap> taps;
  for (std::size_t i = 0; i < fr.taps.size(); ++i) taps.push_back({i, teacher_taps_[i], fr.taps[i]});
  LossValue lv = akt_objective(teacher_logits_, fr.logits, taps, loss_);
  const double value = lv.loss.item();
  if (grad != nullptr) {
    tape.backward(lv.loss);
    grad->assign(w.size(), 0.0);
    at = 0;
    for (auto& p : params) {
      const Tensor g = p.tensor.grad();
      for (float x : g.data()) (*grad)[at++] = x;
    }
  }
  return value;
}

double StudentLossSurface::loss(std::span<const double> w) {
  NoGrad off;
  return evaluate(w, nullptr);
}

std::vector<double> StudentLossSurface::gradient(std::span<const double> w) {
  std::vector<double> g;
  evaluate(w, &g);
  return g;
}

LossGradFn StudentLossSurface::as_function() {
  return [this](std::span<const double> w) { return gradient(w); };
}

TraceEstimate quadratic_self_test(std::size_t probes, std::uint64_t seed) {
  const std::vector<double> diag{1.0, 2.0, 3.0};
  const std::vector<double> w{1.0, 1.0, 1.0};
  LossGradFn grad = [&diag](std::span<const double> x) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) g[i] = diag[i] * x[i];
    return g;
  };
  return hutchinson_trace(grad, w, probes, seed);
}

}  // namespace akt
