// SPDX-License-Identifier: Apache-2.0
#include "akt/ops.hpp"

#include <algorithm>
#include <cmath>

#include "gemm.hpp"
#include "reduce_plan.hpp"

namespace akt {

namespace {

using StoragePtr = std::shared_ptr<TensorStorage>;

// Operand layout for a binary op: exact shapes, or one side holds a single value.
struct Broadcast {
  Shape shape;
  bool a_scalar = false;
  bool b_scalar = false;
};

Broadcast broadcast_shapes(Elementwise kind, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return {a.shape(), false, false};
  if (b.numel() == 1) return {a.shape(), false, true};
  if (a.numel() == 1) return {b.shape(), true, false};
  throw ConfigError(std::string(elementwise_name(kind)) + ": shape mismatch " +
                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// Adds g into the gradient slot of `s`, summing everything when `s` is a broadcast scalar.
void accumulate(TensorStorage& s, std::span<const float> g, bool scalar) {
  if (!s.requires_grad) return;
  auto dst = s.ensure_grad();
  if (scalar) {
    double total = 0.0;
    for (float v : g) total += v;
    dst[0] += static_cast<float>(total);
  } else {
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }
}

Tensor reduce(const Tensor& a, const std::vector<std::size_t>& axes, bool average,
              const char* name) {
  detail::ReducePlan plan = detail::plan_reduce(a.shape(), axes);
  std::vector<double> acc(shape_numel(plan.out_shape), 0.0);
  auto x = a.data();
  for (std::size_t i = 0; i < x.size(); ++i) acc[plan.out_index[i]] += x[i];
  const double scale = average ? 1.0 / static_cast<double>(plan.group) : 1.0;
  Tensor out(plan.out_shape);
  auto y = out.data();
  for (std::size_t i = 0; i < acc.size(); ++i) y[i] = static_cast<float>(acc[i] * scale);
  detail::check_finite(name, y);

  if (detail::tracking({&a})) {
    StoragePtr sa = a.storage();
    StoragePtr so = out.storage();
    detail::record(name, out, [sa, so, idx = std::move(plan.out_index), scale]() {
      auto ga = sa->ensure_grad();
      const auto& go = so->grad;
      for (std::size_t i = 0; i < ga.size(); ++i) {
        ga[i] += static_cast<float>(go[idx[i]] * scale);
      }
    });
  }
  return out;
}

}  // namespace

namespace detail {

ReducePlan plan_reduce(const Shape& in, const std::vector<std::size_t>& axes) {
  std::vector<bool> reduced(in.size(), false);
  for (std::size_t ax : axes) {
    if (ax >= in.size()) {
      throw ConfigError("reduction axis " + std::to_string(ax) + " out of range for " +
                        shape_str(in));
    }
    reduced[ax] = true;
  }
  ReducePlan plan;
  std::vector<std::size_t> out_stride(in.size(), 0);
  std::size_t stride = 1;
  for (std::size_t d = in.size(); d-- > 0;) {
    if (reduced[d]) {
      plan.group *= in[d];
    } else {
      out_stride[d] = stride;
      stride *= in[d];
    }
  }
  for (std::size_t d = 0; d < in.size(); ++d) {
    if (!reduced[d]) plan.out_shape.push_back(in[d]);
  }
  if (plan.out_shape.empty()) plan.out_shape.push_back(1);

  const std::size_t n = shape_numel(in);
  plan.out_index.resize(n);
  std::vector<std::size_t> idx(in.size(), 0);
  std::size_t out = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    plan.out_index[flat] = out;
    for (std::size_t d = in.size(); d-- > 0;) {
      ++idx[d];
      out += out_stride[d];
      if (idx[d] < in[d]) break;
      out -= out_stride[d] * in[d];
      idx[d] = 0;
    }
  }
  return plan;
}

}  // namespace detail

const char* elementwise_name(Elementwise kind) {
  switch (kind) {
    case Elementwise::kAdd: return "add";
    case Elementwise::kSub: return "sub";
    case Elementwise::kMul: return "mul";
    case Elementwise::kDiv: return "div";
    case Elementwise::kSquare: return "square";
    case Elementwise::kRelu: return "relu";
    case Elementwise::kLog: return "log";
    case Elementwise::kExp: return "exp";
    case Elementwise::kSqrt: return "sqrt";
  }
  return "?";
}

Tensor elementwise(Elementwise kind, const Tensor& a, const Tensor& b) {
  const char* name = elementwise_name(kind);
  Broadcast bc = broadcast_shapes(kind, a, b);
  Tensor out(bc.shape);
  auto y = out.data();
  auto xa = a.data();
  auto xb = b.data();
  const std::size_t n = y.size();
  auto av = [&](std::size_t i) { return bc.a_scalar ? xa[0] : xa[i]; };
  auto bv = [&](std::size_t i) { return bc.b_scalar ? xb[0] : xb[i]; };
  switch (kind) {
    case Elementwise::kAdd:
      for (std::size_t i = 0; i < n; ++i) y[i] = av(i) + bv(i);
      break;
    case Elementwise::kSub:
      for (std::size_t i = 0; i < n; ++i) y[i] = av(i) - bv(i);
      break;
    case Elementwise::kMul:
      for (std::size_t i = 0; i < n; ++i) y[i] = av(i) * bv(i);
      break;
    case Elementwise::kDiv:
      for (std::size_t i = 0; i < n; ++i) y[i] = av(i) / (bv(i) + kEps);
      break;
    default:
      throw ConfigError(std::string(name) + " is not a binary op");
  }
  detail::check_finite(name, y);

  if (detail::tracking({&a, &b})) {
    StoragePtr sa = a.storage();
    StoragePtr sb = b.storage();
    StoragePtr so = out.storage();
    detail::record(name, out, [kind, sa, sb, so, bc]() {
      const auto& g = so->grad;
      const std::size_t n = g.size();
      auto av = [&](std::size_t i) { return bc.a_scalar ? sa->data[0] : sa->data[i]; };
      auto bv = [&](std::size_t i) { return bc.b_scalar ? sb->data[0] : sb->data[i]; };
      std::vector<float> ga(n), gb(n);
      switch (kind) {
        case Elementwise::kAdd:
          ga = g;
          gb = g;
          break;
        case Elementwise::kSub:
          ga = g;
          for (std::size_t i = 0; i < n; ++i) gb[i] = -g[i];
          break;
        case Elementwise::kMul:
          for (std::size_t i = 0; i < n; ++i) {
            ga[i] = g[i] * bv(i);
            gb[i] = g[i] * av(i);
          }
          break;
        case Elementwise::kDiv:
          for (std::size_t i = 0; i < n; ++i) {
            const float den = bv(i) + kEps;
            ga[i] = g[i] / den;
            gb[i] = -g[i] * av(i) / (den * den);
          }
          break;
        default:
          break;
      }
      accumulate(*sa, ga, bc.a_scalar);
      accumulate(*sb, gb, bc.b_scalar);
    });
  }
  return out;
}

Tensor elementwise(Elementwise kind, const Tensor& a) {
  const char* name = elementwise_name(kind);
  Tensor out(a.shape());
  auto y = out.data();
  auto x = a.data();
  const std::size_t n = y.size();
  switch (kind) {
    case Elementwise::kSquare:
      for (std::size_t i = 0; i < n; ++i) y[i] = x[i] * x[i];
      break;
    case Elementwise::kRelu:
      for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
      break;
    case Elementwise::kLog:
      for (std::size_t i = 0; i < n; ++i) y[i] = std::log(x[i] + kEps);
      break;
    case Elementwise::kExp:
      for (std::size_t i = 0; i < n; ++i) y[i] = std::exp(x[i]);
      break;
    case Elementwise::kSqrt:
      for (std::size_t i = 0; i < n; ++i) y[i] = std::sqrt(x[i] + kEps);
      break;
    default:
      throw ConfigError(std::string(name) + " is not a unary op");
  }
  detail::check_finite(name, y);

  if (detail::tracking({&a})) {
    StoragePtr sa = a.storage();
    StoragePtr so = out.storage();
    detail::record(name, out, [kind, sa, so]() {
      const auto& g = so->grad;
      const auto& x = sa->data;
      const auto& y = so->data;
      auto ga = sa->ensure_grad();
      const std::size_t n = g.size();
      switch (kind) {
        case Elementwise::kSquare:
          for (std::size_t i = 0; i < n; ++i) ga[i] += 2.0f * x[i] * g[i];
          break;
        case Elementwise::kRelu:
          for (std::size_t i = 0; i < n; ++i) ga[i] += x[i] > 0.0f ? g[i] : 0.0f;
          break;
        case Elementwise::kLog:
          for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] / (x[i] + kEps);
          break;
        case Elementwise::kExp:
          for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * y[i];
          break;
        case Elementwise::kSqrt:
          for (std::size_t i = 0; i < n; ++i) ga[i] += 0.5f * g[i] / y[i];
          break;
        default:
          break;
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& a) {
  std::vector<std::size_t> all(a.rank());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return reduce(a, all, false, "sum");
}

Tensor mean(const Tensor& a) {
  std::vector<std::size_t> all(a.rank());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return reduce(a, all, true, "mean");
}

Tensor sum_over(const Tensor& a, const std::vector<std::size_t>& axes) {
  return reduce(a, axes, false, "sum_over");
}

Tensor mean_over(const Tensor& a, const std::vector<std::size_t>& axes) {
  return reduce(a, axes, true, "mean_over");
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ConfigError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape) +
                      " changes element count");
  }
  Tensor out(std::move(shape), std::vector<float>(a.data().begin(), a.data().end()));
  if (detail::tracking({&a})) {
    StoragePtr sa = a.storage();
    StoragePtr so = out.storage();
    detail::record("reshape", out, [sa, so]() {
      auto ga = sa->ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += so->grad[i];
    });
  }
  return out;
}

namespace {

std::size_t leading_inner(const char* name, const Tensor& x, const Tensor& d) {
  const Shape& xs = x.shape();
  const Shape& ds = d.shape();
  if (ds.size() > xs.size() || !std::equal(ds.begin(), ds.end(), xs.begin())) {
    throw ConfigError(std::string(name) + ": " + shape_str(ds) + " is not a leading slice of " +
                      shape_str(xs));
  }
  return x.numel() / d.numel();
}

}  // namespace

Tensor div_leading(const Tensor& x, const Tensor& d) {
  const std::size_t inner = leading_inner("div_leading", x, d);
  Tensor out(x.shape());
  auto y = out.data();
  auto xv = x.data();
  auto dv = d.data();
  for (std::size_t r = 0; r < dv.size(); ++r) {
    const float den = dv[r] + kEps;
    for (std::size_t i = 0; i < inner; ++i) y[r * inner + i] = xv[r * inner + i] / den;
  }
  detail::check_finite("div_leading", y);
  if (detail::tracking({&x, &d})) {
    StoragePtr sx = x.storage();
    StoragePtr sd = d.storage();
    StoragePtr so = out.storage();
    detail::record("div_leading", out, [sx, sd, so, inner]() {
      const auto& g = so->grad;
      const std::size_t rows = sd->data.size();
      std::span<float> gx = sx->requires_grad ? sx->ensure_grad() : std::span<float>{};
      std::span<float> gd = sd->requires_grad ? sd->ensure_grad() : std::span<float>{};
      for (std::size_t r = 0; r < rows; ++r) {
        const float den = sd->data[r] + kEps;
        double dot = 0.0;
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t k = r * inner + i;
          if (!gx.empty()) gx[k] += g[k] / den;
          dot += static_cast<double>(g[k]) * sx->data[k];
        }
        if (!gd.empty()) gd[r] += static_cast<float>(-dot / (static_cast<double>(den) * den));
      }
    });
  }
  return out;
}

Tensor mul_leading(const Tensor& x, const Tensor& d) {
  const std::size_t inner = leading_inner("mul_leading", x, d);
  Tensor out(x.shape());
  auto y = out.data();
  auto xv = x.data();
  auto dv = d.data();
  for (std::size_t r = 0; r < dv.size(); ++r) {
    for (std::size_t i = 0; i < inner; ++i) y[r * inner + i] = xv[r * inner + i] * dv[r];
  }
  detail::check_finite("mul_leading", y);
  if (detail::tracking({&x, &d})) {
    StoragePtr sx = x.storage();
    StoragePtr sd = d.storage();
    StoragePtr so = out.storage();
    detail::record("mul_leading", out, [sx, sd, so, inner]() {
      const auto& g = so->grad;
      const std::size_t rows = sd->data.size();
      std::span<float> gx = sx->requires_grad ? sx->ensure_grad() : std::span<float>{};
      std::span<float> gd = sd->requires_grad ? sd->ensure_grad() : std::span<float>{};
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t k = r * inner + i;
          if (!gx.empty()) gx[k] += g[k] * sd->data[r];
          dot += static_cast<double>(g[k]) * sx->data[k];
        }
        if (!gd.empty()) gd[r] += static_cast<float>(dot);
      }
    });
  }
  return out;
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
  if (x.rank() < 2 || b.rank() != 1 || b.dim(0) != x.dim(1)) {
    throw ConfigError("add_bias: bias " + shape_str(b.shape()) + " does not match axis 1 of " +
                      shape_str(x.shape()));
  }
  const std::size_t outer = x.dim(0);
  const std::size_t channels = x.dim(1);
  const std::size_t inner = x.numel() / (outer * channels);
  Tensor out(x.shape());
  auto y = out.data();
  auto xv = x.data();
  auto bv = b.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t base = (o * channels + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) y[base + i] = xv[base + i] + bv[c];
    }
  }
  detail::check_finite("add_bias", y);
  if (detail::tracking({&x, &b})) {
    StoragePtr sx = x.storage();
    StoragePtr sb = b.storage();
    StoragePtr so = out.storage();
    detail::record("add_bias", out, [sx, sb, so, outer, channels, inner]() {
      const auto& g = so->grad;
      if (sx->requires_grad) {
        auto gx = sx->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (sb->requires_grad) {
        auto gb = sb->ensure_grad();
        for (std::size_t c = 0; c < channels; ++c) {
          double acc = 0.0;
          for (std::size_t o = 0; o < outer; ++o) {
            const std::size_t base = (o * channels + c) * inner;
            for (std::size_t i = 0; i < inner; ++i) acc += g[base + i];
          }
          gb[c] += static_cast<float>(acc);
        }
      }
    });
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ConfigError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                      shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out(Shape{m, n});
  detail::gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data().data());
  detail::check_finite("matmul", out.data());
  if (detail::tracking({&a, &b})) {
    StoragePtr sa = a.storage();
    StoragePtr sb = b.storage();
    StoragePtr so = out.storage();
    detail::record("matmul", out, [sa, sb, so, m, n, k]() {
      const float* g = so->grad.data();
      if (sa->requires_grad) {
        detail::gemm_nt(m, k, n, g, sb->data.data(), sa->ensure_grad().data());
      }
      if (sb->requires_grad) {
        detail::gemm_tn(k, n, m, sa->data.data(), g, sb->ensure_grad().data());
      }
    });
  }
  return out;
}

}  // namespace akt
