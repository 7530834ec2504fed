// SPDX-License-Identifier: Apache-2.0
#include "akt/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "gemm.hpp"
#include "reduce_plan.hpp"

namespace akt {

namespace {

using StoragePtr = std::shared_ptr<TensorStorage>;

struct ConvDims {
  std::size_t batch, in_ch, in_h, in_w;
  std::size_t out_ch, kh, kw;
  std::size_t out_h, out_w;
  Conv2dGeometry geo;

  std::size_t patch() const { return in_ch * kh * kw; }
  std::size_t plane() const { return out_h * out_w; }
  std::size_t columns() const { return batch * plane(); }
};

// cols[(c*kh + i)*kw + j][b*P + oy*Wo + ox] = x[b, c, oy*s + i - pad, ox*s + j - pad]
void im2col(const ConvDims& d, const float* x, float* cols) {
  const std::size_t ncols = d.columns();
  const auto pad = static_cast<std::ptrdiff_t>(d.geo.pad);
  const auto stride = static_cast<std::ptrdiff_t>(d.geo.stride);
  for (std::size_t c = 0; c < d.in_ch; ++c) {
    for (std::size_t i = 0; i < d.kh; ++i) {
      for (std::size_t j = 0; j < d.kw; ++j) {
        float* row = cols + ((c * d.kh + i) * d.kw + j) * ncols;
        for (std::size_t b = 0; b < d.batch; ++b) {
          const float* plane = x + (b * d.in_ch + c) * d.in_h * d.in_w;
          float* dst = row + b * d.plane();
          for (std::size_t oy = 0; oy < d.out_h; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy) * stride +
                                      static_cast<std::ptrdiff_t>(i) - pad;
            float* out = dst + oy * d.out_w;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.in_h)) {
              std::fill(out, out + d.out_w, 0.0f);
              continue;
            }
            const float* src = plane + static_cast<std::size_t>(iy) * d.in_w;
            for (std::size_t ox = 0; ox < d.out_w; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox) * stride +
                                        static_cast<std::ptrdiff_t>(j) - pad;
              out[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.in_w))
                            ? 0.0f
                            : src[static_cast<std::size_t>(ix)];
            }
          }
        }
      }
    }
  }
}

void col2im(const ConvDims& d, const float* cols, float* gx) {
  const std::size_t ncols = d.columns();
  const auto pad = static_cast<std::ptrdiff_t>(d.geo.pad);
  const auto stride = static_cast<std::ptrdiff_t>(d.geo.stride);
  for (std::size_t c = 0; c < d.in_ch; ++c) {
    for (std::size_t i = 0; i < d.kh; ++i) {
      for (std::size_t j = 0; j < d.kw; ++j) {
        const float* row = cols + ((c * d.kh + i) * d.kw + j) * ncols;
        for (std::size_t b = 0; b < d.batch; ++b) {
          float* plane = gx + (b * d.in_ch + c) * d.in_h * d.in_w;
          const float* src = row + b * d.plane();
          for (std::size_t oy = 0; oy < d.out_h; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy) * stride +
                                      static_cast<std::ptrdiff_t>(i) - pad;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.in_h)) continue;
            float* dst = plane + static_cast<std::size_t>(iy) * d.in_w;
            for (std::size_t ox = 0; ox < d.out_w; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox) * stride +
                                        static_cast<std::ptrdiff_t>(j) - pad;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.in_w)) continue;
              dst[static_cast<std::size_t>(ix)] += src[oy * d.out_w + ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace

std::size_t conv_output_size(std::size_t in, std::size_t kernel, Conv2dGeometry geo) {
  if (geo.stride == 0) throw ConfigError("conv2d: stride must be positive");
  const std::size_t padded = in + 2 * geo.pad;
  if (kernel > padded) {
    throw ConfigError("conv2d: kernel " + std::to_string(kernel) + " exceeds padded input " +
                      std::to_string(padded));
  }
  if ((padded - kernel) % geo.stride != 0) {
    throw ConfigError("conv2d: output size (" + std::to_string(in) + " + 2*" +
                      std::to_string(geo.pad) + " - " + std::to_string(kernel) + ")/" +
                      std::to_string(geo.stride) + " + 1 is not integral");
  }
  return (padded - kernel) / geo.stride + 1;
}

Tensor conv2d(const Tensor& x, const Tensor& w, Conv2dGeometry geo) {
  if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1)) {
    throw ConfigError("conv2d: input " + shape_str(x.shape()) + " incompatible with weight " +
                      shape_str(w.shape()));
  }
  ConvDims d{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3), 0, 0, geo};
  d.out_h = conv_output_size(d.in_h, d.kh, geo);
  d.out_w = conv_output_size(d.in_w, d.kw, geo);

  auto cols = std::make_shared<std::vector<float>>(d.patch() * d.columns());
  im2col(d, x.data().data(), cols->data());
  std::vector<float> wide(d.out_ch * d.columns(), 0.0f);
  detail::gemm_nn(d.out_ch, d.columns(), d.patch(), w.data().data(), cols->data(), wide.data());

  Tensor out(Shape{d.batch, d.out_ch, d.out_h, d.out_w});
  auto y = out.data();
  const std::size_t plane = d.plane();
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t o = 0; o < d.out_ch; ++o) {
      std::copy_n(wide.data() + o * d.columns() + b * plane, plane,
                  y.data() + (b * d.out_ch + o) * plane);
    }
  }
  detail::check_finite("conv2d", y);

  if (detail::tracking({&x, &w})) {
    StoragePtr sx = x.storage();
    StoragePtr sw = w.storage();
    StoragePtr so = out.storage();
    detail::record("conv2d", out, [sx, sw, so, d, cols]() {
      const std::size_t plane = d.plane();
      std::vector<float> gwide(d.out_ch * d.columns());
      for (std::size_t b = 0; b < d.batch; ++b) {
        for (std::size_t o = 0; o < d.out_ch; ++o) {
          std::copy_n(so->grad.data() + (b * d.out_ch + o) * plane, plane,
                      gwide.data() + o * d.columns() + b * plane);
        }
      }
      if (sw->requires_grad) {
        detail::gemm_nt(d.out_ch, d.patch(), d.columns(), gwide.data(), cols->data(),
                        sw->ensure_grad().data());
      }
      if (sx->requires_grad) {
        std::vector<float> gcols(d.patch() * d.columns(), 0.0f);
        detail::gemm_tn(d.patch(), d.columns(), d.out_ch, sw->data.data(), gwide.data(),
                        gcols.data());
        col2im(d, gcols.data(), sx->ensure_grad().data());
      }
    });
  }
  return out;
}

PooledStats pooled_stats(const Tensor& x, const std::vector<std::size_t>& axes) {
  detail::ReducePlan plan = detail::plan_reduce(x.shape(), axes);
  const std::size_t groups = shape_numel(plan.out_shape);
  const auto xv = x.data();
  std::vector<double> mu(groups, 0.0), var(groups, 0.0);
  for (std::size_t i = 0; i < xv.size(); ++i) mu[plan.out_index[i]] += xv[i];
  const double inv = 1.0 / static_cast<double>(plan.group);
  for (double& m : mu) m *= inv;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double dev = xv[i] - mu[plan.out_index[i]];
    var[plan.out_index[i]] += dev * dev;
  }
  PooledStats out{Tensor(plan.out_shape), Tensor(plan.out_shape)};
  auto mv = out.mean.data();
  auto vv = out.var.data();
  for (std::size_t g = 0; g < groups; ++g) {
    mv[g] = static_cast<float>(mu[g]);
    vv[g] = static_cast<float>(std::max(0.0, var[g] * inv));
  }
  detail::check_finite("pooled_stats", vv);

  if (detail::tracking({&x})) {
    StoragePtr sx = x.storage();
    StoragePtr sm = out.mean.storage();
    StoragePtr sv = out.var.storage();
    auto index = std::make_shared<std::vector<std::size_t>>(std::move(plan.out_index));
    detail::record("pooled_stats.mean", out.mean, [sx, sm, index, inv]() {
      auto gx = sx->ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) {
        gx[i] += static_cast<float>(sm->grad[(*index)[i]] * inv);
      }
    });
    detail::record("pooled_stats.var", out.var, [sx, sm, sv, index, inv]() {
      auto gx = sx->ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) {
        const std::size_t g = (*index)[i];
        gx[i] += static_cast<float>(2.0 * inv * sv->grad[g] * (sx->data[i] - sm->data[g]));
      }
    });
  }
  return out;
}

Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, RunningStats& stats,
                 BatchNormOptions opts) {
  if (x.rank() < 2) throw ConfigError("batchnorm: input must be [B,C,...]");
  const std::size_t batch = x.dim(0);
  const std::size_t channels = x.dim(1);
  const std::size_t inner = x.numel() / (batch * channels);
  if (gamma.numel() != channels || beta.numel() != channels || stats.mean.size() != channels ||
      stats.var.size() != channels) {
    throw ConfigError("batchnorm: parameters do not match " + std::to_string(channels) +
                      " channels");
  }
  const std::size_t count = batch * inner;
  const auto xv = x.data();

  std::vector<double> mean(channels), inv_std(channels);
  if (opts.training) {
    for (std::size_t c = 0; c < channels; ++c) {
      double s = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const float* p = xv.data() + (b * channels + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const float* p = xv.data() + (b * channels + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) ss += (p[i] - mu) * (p[i] - mu);
      }
      const double var = ss / static_cast<double>(count);
      mean[c] = mu;
      inv_std[c] = 1.0 / std::sqrt(var + opts.eps);
      const double unbiased = count > 1 ? ss / static_cast<double>(count - 1) : var;
      stats.mean[c] = opts.ema_decay * stats.mean[c] + (1.0f - opts.ema_decay) * static_cast<float>(mu);
      stats.var[c] =
          opts.ema_decay * stats.var[c] + (1.0f - opts.ema_decay) * static_cast<float>(unbiased);
    }
  } else {
    for (std::size_t c = 0; c < channels; ++c) {
      mean[c] = stats.mean[c];
      inv_std[c] = 1.0 / std::sqrt(static_cast<double>(stats.var[c]) + opts.eps);
    }
  }

  auto xhat = std::make_shared<std::vector<float>>(x.numel());
  Tensor out(x.shape());
  auto y = out.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t base = (b * channels + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        const double h = (xv[base + i] - mean[c]) * inv_std[c];
        (*xhat)[base + i] = static_cast<float>(h);
        y[base + i] = static_cast<float>(gv[c] * h + bv[c]);
      }
    }
  }
  detail::check_finite("batchnorm", y);

  if (detail::tracking({&x, &gamma, &beta})) {
    StoragePtr sx = x.storage();
    StoragePtr sg = gamma.storage();
    StoragePtr sb = beta.storage();
    StoragePtr so = out.storage();
    const bool training = opts.training;
    detail::record("batchnorm", out,
                   [sx, sg, sb, so, xhat, inv_std, batch, channels, inner, count, training]() {
                     const auto& g = so->grad;
                     std::vector<double> sum_g(channels, 0.0), sum_gh(channels, 0.0);
                     for (std::size_t b = 0; b < batch; ++b) {
                       for (std::size_t c = 0; c < channels; ++c) {
                         const std::size_t base = (b * channels + c) * inner;
                         for (std::size_t i = 0; i < inner; ++i) {
                           sum_g[c] += g[base + i];
                           sum_gh[c] += static_cast<double>(g[base + i]) * (*xhat)[base + i];
                         }
                       }
                     }
                     if (sg->requires_grad) {
                       auto gg = sg->ensure_grad();
                       for (std::size_t c = 0; c < channels; ++c) gg[c] += static_cast<float>(sum_gh[c]);
                     }
                     if (sb->requires_grad) {
                       auto gb = sb->ensure_grad();
                       for (std::size_t c = 0; c < channels; ++c) gb[c] += static_cast<float>(sum_g[c]);
                     }
                     if (!sx->requires_grad) return;
                     auto gx = sx->ensure_grad();
                     const double n = static_cast<double>(count);
                     for (std::size_t b = 0; b < batch; ++b) {
                       for (std::size_t c = 0; c < channels; ++c) {
                         const std::size_t base = (b * channels + c) * inner;
                         const double scale = static_cast<double>(sg->data[c]) * inv_std[c];
                         for (std::size_t i = 0; i < inner; ++i) {
                           const double gi = g[base + i];
                           if (training) {
                             gx[base + i] += static_cast<float>(
                                 scale * (gi - sum_g[c] / n - (*xhat)[base + i] * sum_gh[c] / n));
                           } else {
                             gx[base + i] += static_cast<float>(scale * gi);
                           }
                         }
                       }
                     }
                   });
  }
  return out;
}

Tensor softmax(const Tensor& x, float temperature, std::size_t axis) {
  if (!(temperature > 0.0f)) {
    throw ConfigError("softmax: temperature must be positive, got " + std::to_string(temperature));
  }
  const Shape& s = x.shape();
  if (axis >= s.size()) throw ConfigError("softmax: axis out of range for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  const std::size_t len = s[axis];

  Tensor out(s);
  auto y = out.data();
  const auto xv = x.data();
  std::vector<double> e_row(len);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      float mx = -std::numeric_limits<float>::infinity();
      for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, xv[base + k * inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        const double e =
            std::exp((static_cast<double>(xv[base + k * inner]) - mx) / temperature);
        e_row[k] = e;
        total += e;
      }
      for (std::size_t k = 0; k < len; ++k) {
        y[base + k * inner] = static_cast<float>(e_row[k] / total);
      }
    }
  }
  detail::check_finite("softmax", y);

  if (detail::tracking({&x})) {
    StoragePtr sx = x.storage();
    StoragePtr so = out.storage();
    detail::record("softmax", out, [sx, so, outer, inner, len, temperature]() {
      const auto& g = so->grad;
      const auto& p = so->data;
      auto gx = sx->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * len * inner + in;
          double dot = 0.0;
          for (std::size_t k = 0; k < len; ++k) {
            dot += static_cast<double>(g[base + k * inner]) * p[base + k * inner];
          }
          for (std::size_t k = 0; k < len; ++k) {
            const std::size_t i = base + k * inner;
            gx[i] += static_cast<float>(p[i] * (g[i] - dot) / temperature);
          }
        }
      }
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ConfigError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                      std::to_string(labels.size()) + " labels");
  }
  const std::size_t batch = logits.dim(0);
  const std::size_t classes = logits.dim(1);
  const auto z = logits.data();
  auto probs = std::make_shared<std::vector<float>>(z.size());
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const std::int32_t label = labels[b];
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw ConfigError("cross_entropy: label " + std::to_string(label) + " out of range");
    }
    const float* row = z.data() + b * classes;
    const float mx = *std::max_element(row, row + classes);
    double denom = 0.0;
    for (std::size_t k = 0; k < classes; ++k) denom += std::exp(static_cast<double>(row[k] - mx));
    for (std::size_t k = 0; k < classes; ++k) {
      (*probs)[b * classes + k] = static_cast<float>(std::exp(static_cast<double>(row[k] - mx)) / denom);
    }
    total += std::log(denom) - (row[label] - mx);
  }
  Tensor out = Tensor::scalar(static_cast<float>(total / static_cast<double>(batch)));
  detail::check_finite("cross_entropy", out.data());

  if (detail::tracking({&logits})) {
    StoragePtr sz = logits.storage();
    StoragePtr so = out.storage();
    std::vector<std::int32_t> lab(labels.begin(), labels.end());
    detail::record("cross_entropy", out, [sz, so, probs, lab, batch, classes]() {
      const float g = so->grad[0] / static_cast<float>(batch);
      auto gz = sz->ensure_grad();
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t k = 0; k < classes; ++k) {
          const float onehot = static_cast<std::size_t>(lab[b]) == k ? 1.0f : 0.0f;
          gz[b * classes + k] += g * ((*probs)[b * classes + k] - onehot);
        }
      }
    });
  }
  return out;
}

std::vector<std::int32_t> argmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw ConfigError("argmax_rows: expected [B,K]");
  const std::size_t classes = logits.dim(1);
  std::vector<std::int32_t> out(logits.dim(0));
  const auto z = logits.data();
  for (std::size_t b = 0; b < out.size(); ++b) {
    const float* row = z.data() + b * classes;
    out[b] = static_cast<std::int32_t>(std::max_element(row, row + classes) - row);
  }
  return out;
}

}  // namespace akt
