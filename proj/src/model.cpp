// SPDX-License-Identifier: Apache-2.0
#include "akt/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "akt/ops.hpp"

namespace akt {

namespace {

Tensor he_normal(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / static_cast<float>(fan_in)));
  for (float& v : t.data()) v = dist(rng);
  t.set_requires_grad(true);
  return t;
}

ConvLayer make_conv(std::string name, std::size_t in, std::size_t out, std::size_t kernel,
                    Conv2dGeometry geo, std::mt19937_64& rng) {
  ConvLayer c;
  c.name = std::move(name);
  c.weight = he_normal({out, in, kernel, kernel}, in * kernel * kernel, rng);
  c.geo = geo;
  return c;
}

BatchNormLayer make_bn(std::string name, std::size_t channels) {
  BatchNormLayer bn;
  bn.name = std::move(name);
  bn.gamma = Tensor::ones({channels});
  bn.gamma.set_requires_grad(true);
  bn.beta = Tensor::zeros({channels});
  bn.beta.set_requires_grad(true);
  bn.stats = RunningStats::fresh(channels);
  return bn;
}

ActQuantizer make_act(std::string name) {
  return ActQuantizer{std::move(name), kFullPrecisionBits, RangeTracker(RangeMode::kActivationEma),
                      std::nullopt};
}

Tensor stats_tensor(const std::vector<float>& v) {
  return Tensor(Shape{v.size()}, std::vector<float>(v));
}

template <typename Fn>
void for_each_conv(const std::vector<std::vector<ResidualBlock>>& stages, Fn&& fn) {
  for (const auto& stage : stages) {
    for (const auto& block : stage) {
      fn(block.conv1);
      fn(block.conv2);
      if (block.proj) fn(*block.proj);
    }
  }
}

}  // namespace

const char* tap_point_name(TapPoint p) {
  return p == TapPoint::kPostActivation ? "post_activation" : "pre_activation";
}

TapPoint parse_tap_point(const std::string& s) {
  if (s == "post_activation") return TapPoint::kPostActivation;
  if (s == "pre_activation") return TapPoint::kPreActivation;
  throw ConfigError("unknown tap point '" + s + "'");
}

void ModelConfig::validate() const {
  if (stages < 1) throw ConfigError("model needs at least one stage");
  if (blocks_per_stage < 1) throw ConfigError("model needs at least one block per stage");
  if (base_channels < 1 || num_classes < 2 || in_channels < 1) {
    throw ConfigError("model channel/class counts must be positive (classes >= 2)");
  }
  std::size_t h = in_height, w = in_width;
  for (std::size_t s = 1; s < stages; ++s) {
    if (h % 2 != 0 || w % 2 != 0 || h < 2 || w < 2) {
      throw ConfigError("input " + std::to_string(in_height) + "x" + std::to_string(in_width) +
                        " cannot be halved " + std::to_string(stages - 1) + " times");
    }
    h /= 2;
    w /= 2;
  }
}

Model Model::build(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  Model m;
  m.config_ = config;
  const std::size_t base = config.base_channels;
  m.stem_conv_ = make_conv("stem.conv", config.in_channels, base, 3, {1, 1}, rng);
  m.stem_bn_ = make_bn("stem.bn", base);
  m.stem_act_ = make_act("stem.act");

  std::size_t in = base;
  for (std::size_t s = 0; s < config.stages; ++s) {
    const std::size_t out = base << s;
    std::vector<ResidualBlock> blocks;
    for (std::size_t b = 0; b < config.blocks_per_stage; ++b) {
      const std::string prefix = "stage" + std::to_string(s) + ".block" + std::to_string(b) + ".";
      const bool downsample = (s > 0 && b == 0);
      ResidualBlock blk;
      // Halving convs use kernel 4 / pad 1 so the output extent stays integral.
      blk.conv1 = downsample ? make_conv(prefix + "conv1", in, out, 4, {2, 1}, rng)
                             : make_conv(prefix + "conv1", in, out, 3, {1, 1}, rng);
      blk.bn1 = make_bn(prefix + "bn1", out);
      blk.act1 = make_act(prefix + "act1");
      blk.conv2 = make_conv(prefix + "conv2", out, out, 3, {1, 1}, rng);
      blk.bn2 = make_bn(prefix + "bn2", out);
      if (downsample || in != out) {
        blk.proj = make_conv(prefix + "proj", in, out, downsample ? 2 : 1,
                             {downsample ? 2u : 1u, 0}, rng);
        blk.proj_bn = make_bn(prefix + "proj_bn", out);
      }
      blk.out_act = make_act(prefix + "out_act");
      blocks.push_back(std::move(blk));
      in = out;
    }
    m.stages_.push_back(std::move(blocks));
  }
  m.head_act_ = make_act("head.act");
  m.fc_.name = "head.fc";
  {
    Tensor w({in, config.num_classes});
    const float bound = 1.0f / std::sqrt(static_cast<float>(in));
    std::uniform_real_distribution<float> dist(-bound, bound);
    for (float& v : w.data()) v = dist(rng);
    w.set_requires_grad(true);
    Tensor b({config.num_classes});
    for (float& v : b.data()) v = dist(rng);
    b.set_requires_grad(true);
    m.fc_.weight = std::move(w);
    m.fc_.bias = std::move(b);
  }
  return m;
}

Tensor Model::conv(ConvLayer& layer, const Tensor& x) {
  const Tensor w = fake_quant(layer.weight, layer.range, layer.weight_bits, true);
  return conv2d(x, w, layer.geo);
}

Tensor Model::norm(BatchNormLayer& layer, const Tensor& x, const ForwardOptions& opts,
                   ForwardResult& result) {
  if (opts.collect_bn_inputs) result.bn_inputs.push_back(BnProbe{&layer, x});
  BatchNormOptions bn;
  bn.training = opts.mode == Mode::kTrain && !bn_frozen_;
  return batchnorm(x, layer.gamma, layer.beta, layer.stats, bn);
}

Tensor Model::act(ActQuantizer& q, const Tensor& x, bool update) {
  return fake_quant(x, q.tracker, q.bits, update);
}

Tensor Model::activation_site(ActQuantizer& q, const Tensor& pre, bool with_relu, bool update) {
  if (q.linearized) {
    if (q.linearized->mask.shape() != pre.shape()) {
      throw ConfigError("activation '" + q.name + "' was linearized for " +
                        shape_str(q.linearized->mask.shape()) + ", got " + shape_str(pre.shape()));
    }
    return add(mul(pre, q.linearized->mask), q.linearized->offset);
  }
  const Tensor r = with_relu ? relu(pre) : pre;
  Tensor y = act(q, r, update);
  if (capture_linearization_) {
    const bool quantized = q.bits < kFullPrecisionBits;
    const QuantParams qp = quantized ? q.tracker.params(q.bits) : QuantParams{};
    Tensor mask(pre.shape());
    Tensor offset(pre.shape());
    const auto xv = pre.data();
    const auto rv = r.data();
    const auto yv = y.data();
    auto mv = mask.data();
    auto ov = offset.data();
    for (std::size_t i = 0; i < xv.size(); ++i) {
      float m = with_relu && xv[i] <= 0.0f ? 0.0f : 1.0f;
      if (quantized && (rv[i] < qp.x_min || rv[i] > qp.x_max)) m = 0.0f;
      mv[i] = m;
      ov[i] = yv[i] - m * xv[i];
    }
    q.linearized = LocalLinearization{mask, offset};
  }
  return y;
}

void Model::linearize_at(const Tensor& batch) {
  clear_linearization();
  NoGrad off;
  capture_linearization_ = true;
  try {
    (void)forward(batch, ForwardOptions{Mode::kEval, false, false});
  } catch (...) {
    capture_linearization_ = false;
    throw;
  }
  capture_linearization_ = false;
}

void Model::clear_linearization() {
  for (ActQuantizer* q : activation_quantizers()) q->linearized.reset();
}

ForwardResult Model::forward(const Tensor& batch, const ForwardOptions& opts) {
  const Shape expected = config_.input_shape(batch.rank() == 4 ? batch.dim(0) : 1);
  if (batch.shape() != expected) {
    throw ConfigError("model expects input [B," + std::to_string(config_.in_channels) + "," +
                      std::to_string(config_.in_height) + "," + std::to_string(config_.in_width) +
                      "], got " + shape_str(batch.shape()));
  }
  const bool update = opts.update_ranges.value_or(opts.mode == Mode::kTrain);
  ForwardResult result;

  Tensor h = conv(stem_conv_, batch);
  h = activation_site(stem_act_, norm(stem_bn_, h, opts, result), true, update);

  for (auto& stage : stages_) {
    Tensor tap;
    for (auto& blk : stage) {
      Tensor y = conv(blk.conv1, h);
      y = activation_site(blk.act1, norm(blk.bn1, y, opts, result), true, update);
      y = norm(blk.bn2, conv(blk.conv2, y), opts, result);
      Tensor shortcut = h;
      if (blk.proj) shortcut = norm(*blk.proj_bn, conv(*blk.proj, h), opts, result);
      Tensor sum = add(y, shortcut);
      h = activation_site(blk.out_act, sum, true, update);
      tap = config_.tap_point == TapPoint::kPostActivation ? h : sum;
    }
    result.taps.push_back(tap);
  }

  Tensor pooled = mean_over(h, {2, 3});
  pooled = activation_site(head_act_, pooled, false, update);
  const Tensor w = fake_quant(fc_.weight, fc_.range, fc_.weight_bits, true);
  result.logits = add_bias(matmul(pooled, w), fc_.bias);
  return result;
}

std::vector<NamedTensor> Model::parameters() const {
  std::vector<NamedTensor> out;
  auto add_conv = [&](const ConvLayer& c) { out.push_back({c.name + ".weight", c.weight}); };
  auto add_bn = [&](const BatchNormLayer& bn) {
    out.push_back({bn.name + ".gamma", bn.gamma});
    out.push_back({bn.name + ".beta", bn.beta});
  };
  add_conv(stem_conv_);
  add_bn(stem_bn_);
  for (const auto& stage : stages_) {
    for (const auto& blk : stage) {
      add_conv(blk.conv1);
      add_bn(blk.bn1);
      add_conv(blk.conv2);
      add_bn(blk.bn2);
      if (blk.proj) {
        add_conv(*blk.proj);
        add_bn(*blk.proj_bn);
      }
    }
  }
  out.push_back({fc_.name + ".weight", fc_.weight});
  out.push_back({fc_.name + ".bias", fc_.bias});
  return out;
}

std::vector<NamedTensor> Model::state() const {
  std::vector<NamedTensor> out = parameters();
  for (const BatchNormLayer* bn : batchnorm_layers()) {
    out.push_back({bn->name + ".running_mean", stats_tensor(bn->stats.mean)});
    out.push_back({bn->name + ".running_var", stats_tensor(bn->stats.var)});
  }
  return out;
}

void Model::load_state(const std::vector<NamedTensor>& state) {
  std::vector<NamedTensor> mine = parameters();
  std::vector<BatchNormLayer*> bns;
  bns.push_back(&stem_bn_);
  for (auto& stage : stages_) {
    for (auto& blk : stage) {
      bns.push_back(&blk.bn1);
      bns.push_back(&blk.bn2);
      if (blk.proj_bn) bns.push_back(&*blk.proj_bn);
    }
  }
  const std::size_t expected = mine.size() + 2 * bns.size();
  if (state.size() != expected) {
    throw ConfigError("state has " + std::to_string(state.size()) + " tensors, model expects " +
                      std::to_string(expected));
  }
  auto check = [](const NamedTensor& want, const NamedTensor& got) {
    if (want.name != got.name || want.tensor.shape() != got.tensor.shape()) {
      throw ConfigError("state tensor '" + got.name + "' " + shape_str(got.tensor.shape()) +
                        " does not match '" + want.name + "' " + shape_str(want.tensor.shape()));
    }
  };
  for (std::size_t i = 0; i < mine.size(); ++i) {
    check(mine[i], state[i]);
    auto dst = mine[i].tensor.data();
    auto src = state[i].tensor.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  std::size_t k = mine.size();
  for (BatchNormLayer* bn : bns) {
    for (std::vector<float>* v : {&bn->stats.mean, &bn->stats.var}) {
      const NamedTensor& src = state[k++];
      const std::string want = bn->name + (v == &bn->stats.mean ? ".running_mean" : ".running_var");
      if (src.name != want || src.tensor.numel() != v->size()) {
        throw ConfigError("state tensor '" + src.name + "' does not match '" + want + "'");
      }
      std::copy(src.tensor.data().begin(), src.tensor.data().end(), v->begin());
    }
  }
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

Model Model::clone() const {
  Model m(*this);
  auto deep = [](Tensor& t) { t = t.clone(); };
  auto deep_conv = [&](ConvLayer& c) { deep(c.weight); };
  auto deep_bn = [&](BatchNormLayer& bn) {
    deep(bn.gamma);
    deep(bn.beta);
  };
  deep_conv(m.stem_conv_);
  deep_bn(m.stem_bn_);
  for (auto& stage : m.stages_) {
    for (auto& blk : stage) {
      deep_conv(blk.conv1);
      deep_bn(blk.bn1);
      deep_conv(blk.conv2);
      deep_bn(blk.bn2);
      if (blk.proj) {
        deep_conv(*blk.proj);
        deep_bn(*blk.proj_bn);
      }
    }
  }
  deep(m.fc_.weight);
  deep(m.fc_.bias);
  return m;
}

void Model::apply_quantization(const QuantSpec& spec) {
  quant_ = spec;
  auto skipped = [&](const std::string& name) {
    return std::find(spec.skip.begin(), spec.skip.end(), name) != spec.skip.end();
  };
  auto wire_conv = [&](ConvLayer& c) {
    c.weight_bits = skipped(c.name) ? kFullPrecisionBits : spec.weight_bits;
    c.range = RangeTracker(RangeMode::kWeightMinMax);
  };
  auto wire_act = [&](ActQuantizer& a) {
    a.bits = skipped(a.name) ? kFullPrecisionBits : spec.act_bits;
    a.tracker = RangeTracker(RangeMode::kActivationEma, spec.act_ema_momentum);
  };
  wire_conv(stem_conv_);
  wire_act(stem_act_);
  for (auto& stage : stages_) {
    for (auto& blk : stage) {
      wire_conv(blk.conv1);
      wire_act(blk.act1);
      wire_conv(blk.conv2);
      if (blk.proj) wire_conv(*blk.proj);
      wire_act(blk.out_act);
    }
  }
  wire_act(head_act_);
  fc_.weight_bits = skipped(fc_.name) ? kFullPrecisionBits : spec.weight_bits;
  fc_.range = RangeTracker(RangeMode::kWeightMinMax);

  const std::vector<std::string> known = [&] {
    std::vector<std::string> names{stem_conv_.name, stem_act_.name, head_act_.name, fc_.name};
    for (const auto& stage : stages_) {
      for (const auto& blk : stage) {
        for (const std::string* n : {&blk.conv1.name, &blk.conv2.name, &blk.act1.name,
                                     &blk.out_act.name}) {
          names.push_back(*n);
        }
        if (blk.proj) names.push_back(blk.proj->name);
      }
    }
    return names;
  }();
  for (const std::string& s : spec.skip) {
    if (std::find(known.begin(), known.end(), s) == known.end()) {
      throw ConfigError("quantizer skip-list names unknown layer '" + s + "'");
    }
  }
}

std::size_t Model::weight_quantizer_count() const {
  std::size_t n = stem_conv_.weight_bits < kFullPrecisionBits ? 1 : 0;
  for_each_conv(stages_, [&](const ConvLayer& c) {
    if (c.weight_bits < kFullPrecisionBits) ++n;
  });
  if (fc_.weight_bits < kFullPrecisionBits) ++n;
  return n;
}

void Model::bake_weight_quantization() {
  NoGrad off;
  auto bake = [](Tensor& weight, RangeTracker& range, int& bits) {
    if (bits >= kFullPrecisionBits) return;
    const Tensor q = fake_quant(weight, range, bits, true);
    std::copy(q.data().begin(), q.data().end(), weight.data().begin());
    bits = kFullPrecisionBits;
  };
  bake(stem_conv_.weight, stem_conv_.range, stem_conv_.weight_bits);
  for (auto& stage : stages_) {
    for (auto& blk : stage) {
      bake(blk.conv1.weight, blk.conv1.range, blk.conv1.weight_bits);
      bake(blk.conv2.weight, blk.conv2.range, blk.conv2.weight_bits);
      if (blk.proj) bake(blk.proj->weight, blk.proj->range, blk.proj->weight_bits);
    }
  }
  bake(fc_.weight, fc_.range, fc_.weight_bits);
}

std::vector<ActQuantizer*> Model::activation_quantizers() {
  std::vector<ActQuantizer*> out{&stem_act_};
  for (auto& stage : stages_) {
    for (auto& blk : stage) {
      out.push_back(&blk.act1);
      out.push_back(&blk.out_act);
    }
  }
  out.push_back(&head_act_);
  return out;
}

std::vector<const ActQuantizer*> Model::activation_quantizers() const {
  std::vector<const ActQuantizer*> out;
  for (ActQuantizer* a : const_cast<Model*>(this)->activation_quantizers()) out.push_back(a);
  return out;
}

std::vector<const BatchNormLayer*> Model::batchnorm_layers() const {
  std::vector<const BatchNormLayer*> out{&stem_bn_};
  for (const auto& stage : stages_) {
    for (const auto& blk : stage) {
      out.push_back(&blk.bn1);
      out.push_back(&blk.bn2);
      if (blk.proj_bn) out.push_back(&*blk.proj_bn);
    }
  }
  return out;
}

void Model::set_requires_grad(bool on) {
  for (auto& p : parameters()) p.tensor.set_requires_grad(on);
}

ForwardResult forward_with_taps(Model& model, const Tensor& batch, Mode mode) {
  ForwardOptions opts;
  opts.mode = mode;
  return model.forward(batch, opts);
}

std::vector<std::int32_t> predict(Model& model, const Tensor& images, std::size_t batch) {
  const Shape& s = images.shape();
  if (s.size() != 4) throw ConfigError("predict expects [N,C,H,W] images");
  const std::size_t n = s[0];
  const std::size_t per = images.numel() / n;
  std::vector<std::int32_t> out;
  out.reserve(n);
  NoGrad no_grad;
  for (std::size_t start = 0; start < n; start += batch) {
    const std::size_t count = std::min(batch, n - start);
    Tensor chunk(Shape{count, s[1], s[2], s[3]},
                 std::vector<float>(images.data().begin() + static_cast<std::ptrdiff_t>(start * per),
                                    images.data().begin() +
                                        static_cast<std::ptrdiff_t>((start + count) * per)));
    ForwardResult r = model.forward(chunk, ForwardOptions{Mode::kEval, false, false});
    auto pred = argmax_rows(r.logits);
    out.insert(out.end(), pred.begin(), pred.end());
  }
  return out;
}

double top1_accuracy(std::span<const std::int32_t> predictions,
                     std::span<const std::int32_t> labels) {
  if (predictions.size() != labels.size() || labels.empty()) {
    throw ConfigError("top1_accuracy: prediction/label counts differ or are empty");
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += predictions[i] == labels[i] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

}  // namespace akt
