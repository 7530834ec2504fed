// SPDX-License-Identifier: Apache-2.0
#include "akt/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "akt/nn.hpp"
#include "akt/ops.hpp"

namespace akt {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}
  double uniform(double lo, double hi) {
    return lo + (hi - lo) * static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }
  int integer(int lo, int hi) {  // inclusive
    return lo + static_cast<int>(gen_() % static_cast<std::uint64_t>(hi - lo + 1));
  }
  double normal() {
    const double u1 = uniform(0x1.0p-53, 1.0);
    const double u2 = uniform(0.0, 1.0);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }
  std::uint64_t bits() { return gen_(); }

 private:
  std::mt19937_64 gen_;
};

void shuffle(std::vector<std::int32_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = rng.bits() % i;
    std::swap(v[i - 1], v[j]);
  }
}

// Coverage mask of one glyph; all shape parameters are drawn from `rng`.
std::vector<float> render_mask(int cls, std::size_t h, std::size_t w, Rng& rng) {
  std::vector<float> m(h * w, 0.0f);
  const double cy0 = (static_cast<double>(h) - 1.0) / 2.0;
  const double cx0 = (static_cast<double>(w) - 1.0) / 2.0;
  auto set = [&](auto&& inside) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        m[y * w + x] = inside(static_cast<int>(y), static_cast<int>(x)) ? 1.0f : 0.0f;
      }
    }
  };
  switch (cls) {
    case 0: {  // bars
      const bool vertical = rng.integer(0, 1) == 1;
      const int period = rng.integer(3, 5);
      const int thick = rng.integer(1, 2);
      const int phase = rng.integer(0, period - 1);
      set([&](int y, int x) { return ((vertical ? x : y) + phase) % period < thick; });
      break;
    }
    case 1: {  // cross
      const int cy = static_cast<int>(cy0) + rng.integer(-3, 3);
      const int cx = static_cast<int>(cx0) + rng.integer(-3, 3);
      const int arm = rng.integer(4, 7);
      const int thick = rng.integer(1, 2);
      set([&](int y, int x) {
        const int dy = std::abs(y - cy), dx = std::abs(x - cx);
        return (dy < thick && dx <= arm) || (dx < thick && dy <= arm);
      });
      break;
    }
    case 2: {  // ring
      const double cy = cy0 + rng.uniform(-2.0, 2.0);
      const double cx = cx0 + rng.uniform(-2.0, 2.0);
      const double r = rng.uniform(3.5, 6.0);
      set([&](int y, int x) { return std::abs(std::hypot(y - cy, x - cx) - r) < 0.8; });
      break;
    }
    case 3: {  // checker
      const int cell = rng.integer(2, 4);
      const int oy = rng.integer(0, cell - 1), ox = rng.integer(0, cell - 1);
      set([&](int y, int x) { return ((y + oy) / cell + (x + ox) / cell) % 2 == 0; });
      break;
    }
    case 4: {  // diagonal stripes
      const int period = rng.integer(4, 6);
      const int phase = rng.integer(0, period - 1);
      const bool anti = rng.integer(0, 1) == 1;
      set([&](int y, int x) {
        const int d = anti ? x + y : x - y + 64;
        return (d + phase) % period < 2;
      });
      break;
    }
    default: {  // disc
      const double cy = cy0 + rng.uniform(-2.0, 2.0);
      const double cx = cx0 + rng.uniform(-2.0, 2.0);
      const double r = rng.uniform(3.0, 5.5);
      set([&](int y, int x) { return std::hypot(y - cy, x - cx) < r; });
      break;
    }
  }
  return m;
}

}  // namespace

ProceduralDataset ProceduralDataset::generate(std::uint64_t seed, std::size_t n,
                                              std::size_t classes, const GlyphOptions& opts) {
  if (classes < 2 || classes > kMaxClasses) {
    throw ConfigError("procedural dataset supports 2.." + std::to_string(kMaxClasses) +
                      " classes, got " + std::to_string(classes));
  }
  if (n < classes) throw ConfigError("procedural dataset needs n >= classes");
  if (opts.height < 8 || opts.width < 8) throw ConfigError("glyph canvas must be at least 8x8");

  Rng rng(seed);
  ProceduralDataset ds;
  ds.seed_ = seed;
  ds.classes_ = classes;
  ds.labels_.resize(n);
  for (std::size_t i = 0; i < n; ++i) ds.labels_[i] = static_cast<std::int32_t>(i % classes);
  shuffle(ds.labels_, rng);

  const std::size_t px = opts.height * opts.width;
  std::vector<float> pixels(n * px);
  for (std::size_t i = 0; i < n; ++i) {
    const auto mask = render_mask(ds.labels_[i], opts.height, opts.width, rng);
    const double bg = rng.uniform(0.0, 0.3);
    const double fg = rng.uniform(0.6, 1.0);
    for (std::size_t k = 0; k < px; ++k) {
      const double v = bg + (fg - bg) * mask[k] + opts.noise_std * rng.normal();
      pixels[i * px + k] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  ds.images_ = Tensor({n, 1, opts.height, opts.width}, std::move(pixels));
  return ds;
}

Tensor ProceduralDataset::gather(std::span<const std::size_t> rows) const {
  const std::size_t px = images_.numel() / size();
  std::vector<float> out(rows.size() * px);
  const auto src = images_.data();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= size()) throw ConfigError("dataset row out of range");
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(rows[r] * px), px,
                out.begin() + static_cast<std::ptrdiff_t>(r * px));
  }
  Shape shape = images_.shape();
  shape[0] = rows.size();
  return Tensor(std::move(shape), std::move(out));
}

std::vector<std::int32_t> ProceduralDataset::gather_labels(std::span<const std::size_t> rows) const {
  std::vector<std::int32_t> out;
  out.reserve(rows.size());
  for (std::size_t r : rows) out.push_back(labels_.at(r));
  return out;
}

std::uint64_t ProceduralDataset::checksum() const {
  std::uint64_t h = 0xCBF29CE484222325ull;
  auto mix = [&h](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
      h ^= (v >> (8 * i)) & 0xFFu;
      h *= 0x100000001B3ull;
    }
  };
  for (float v : images_.data()) mix(std::bit_cast<std::uint32_t>(v));
  for (std::int32_t l : labels_) mix(static_cast<std::uint32_t>(l));
  return h;
}

ProceduralDataset gen_procedural(std::uint64_t seed, std::size_t n, std::size_t classes) {
  return ProceduralDataset::generate(seed, n, classes);
}

DatasetSplits procedural_splits(std::uint64_t seed, std::size_t n_train, std::size_t n_held_out,
                                std::size_t classes) {
  return DatasetSplits{ProceduralDataset::generate(splitmix(2 * seed), n_train, classes),
                       ProceduralDataset::generate(splitmix(2 * seed + 1), n_held_out, classes)};
}

// --- synthesis -----------------------------------------------------------

namespace detail {

struct SynthFactory {
  static SynthBatch make(std::string id, Tensor images, std::vector<std::int32_t> labels,
                         double final_loss, std::vector<double> trace) {
    return SynthBatch(SynthKey{}, std::move(id), std::move(images), std::move(labels), final_loss,
                      std::move(trace));
  }
};

}  // namespace detail

SynthBatch::SynthBatch(SynthKey, std::string id, Tensor images,
                       std::vector<std::int32_t> target_labels, double bns_loss_final,
                       std::vector<double> bns_trace)
    : id_(std::move(id)),
      images_(std::move(images)),
      labels_(std::move(target_labels)),
      bns_loss_final_(bns_loss_final),
      bns_trace_(std::move(bns_trace)) {}

bool SynthBatch::monotone_start() const {
  const std::size_t n = std::min<std::size_t>(bns_trace_.size(), 11);
  for (std::size_t i = 1; i < n; ++i) {
    if (!(bns_trace_[i] < bns_trace_[i - 1])) return false;
  }
  return true;
}

std::vector<std::int32_t> balanced_labels(std::size_t n, std::size_t classes, std::uint64_t seed) {
  if (classes == 0) throw ConfigError("balanced_labels: zero classes");
  std::vector<std::int32_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<std::int32_t>(i % classes);
  Rng rng(splitmix(seed ^ 0x5eedu));
  shuffle(labels, rng);
  return labels;
}

namespace {

bool stats_recorded(const BatchNormLayer& bn) {
  for (float m : bn.stats.mean) {
    if (m != 0.0f) return true;
  }
  for (float v : bn.stats.var) {
    if (v != 1.0f) return true;
  }
  return false;
}

Tensor stats_loss(const std::vector<BnProbe>& probes) {
  Tensor total;
  for (const BnProbe& p : probes) {
    PooledStats ps = pooled_stats(p.input, {0, 2, 3});
    const std::size_t c = p.layer->stats.mean.size();
    Tensor run_mean({c}, p.layer->stats.mean);
    Tensor run_var({c}, p.layer->stats.var);
    Tensor term = add(sum(square(sub(ps.mean, run_mean))), sum(square(sub(ps.var, run_var))));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

// Restores the teacher's requires_grad flags on scope exit.
class FrozenParams {
 public:
  explicit FrozenParams(Model& m) : model_(m) {
    const auto params = m.parameters();
    previous_ = !params.empty() && params.front().tensor.requires_grad();
    m.set_requires_grad(false);
  }
  ~FrozenParams() { model_.set_requires_grad(previous_); }
  FrozenParams(const FrozenParams&) = delete;
  FrozenParams& operator=(const FrozenParams&) = delete;

 private:
  Model& model_;
  bool previous_ = false;
};

}  // namespace

SynthBatch synthesize_batch(Model& teacher, std::span<const std::int32_t> labels,
                            const SynthOptions& opts) {
  const auto bns = teacher.batchnorm_layers();
  if (bns.empty()) throw ConfigError("synthesis needs a teacher with batchnorm layers");
  if (std::none_of(bns.begin(), bns.end(), [](const BatchNormLayer* b) { return stats_recorded(*b); })) {
    throw ConfigError("teacher batchnorm layers carry no recorded running statistics");
  }
  if (labels.empty()) throw ConfigError("synthesis needs at least one target label");
  const auto classes = static_cast<std::int32_t>(teacher.config().num_classes);
  for (std::int32_t l : labels) {
    if (l < 0 || l >= classes) throw ConfigError("target label " + std::to_string(l) + " out of range");
  }
  if (!(opts.lr_img > 0.0f)) throw ConfigError("lr_img must be positive");

  const std::size_t batch = labels.size();
  Rng rng(splitmix(opts.seed));
  const Shape shape = teacher.config().input_shape(batch);
  std::vector<float> noise(shape_numel(shape));
  for (float& v : noise) v = static_cast<float>(rng.normal());
  Tensor x(shape, std::move(noise));
  const std::vector<std::int32_t> targets(labels.begin(), labels.end());

  FrozenParams frozen(teacher);
  ForwardOptions fwd;
  fwd.mode = Mode::kEval;
  fwd.update_ranges = false;
  fwd.collect_bn_inputs = true;

  std::vector<double> trace;
  trace.reserve(opts.steps + 1);
  for (std::size_t step = 0; step < opts.steps; ++step) {
    GradTape tape;
    x.set_requires_grad(true);
    ForwardResult fr = teacher.forward(x, fwd);
    Tensor bns_loss = stats_loss(fr.bn_inputs);
    Tensor ce = cross_entropy(fr.logits, targets);
    // Each image is its own optimization variable, so the class term is the
    // per-image cross-entropy summed over the batch.
    Tensor loss = add(mul(bns_loss, opts.bns_weight),
                      mul(ce, opts.ce_weight * static_cast<float>(batch)));
    trace.push_back(bns_loss.item());
    tape.backward(loss);
    const Tensor g = x.grad();
    auto xv = x.data();
    const auto gv = g.data();
    for (std::size_t i = 0; i < xv.size(); ++i) xv[i] -= opts.lr_img * gv[i];
    detail::check_finite("synthesize_batch", xv);
    x.zero_grad();
  }
  x.set_requires_grad(false);

  double final_loss = 0.0;
  {
    NoGrad off;
    final_loss = stats_loss(teacher.forward(x, fwd).bn_inputs).item();
  }
  trace.push_back(final_loss);
  std::string id = opts.tag + ":seed=" + std::to_string(opts.seed) + ":n=" + std::to_string(batch);
  return detail::SynthFactory::make(std::move(id), x.detach(), targets, final_loss,
                                    std::move(trace));
}

// --- export --------------------------------------------------------------

namespace {

constexpr char kSynthMagic[4] = {'A', 'K', 'T', 'S'};
constexpr std::uint32_t kSynthVersion = 1;

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  const U bits = std::bit_cast<U>(v);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : bytes_(b) {}
  template <typename T>
  T get() {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    need(sizeof(T));
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<U>(bytes_[pos_ + i]) << (8 * i);
    pos_ += sizeof(T);
    return std::bit_cast<T>(bits);
  }
  std::string text(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("synthesized batch file truncated", bytes_.size());
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_synth_batch(const SynthBatch& batch, const std::string& path) {
  std::vector<std::uint8_t> out(kSynthMagic, kSynthMagic + 4);
  put<std::uint32_t>(out, kSynthVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(batch.id().size()));
  out.insert(out.end(), batch.id().begin(), batch.id().end());
  for (std::size_t d : batch.images().shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  put<double>(out, batch.bns_loss_final());
  put<std::uint32_t>(out, static_cast<std::uint32_t>(batch.bns_trace().size()));
  for (double v : batch.bns_trace()) put<double>(out, v);
  for (std::int32_t l : batch.target_labels()) put<std::int32_t>(out, l);
  for (float v : batch.images().data()) put<float>(out, v);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ConfigError("cannot open '" + path + "' for writing");
  os.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!os) throw ConfigError("failed writing '" + path + "'");
}

SynthBatch read_synth_batch(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open synthesized batch '" + path + "'");
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                        std::istreambuf_iterator<char>());
  Reader r(bytes);
  if (r.text(4) != std::string(kSynthMagic, 4)) throw FormatError("bad synthesized batch magic", 0);
  if (const auto v = r.get<std::uint32_t>(); v != kSynthVersion) {
    throw FormatError("unsupported synthesized batch version " + std::to_string(v), 4);
  }
  std::string id = r.text(r.get<std::uint32_t>());
  Shape shape(4);
  for (auto& d : shape) d = r.get<std::uint32_t>();
  const double final_loss = r.get<double>();
  std::vector<double> trace(r.get<std::uint32_t>());
  for (double& v : trace) v = r.get<double>();
  std::vector<std::int32_t> labels(shape[0]);
  for (auto& l : labels) l = r.get<std::int32_t>();
  std::vector<float> pixels(shape_numel(shape));
  for (float& v : pixels) v = r.get<float>();
  if (r.pos() != bytes.size()) throw FormatError("trailing bytes in synthesized batch", r.pos());
  return detail::SynthFactory::make(std::move(id), Tensor(shape, std::move(pixels)),
                                    std::move(labels), final_loss, std::move(trace));
}

}  // namespace akt
