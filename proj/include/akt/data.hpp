// SPDX-License-Identifier: Apache-2.0
//
// Data sources. ProceduralDataset is the labeled glyph dataset used to train
// and evaluate teachers. SynthBatch is the only input the distillation loop
// accepts: it can be created solely by optimizing noise against a teacher (or
// by reloading such a batch), so no code path turns dataset samples into one.
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "akt/model.hpp"
#include "akt/tensor.hpp"

namespace akt {

struct GlyphOptions {
  std::size_t height = 16;
  std::size_t width = 16;
  float noise_std = 0.15f;
};

class ProceduralDataset {
 public:
  static constexpr std::size_t kMaxClasses = 6;

  static ProceduralDataset generate(std::uint64_t seed, std::size_t n, std::size_t classes,
                                    const GlyphOptions& opts = {});

  std::uint64_t seed() const { return seed_; }
  std::size_t size() const { return labels_.size(); }
  std::size_t num_classes() const { return classes_; }
  const Tensor& images() const { return images_; }
  const std::vector<std::int32_t>& labels() const { return labels_; }

  /// Copies the given rows into a fresh [k,1,H,W] tensor.
  Tensor gather(std::span<const std::size_t> rows) const;
  std::vector<std::int32_t> gather_labels(std::span<const std::size_t> rows) const;

  /// FNV-1a over pixel bits and labels.
  std::uint64_t checksum() const;

 private:
  ProceduralDataset() = default;
  std::uint64_t seed_ = 0;
  std::size_t classes_ = 0;
  Tensor images_;
  std::vector<std::int32_t> labels_;
};

ProceduralDataset gen_procedural(std::uint64_t seed, std::size_t n, std::size_t classes);

struct DatasetSplits {
  ProceduralDataset train;
  ProceduralDataset held_out;
};

/// Train and held-out sets drawn from disjoint seed streams.
DatasetSplits procedural_splits(std::uint64_t seed, std::size_t n_train, std::size_t n_held_out,
                                std::size_t classes);

namespace detail {
struct SynthFactory;
}

/// Access token; only the synthesizer and the batch reader can mint one.
class SynthKey {
  SynthKey() = default;
  friend struct detail::SynthFactory;
};

class SynthBatch {
 public:
  SynthBatch(SynthKey, std::string id, Tensor images, std::vector<std::int32_t> target_labels,
             double bns_loss_final, std::vector<double> bns_trace);

  const std::string& id() const { return id_; }
  const Tensor& images() const { return images_; }
  const std::vector<std::int32_t>& target_labels() const { return labels_; }
  std::size_t size() const { return labels_.size(); }
  double bns_loss_final() const { return bns_loss_final_; }
  /// Statistics loss before each step and after the last one.
  const std::vector<double>& bns_trace() const { return bns_trace_; }
  /// True when the statistics loss fell strictly over the first ten steps
  /// (or over every step if fewer ran).
  bool monotone_start() const;

 private:
  std::string id_;
  Tensor images_;
  std::vector<std::int32_t> labels_;
  double bns_loss_final_ = 0.0;
  std::vector<double> bns_trace_;
};

struct SynthOptions {
  std::size_t steps = 200;
  float lr_img = 0.05f;
  float bns_weight = 1.0f;
  float ce_weight = 1.0f;
  std::uint64_t seed = 0;
  std::string tag = "synth";
};

/// Optimizes seeded Gaussian noise by plain gradient descent on
///   bns_weight * sum_layers (|mu - mu_run|^2 + |var - var_run|^2)
///   + ce_weight * sum_samples CE(teacher(x_i), label_i)
/// so the teacher's batchnorm input moments match its running statistics and
/// its predictions match `labels`.
/// steps == 0 returns the noise unchanged. ConfigError if the teacher has no
/// batchnorm layers or its statistics were never recorded.
SynthBatch synthesize_batch(Model& teacher, std::span<const std::int32_t> labels,
                            const SynthOptions& opts);

/// Balanced, seed-shuffled target labels.
std::vector<std::int32_t> balanced_labels(std::size_t n, std::size_t classes, std::uint64_t seed);

/// Raw f32 export: "AKTS", u32 version, u32 id length, id, u32 B,C,H,W,
/// f64 final loss, u32 trace length, f64 trace, i32 labels, f32 pixels.
void write_synth_batch(const SynthBatch& batch, const std::string& path);
SynthBatch read_synth_batch(const std::string& path);

}  // namespace akt
