// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cstring>
#include <fstream>
#include <random>

#include "akt/model.hpp"
#include "akt/ops.hpp"
#include "fixtures.hpp"
#include "test_support.hpp"

using namespace akt;

namespace {

bool same_bits(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)) == 0;
}

std::uint32_t read_u32(std::span<const std::uint8_t> b, std::size_t at) {
  return std::uint32_t(b[at]) | std::uint32_t(b[at + 1]) << 8 | std::uint32_t(b[at + 2]) << 16 |
         std::uint32_t(b[at + 3]) << 24;
}

Tensor random_images(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return akt_test::random_tensor({n, 1, 16, 16}, rng, 0.0f, 1.0f);
}

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("parameter count follows layer arithmetic") {
    // stem 1->8 3x3 + bn; stage1 8->8 (two 3x3 convs + bns);
    // stage2 8->16 (4x4 s2, 3x3, 2x2 shortcut, three bns); stage3 16->32 likewise; fc 32->4.
    const std::size_t stem = 8 * 1 * 9 + 2 * 8;
    const std::size_t stage1 = 2 * (8 * 8 * 9) + 2 * (2 * 8);
    const std::size_t stage2 = 16 * 8 * 16 + 16 * 16 * 9 + 16 * 8 * 4 + 3 * (2 * 16);
    const std::size_t stage3 = 32 * 16 * 16 + 32 * 32 * 9 + 32 * 16 * 4 + 3 * (2 * 32);
    const std::size_t head = 32 * 4 + 4;
    const std::size_t expected = stem + stage1 + stage2 + stage3 + head;
    CHECK(expected == 26012);
    CHECK(Model::build(ModelConfig{}, 0).parameter_count() == expected);
  }

  TEST_CASE("same seed gives bit-identical parameters") {
    Model a = Model::build(ModelConfig{}, 42), b = Model::build(ModelConfig{}, 42);
    Model c = Model::build(ModelConfig{}, 43);
    const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
    REQUIRE(pa.size() == pb.size());
    bool any_diff = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
      CHECK(pa[i].name == pb[i].name);
      CHECK(same_bits(pa[i].tensor, pb[i].tensor));
      any_diff |= !same_bits(pa[i].tensor, pc[i].tensor);
    }
    CHECK(any_diff);
  }

  TEST_CASE("one tap per stage with the expected shapes") {
    Model m = Model::build(ModelConfig{}, 1);
    const auto out = forward_with_taps(m, random_images(1, 2), Mode::kEval);
    CHECK(out.logits.shape() == Shape{1, 4});
    REQUIRE(out.taps.size() == 3);
    CHECK(out.taps[0].shape() == Shape{1, 8, 16, 16});
    CHECK(out.taps[1].shape() == Shape{1, 16, 8, 8});
    CHECK(out.taps[2].shape() == Shape{1, 32, 4, 4});
    ModelConfig deep;
    deep.stages = 2;
    deep.blocks_per_stage = 2;
    Model d = Model::build(deep, 1);
    CHECK(forward_with_taps(d, random_images(2, 2), Mode::kEval).taps.size() == deep.tap_count());
  }

  TEST_CASE("post-activation taps are non-negative, pre-activation taps are not") {
    ModelConfig cfg;
    Model post = Model::build(cfg, 1);
    cfg.tap_point = TapPoint::kPreActivation;
    Model pre = Model::build(cfg, 1);
    const Tensor x = random_images(4, 3);
    bool pre_negative = false;
    for (const auto& t : forward_with_taps(post, x, Mode::kEval).taps)
      for (float v : t.data()) CHECK(v >= 0.0f);
    for (const auto& t : forward_with_taps(pre, x, Mode::kEval).taps)
      for (float v : t.data()) pre_negative |= v < 0.0f;
    CHECK(pre_negative);
    CHECK(parse_tap_point(tap_point_name(TapPoint::kPreActivation)) == TapPoint::kPreActivation);
    CHECK_THROWS_AS(parse_tap_point("middle"), ConfigError);
  }

  TEST_CASE("eval forward is a pure function of weights and input") {
    Model m = Model::build(ModelConfig{}, 5);
    const Tensor x = random_images(3, 4);
    const auto a = m.forward(x, {}), b = m.forward(x, {});
    CHECK(same_bits(a.logits, b.logits));
    for (std::size_t i = 0; i < a.taps.size(); ++i) CHECK(same_bits(a.taps[i], b.taps[i]));
  }

  TEST_CASE("invalid configurations and inputs") {
    ModelConfig bad;
    bad.stages = 0;
    CHECK_THROWS_AS(Model::build(bad, 0), ConfigError);
    bad = ModelConfig{};
    bad.num_classes = 1;
    CHECK_THROWS_AS(Model::build(bad, 0), ConfigError);
    bad = ModelConfig{};
    bad.stages = 6;  // 16 -> 8 -> 4 -> 2 -> 1 -> ?
    CHECK_THROWS_AS(Model::build(bad, 0), ConfigError);
    Model m = Model::build(ModelConfig{}, 0);
    CHECK_THROWS_AS(m.forward(Tensor({1, 1, 8, 8}), {}), ConfigError);
  }

  TEST_CASE("training mode updates batchnorm statistics unless frozen") {
    Model m = Model::build(ModelConfig{}, 6);
    const Tensor x = random_images(8, 5);
    const float before = m.batchnorm_layers().front()->stats.mean[0];
    m.set_bn_frozen(true);
    (void)m.forward(x, {Mode::kTrain});
    CHECK(m.batchnorm_layers().front()->stats.mean[0] == before);
    m.set_bn_frozen(false);
    (void)m.forward(x, {Mode::kTrain});
    CHECK(m.batchnorm_layers().front()->stats.mean[0] != before);
  }

  TEST_CASE("clone is deep") {
    Model m = Model::build(ModelConfig{}, 7);
    Model c = m.clone();
    c.parameters().front().tensor.data()[0] += 1.0f;
    CHECK(m.parameters().front().tensor[0] != c.parameters().front().tensor[0]);
  }

  TEST_CASE("baking weight quantization keeps the forward pass") {
    Model m = Model::build(ModelConfig{}, 8);
    Model q = quantize_model(m, {3, 32});
    const Tensor x = random_images(2, 6);
    const auto before = q.forward(x, {}).logits;
    q.bake_weight_quantization();
    CHECK(q.weight_quantizer_count() == 0);
    const auto after = q.forward(x, {}).logits;
    for (std::size_t i = 0; i < before.numel(); ++i) CHECK(after[i] == doctest::Approx(before[i]).epsilon(1e-5));
  }

  TEST_CASE("accuracy helpers") {
    const std::vector<std::int32_t> p{0, 1, 2, 1}, l{0, 1, 1, 1};
    CHECK(top1_accuracy(p, l) == 0.75);
    CHECK_THROWS_AS(top1_accuracy(p, std::vector<std::int32_t>{0}), ConfigError);
  }
}

TEST_SUITE("checkpoint") {
  TEST_CASE("round trip is bit-exact and re-encoding is byte-identical") {
    Model m = Model::build(ModelConfig{}, 11);
    (void)m.forward(random_images(8, 1), {Mode::kTrain});  // non-trivial running stats
    const auto bytes = encode_checkpoint(m, {{"kind", "test"}});
    auto loaded = decode_checkpoint(bytes);
    CHECK(loaded.meta.at("kind") == "test");
    CHECK(loaded.model.config() == m.config());
    const auto a = m.state(), b = loaded.model.state();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].name == b[i].name);
      CHECK(same_bits(a[i].tensor, b[i].tensor));
    }
    CHECK(encode_checkpoint(loaded.model, loaded.meta) == bytes);
  }

  TEST_CASE("file save, load, save gives identical bytes") {
    const auto dir = akt_test::scratch_dir("ckpt_files");
    Model m = Model::build(ModelConfig{}, 12);
    save_checkpoint(m, (dir / "a.aktc").string(), {{"note", "x"}});
    auto loaded = read_checkpoint((dir / "a.aktc").string());
    save_checkpoint(loaded.model, (dir / "b.aktc").string(), loaded.meta);
    CHECK(akt_test::slurp(dir / "a.aktc") == akt_test::slurp(dir / "b.aktc"));
    CHECK_THROWS_AS(load_checkpoint((dir / "missing.aktc").string()), ConfigError);
  }

  TEST_CASE("layout: magic, version, header, little-endian float32") {
    Model m = Model::build(ModelConfig{}, 13);
    const auto bytes = encode_checkpoint(m);
    CHECK(std::memcmp(bytes.data(), "AKTC", 4) == 0);
    CHECK(read_u32(bytes, 4) == kCheckpointVersion);
    const std::uint32_t header_len = read_u32(bytes, 8);
    // A freshly built batchnorm has gamma == 1.0.
    std::size_t offset = 12 + header_len;
    bool found = false;
    for (const auto& nt : m.state()) {
      if (nt.name == "stem.bn.gamma") {
        REQUIRE(nt.tensor[0] == 1.0f);
        const std::uint8_t one[4] = {0x00, 0x00, 0x80, 0x3F};
        CHECK(std::memcmp(bytes.data() + offset, one, 4) == 0);
        found = true;
        break;
      }
      offset += nt.tensor.numel() * 4;
    }
    CHECK(found);
    std::size_t total = 12 + header_len;
    for (const auto& nt : m.state()) total += nt.tensor.numel() * 4;
    CHECK(bytes.size() == total);
  }

  TEST_CASE("corrupt inputs are format errors with offsets") {
    Model m = Model::build(ModelConfig{}, 14);
    const auto bytes = encode_checkpoint(m);
    SUBCASE("truncated body") {
      std::vector<std::uint8_t> cut(bytes.begin(), bytes.end() - 10);
      CHECK_THROWS_AS(decode_checkpoint(cut), FormatError);
    }
    SUBCASE("truncated preamble") {
      std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + 7);
      CHECK_THROWS_AS(decode_checkpoint(cut), FormatError);
    }
    SUBCASE("truncated header") {
      std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + 40);
      CHECK_THROWS_AS(decode_checkpoint(cut), FormatError);
    }
    SUBCASE("bad magic") {
      auto bad = bytes;
      bad[0] = 'X';
      try {
        decode_checkpoint(bad);
        FAIL("expected FormatError");
      } catch (const FormatError& e) {
        CHECK(e.offset() == 0);
      }
    }
    SUBCASE("version mismatch") {
      auto bad = bytes;
      bad[4] = 2;
      try {
        decode_checkpoint(bad);
        FAIL("expected FormatError");
      } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("version") != std::string::npos);
      }
    }
    SUBCASE("trailing bytes") {
      auto bad = bytes;
      bad.push_back(0);
      CHECK_THROWS_AS(decode_checkpoint(bad), FormatError);
    }
  }

  TEST_CASE("quantized checkpoints keep bit-widths and activation ranges") {
    Model m = Model::build(ModelConfig{}, 15);
    Model q = quantize_model(m, {3, 4});
    (void)q.forward(random_images(4, 7), {Mode::kEval, true});
    auto loaded = decode_checkpoint(encode_checkpoint(q));
    CHECK(loaded.model.quant_spec().weight_bits == 3);
    CHECK(loaded.model.quant_spec().act_bits == 4);
    const auto a = q.activation_quantizers();
    const auto b = loaded.model.activation_quantizers();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i]->tracker.x_min() == b[i]->tracker.x_min());
      CHECK(a[i]->tracker.x_max() == b[i]->tracker.x_max());
    }
    const Tensor x = random_images(2, 8);
    CHECK(same_bits(q.forward(x, {}).logits, loaded.model.forward(x, {}).logits));
  }

  TEST_CASE("trained teacher reproduces its logits after a round trip") {
    const auto& fx = akt_test::small_teacher();
    auto first = read_checkpoint(fx.checkpoint);
    auto second = decode_checkpoint(encode_checkpoint(first.model, first.meta));
    const Tensor x = random_images(16, 9);
    const auto a = first.model.forward(x, {}).logits;
    const auto b = second.model.forward(x, {}).logits;
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(std::abs(a[i] - b[i]) <= 1e-5);
  }
}
