// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <random>

#include "akt/distill.hpp"
#include "akt/model.hpp"
#include "akt/nn.hpp"
#include "akt/ops.hpp"
#include "test_support.hpp"

using namespace akt;
using akt_test::random_tensor;

namespace {

// Direct double-precision formulas, written independently of the library.
using Rows = std::vector<std::vector<double>>;

Rows ref_att_sp(const Tensor& x) {
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Rows out(B, std::vector<double>(HW));
  for (std::size_t b = 0; b < B; ++b) {
    double norm = 0;
    for (std::size_t p = 0; p < HW; ++p) {
      double m = 0;
      for (std::size_t c = 0; c < C; ++c) m += std::pow(double(x[(b * C + c) * HW + p]), 2);
      out[b][p] = m / C;
      norm += out[b][p] * out[b][p];
    }
    for (double& v : out[b]) v /= std::sqrt(norm) + 1e-8;
  }
  return out;
}

Rows ref_att_ch(const Tensor& x, double tau) {
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Rows out(B, std::vector<double>(C));
  for (std::size_t b = 0; b < B; ++b) {
    double mx = -1e300;
    for (std::size_t c = 0; c < C; ++c) {
      double v = 0;
      for (std::size_t p = 0; p < HW; ++p) v += std::pow(double(x[(b * C + c) * HW + p]), 2);
      out[b][c] = v / HW / tau;
      mx = std::max(mx, out[b][c]);
    }
    double z = 0;
    for (double& v : out[b]) z += (v = std::exp(v - mx));
    for (double& v : out[b]) v /= z;
  }
  return out;
}

double ref_kl(const Rows& p, const Rows& q) {
  double total = 0;
  for (std::size_t r = 0; r < p.size(); ++r)
    for (std::size_t k = 0; k < p[r].size(); ++k)
      total += p[r][k] * (std::log(p[r][k] + 1e-8) - std::log(q[r][k] + 1e-8));
  return total / p.size();
}

Rows renormalize(Rows m) {
  for (auto& row : m) {
    double s = 0;
    for (double v : row) s += v;
    for (double& v : row) v /= s + 1e-8;
  }
  return m;
}

double ref_tap_loss(const Tensor& t, const Tensor& s, double tau_feat, bool sp, bool ch) {
  double l = 0;
  if (sp) l += ref_kl(renormalize(ref_att_sp(t)), renormalize(ref_att_sp(s)));
  if (ch) l += tau_feat * tau_feat * ref_kl(ref_att_ch(t, tau_feat), ref_att_ch(s, tau_feat));
  return l;
}

Tensor feature(Shape shape, std::mt19937_64& rng) { return random_tensor(std::move(shape), rng, -2, 2); }

}  // namespace

TEST_SUITE("attention maps") {
  TEST_CASE("spatial map of a constant input is uniform with unit norm") {
    Tensor x({1, 3, 2, 2}, 1.7f);
    const Tensor a = att_sp(x);
    for (float v : a.data()) CHECK(v == doctest::Approx(0.5).epsilon(1e-6));
  }

  TEST_CASE("spatial map matches the direct formula and ignores input scale") {
    std::mt19937_64 rng(1);
    Tensor x = feature({2, 3, 3, 3}, rng);
    const Tensor a = att_sp(x);
    CHECK(a.shape() == Shape{2, 3, 3});
    const Rows ref = ref_att_sp(x);
    for (std::size_t b = 0; b < 2; ++b) {
      double norm = 0;
      for (std::size_t p = 0; p < 9; ++p) {
        CHECK(std::abs(a[b * 9 + p] - ref[b][p]) < 1e-6);
        CHECK(a[b * 9 + p] >= 0.0f);
        norm += double(a[b * 9 + p]) * a[b * 9 + p];
      }
      CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-6));
    }
    for (float c : {-3.0f, 0.25f, 11.0f}) {
      const Tensor scaled = att_sp(mul(x, c));
      for (std::size_t i = 0; i < a.numel(); ++i) CHECK(std::abs(scaled[i] - a[i]) < 1e-6);
    }
  }

  TEST_CASE("an all-zero map stays zero and is flagged") {
    Tensor z({1, 2, 3, 3}, 0.0f);
    const Tensor az = att_sp(z);
    for (float v : az.data()) CHECK(v == 0.0f);
    std::mt19937_64 rng(2);
    std::vector<FeatureTap> taps{{0, feature({1, 2, 3, 3}, rng), z}};
    LossConfig cfg;
    const auto lv = loss_rfd(taps, cfg);
    CHECK(lv.breakdown.zero_spatial_maps == 1);
    CHECK(std::isfinite(lv.loss.item()));
  }

  TEST_CASE("channel map examples") {
    Tensor same({1, 4, 2, 2}, 0.6f);
    const Tensor u = att_ch(same, 8.0f);
    for (float v : u.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-6));

    // pooled squared means [0, 8 ln 3] -> [0.25, 0.75]
    Tensor two({1, 2, 2, 2}, 0.0f);
    const float level = std::sqrt(8.0f * std::log(3.0f));
    for (std::size_t i = 4; i < 8; ++i) two.data()[i] = level;
    const Tensor p = att_ch(two, 8.0f);
    CHECK(p[0] == doctest::Approx(0.25).epsilon(1e-6));
    CHECK(p[1] == doctest::Approx(0.75).epsilon(1e-6));
  }

  TEST_CASE("channel map matches the direct formula and is a distribution") {
    std::mt19937_64 rng(3);
    Tensor x = feature({3, 5, 4, 4}, rng);
    const Tensor a = att_ch(x, 8.0f);
    const Rows ref = ref_att_ch(x, 8.0);
    for (std::size_t b = 0; b < 3; ++b) {
      double total = 0;
      for (std::size_t c = 0; c < 5; ++c) {
        CHECK(std::abs(a[b * 5 + c] - ref[b][c]) < 1e-6);
        CHECK(a[b * 5 + c] > 0.0f);
        total += a[b * 5 + c];
      }
      CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
    }
  }

  TEST_CASE("maps reject non-4D inputs") {
    CHECK_THROWS_AS(att_sp(Tensor({2, 3})), ConfigError);
    CHECK_THROWS_AS(att_ch(Tensor({2, 3, 4}), 8.0f), ConfigError);
  }
}

TEST_SUITE("logit distillation") {
  TEST_CASE("identical logits give zero") {
    std::mt19937_64 rng(4);
    Tensor t = random_tensor({5, 4}, rng, -10, 10);
    CHECK(std::abs(loss_logit_kd(t, t.clone(), 20.0f).item()) <= 1e-9);
  }

  TEST_CASE("two-class hand value") {
    // KL([.25,.75] || [.5,.5]) = .25 ln .5 + .75 ln 1.5
    Tensor t({1, 2}, {0.0f, std::log(3.0f)});
    Tensor s({1, 2}, {0.0f, 0.0f});
    const double expected = 0.25 * std::log(0.5) + 0.75 * std::log(1.5);
    CHECK(expected == doctest::Approx(0.13081).epsilon(1e-4));
    CHECK(loss_logit_kd(t, s, 1.0f).item() == doctest::Approx(expected).epsilon(1e-6));
  }

  TEST_CASE("non-negative on random inputs and scaled by tau squared") {
    std::mt19937_64 rng(5);
    for (int i = 0; i < 50; ++i) {
      Tensor t = random_tensor({3, 6}, rng, -30, 30), s = random_tensor({3, 6}, rng, -30, 30);
      CHECK(loss_logit_kd(t, s, 20.0f).item() >= 0.0f);
    }
    Tensor t = random_tensor({2, 3}, rng), s = random_tensor({2, 3}, rng);
    const double kl = kl_rows(softmax(t, 4.0f, 1), softmax(s, 4.0f, 1)).item();
    CHECK(loss_logit_kd(t, s, 4.0f).item() == doctest::Approx(16.0 * kl).epsilon(1e-6));
  }

  TEST_CASE("the teacher side receives no gradient") {
    std::mt19937_64 rng(6);
    Tensor t = random_tensor({2, 3}, rng), s = random_tensor({2, 3}, rng);
    t.set_requires_grad(true);
    s.set_requires_grad(true);
    GradTape tape;
    tape.backward(loss_logit_kd(t, s, 2.0f));
    CHECK_FALSE(t.has_grad());
    CHECK(s.has_grad());
  }

  TEST_CASE("shape mismatch") {
    CHECK_THROWS_AS(loss_logit_kd(Tensor({2, 3}), Tensor({2, 4}), 1.0f), ConfigError);
    CHECK_THROWS_AS(kl_rows(Tensor({2, 3}), Tensor({3, 2})), ConfigError);
  }
}

TEST_SUITE("feature distillation") {
  TEST_CASE("identical taps give zero") {
    std::mt19937_64 rng(7);
    Tensor a = feature({2, 4, 4, 4}, rng), b = feature({2, 8, 2, 2}, rng);
    std::vector<FeatureTap> taps{{0, a, a.clone()}, {1, b, b.clone()}};
    const auto lv = loss_rfd(taps, LossConfig{});
    CHECK(std::abs(lv.loss.item()) <= 1e-9);
    CHECK(std::abs(*lv.breakdown.l_rfd) <= 1e-9);
  }

  TEST_CASE("two taps compose from single-tap oracle values") {
    std::mt19937_64 rng(8);
    Tensor t0 = feature({2, 3, 4, 4}, rng), s0 = feature({2, 3, 4, 4}, rng);
    Tensor t1 = feature({2, 5, 2, 2}, rng), s1 = feature({2, 5, 2, 2}, rng);
    std::vector<FeatureTap> taps{{0, t0, s0}, {1, t1, s1}};
    LossConfig cfg;
    cfg.lambda = 1.7f;
    const double l0 = ref_tap_loss(t0, s0, 8.0, true, true);
    const double l1 = ref_tap_loss(t1, s1, 8.0, true, true);
    const auto lv = loss_rfd(taps, cfg);
    CHECK(lv.loss.item() == doctest::Approx(1.7 * 0.5 * (l0 + l1)).epsilon(1e-6));
    CHECK(*lv.breakdown.l_rfd == doctest::Approx(1.7 * 0.5 * (l0 + l1)).epsilon(1e-6));
    const double sp = 0.5 * (ref_tap_loss(t0, s0, 8.0, true, false) + ref_tap_loss(t1, s1, 8.0, true, false));
    CHECK(*lv.breakdown.l_sp == doctest::Approx(sp).epsilon(1e-6));
  }

  TEST_CASE("doubling lambda doubles the loss") {
    std::mt19937_64 rng(9);
    std::vector<FeatureTap> taps{{0, feature({2, 3, 4, 4}, rng), feature({2, 3, 4, 4}, rng)}};
    LossConfig cfg;
    const double one = loss_rfd(taps, cfg).loss.item();
    cfg.lambda = 2.0f;
    CHECK(loss_rfd(taps, cfg).loss.item() == doctest::Approx(2.0 * one).epsilon(1e-7));
  }

  TEST_CASE("mode algebra: rfd = spatial + channel") {
    std::mt19937_64 rng(10);
    for (int trial = 0; trial < 5; ++trial) {
      std::vector<FeatureTap> taps{{0, feature({3, 4, 4, 4}, rng), feature({3, 4, 4, 4}, rng)},
                                   {1, feature({3, 8, 2, 2}, rng), feature({3, 8, 2, 2}, rng)}};
      LossConfig cfg;
      cfg.mode = LossMode::kRfd;
      const auto rfd = loss_rfd(taps, cfg);
      cfg.mode = LossMode::kSpatial;
      const auto sp = loss_rfd(taps, cfg);
      cfg.mode = LossMode::kChannel;
      const auto ch = loss_rfd(taps, cfg);
      CHECK(rfd.loss.item() == doctest::Approx(sp.loss.item() + ch.loss.item()).epsilon(1e-6));
      CHECK(*sp.breakdown.l_ch == 0.0);
      CHECK(*ch.breakdown.l_sp == 0.0);
    }
  }

  TEST_CASE("non-negative on random taps") {
    std::mt19937_64 rng(11);
    for (int i = 0; i < 30; ++i) {
      std::vector<FeatureTap> taps{{0, feature({2, 3, 3, 3}, rng), feature({2, 3, 3, 3}, rng)}};
      CHECK(loss_rfd(taps, LossConfig{}).loss.item() >= 0.0f);
    }
  }

  TEST_CASE("teacher maps are detached") {
    std::mt19937_64 rng(12);
    Tensor t = feature({2, 3, 3, 3}, rng), s = feature({2, 3, 3, 3}, rng);
    t.set_requires_grad(true);
    s.set_requires_grad(true);
    std::vector<FeatureTap> taps{{0, t, s}};
    GradTape tape;
    tape.backward(loss_rfd(taps, LossConfig{}).loss);
    CHECK_FALSE(t.has_grad());
    CHECK(s.has_grad());
  }

  TEST_CASE("the L2 spatial divergence") {
    std::mt19937_64 rng(13);
    Tensor t = feature({2, 3, 3, 3}, rng), s = feature({2, 3, 3, 3}, rng);
    std::vector<FeatureTap> taps{{0, t, s}};
    LossConfig cfg;
    cfg.mode = LossMode::kSpatial;
    cfg.spatial = SpatialDivergence::kL2;
    const Rows a = ref_att_sp(t), b = ref_att_sp(s);
    double d = 0;
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t k = 0; k < 9; ++k) d += std::pow(a[r][k] - b[r][k], 2);
    CHECK(loss_rfd(taps, cfg).loss.item() == doctest::Approx(d / 2).epsilon(1e-6));
    CHECK(parse_spatial_divergence("l2") == SpatialDivergence::kL2);
    CHECK_THROWS_AS(parse_spatial_divergence("cosine"), ConfigError);
  }

  TEST_CASE("errors") {
    std::mt19937_64 rng(14);
    std::vector<FeatureTap> bad{{0, feature({1, 2, 4, 4}, rng), feature({1, 2, 4, 4}, rng)},
                                {1, feature({1, 4, 2, 2}, rng), feature({1, 4, 4, 4}, rng)}};
    try {
      (void)loss_rfd(bad, LossConfig{});
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("stage 1") != std::string::npos);
    }
    CHECK_THROWS_AS(loss_rfd({}, LossConfig{}), ConfigError);
    LossConfig lc;
    lc.mode = LossMode::kLogitOnly;
    CHECK_THROWS_AS(loss_rfd(bad, lc), ConfigError);
  }
}

TEST_SUITE("combined objective") {
  TEST_CASE("loss_akt arithmetic and endpoints") {
    CHECK(loss_akt(2.0, 4.0, 0.5) == 3.0);
    CHECK(loss_akt(2.0, 4.0, 0.0) == 4.0);
    CHECK(loss_akt(2.0, 4.0, 1.0) == 2.0);
    CHECK_THROWS_AS(loss_akt(2.0, 4.0, 1.5), ConfigError);
    CHECK_THROWS_AS(loss_akt(2.0, 4.0, -0.1), ConfigError);
    CHECK_THROWS_AS(loss_akt(Tensor::scalar(1), Tensor::scalar(1), 2.0f), ConfigError);
  }

  TEST_CASE("config validation and mode names") {
    LossConfig c;
    c.alpha = 1.2f;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = LossConfig{};
    c.tau_feat = 0.0f;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    for (auto m : {LossMode::kLogitOnly, LossMode::kSpatial, LossMode::kChannel, LossMode::kRfd})
      CHECK(parse_loss_mode(loss_mode_name(m)) == m);
    CHECK_THROWS_AS(parse_loss_mode("both"), ConfigError);
    c = LossConfig{};
    c.mode = LossMode::kLogitOnly;
    CHECK(c.effective_alpha() == 0.0f);
  }

  TEST_CASE("breakdown invariants") {
    std::mt19937_64 rng(15);
    std::vector<FeatureTap> taps{{0, feature({4, 3, 4, 4}, rng), feature({4, 3, 4, 4}, rng)},
                                 {1, feature({4, 6, 2, 2}, rng), feature({4, 6, 2, 2}, rng)}};
    Tensor tl = random_tensor({4, 5}, rng, -20, 20), sl = random_tensor({4, 5}, rng, -20, 20);
    LossConfig cfg;
    cfg.alpha = 0.3f;
    cfg.lambda = 1.4f;
    const auto lv = akt_objective(tl, sl, taps, cfg);
    const auto& b = lv.breakdown;
    CHECK(*b.l_rfd == doctest::Approx(1.4 * (*b.l_sp + *b.l_ch)).epsilon(1e-6));
    CHECK(b.l_akt == doctest::Approx(0.3 * *b.l_rfd + 0.7 * b.l_kl).epsilon(1e-6));
    CHECK(lv.loss.item() == doctest::Approx(b.l_akt).epsilon(1e-6));
    for (double v : {*b.l_sp, *b.l_ch, *b.l_rfd, b.l_kl, b.l_akt}) CHECK(v >= 0.0);
  }

  TEST_CASE("alpha endpoints select a single term") {
    std::mt19937_64 rng(16);
    std::vector<FeatureTap> taps{{0, feature({2, 3, 4, 4}, rng), feature({2, 3, 4, 4}, rng)}};
    Tensor tl = random_tensor({2, 4}, rng, -5, 5), sl = random_tensor({2, 4}, rng, -5, 5);
    LossConfig cfg;
    cfg.alpha = 0.0f;
    CHECK(akt_objective(tl, sl, taps, cfg).loss.item() ==
          doctest::Approx(loss_logit_kd(tl, sl, cfg.tau_logit).item()).epsilon(1e-6));
    cfg.alpha = 1.0f;
    CHECK(akt_objective(tl, sl, taps, cfg).loss.item() ==
          doctest::Approx(loss_rfd(taps, cfg).loss.item()).epsilon(1e-6));
  }

  TEST_CASE("logit-only mode never evaluates the feature loss") {
    // Mismatched taps would throw if the feature loss were computed.
    std::mt19937_64 rng(17);
    std::vector<FeatureTap> bad{{0, feature({1, 2, 4, 4}, rng), feature({1, 3, 4, 4}, rng)}};
    Tensor tl = random_tensor({1, 4}, rng), sl = random_tensor({1, 4}, rng);
    LossConfig cfg;
    cfg.mode = LossMode::kLogitOnly;
    const auto lv = akt_objective(tl, sl, bad, cfg);
    CHECK_FALSE(lv.breakdown.l_rfd.has_value());
    CHECK_FALSE(lv.breakdown.l_sp.has_value());
    CHECK(lv.breakdown.l_akt == lv.breakdown.l_kl);
    cfg.mode = LossMode::kRfd;
    CHECK_THROWS_AS(akt_objective(tl, sl, bad, cfg), ConfigError);
  }

  TEST_CASE("objective gradient is the alpha mix of the term gradients") {
    ModelConfig mc;
    Model teacher = Model::build(mc, 1);
    Model student = quantize_model(Model::build(mc, 2), {4, 4});
    std::mt19937_64 rng(18);
    const Tensor x = random_tensor({4, 1, 16, 16}, rng, 0, 1);
    (void)student.forward(x, {Mode::kEval, true});  // calibrate activation ranges
    ForwardResult t;
    {
      NoGrad off;
      t = teacher.forward(x, {});
    }
    auto grads_of = [&](auto loss_fn) {
      auto params = student.parameters();
      for (auto& p : params) {
        p.tensor.set_requires_grad(true);
        p.tensor.zero_grad();
      }
      GradTape tape;
      ForwardResult s = student.forward(x, {Mode::kEval, false});
      std::vector<FeatureTap> taps;
      for (std::size_t i = 0; i < s.taps.size(); ++i) taps.push_back({i, t.taps[i], s.taps[i]});
      tape.backward(loss_fn(s.logits, taps));
      std::vector<double> g;
      for (const auto& p : params) {
        const Tensor pg = p.tensor.grad();
        g.insert(g.end(), pg.data().begin(), pg.data().end());
      }
      return g;
    };
    LossConfig cfg;
    cfg.alpha = 0.35f;
    const auto full = grads_of([&](const Tensor& sl, const std::vector<FeatureTap>& taps) {
      return akt_objective(t.logits, sl, taps, cfg).loss;
    });
    const auto rfd = grads_of([&](const Tensor&, const std::vector<FeatureTap>& taps) {
      return loss_rfd(taps, cfg).loss;
    });
    const auto kl = grads_of([&](const Tensor& sl, const std::vector<FeatureTap>&) {
      return loss_logit_kd(t.logits, sl, cfg.tau_logit);
    });
    REQUIRE(full.size() == rfd.size());
    double worst = 0;
    for (std::size_t i = 0; i < full.size(); ++i) {
      const double mix = 0.35 * rfd[i] + 0.65 * kl[i];
      worst = std::max(worst, std::abs(full[i] - mix) / std::max(1.0, std::abs(mix)));
    }
    CHECK(worst <= 1e-6);
  }

  TEST_CASE("every distillation loss matches central differences") {
    for (const auto& c : akt_test::distill_grad_cases()) {
      for (std::uint64_t seed : {1u, 2u, 3u}) {
        CAPTURE(c.name);
        CAPTURE(seed);
        const auto r = akt_test::run_case(c, seed);
        INFO(r.where);
        CHECK(r.worst < 1e-2);
      }
    }
  }
}
