// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <random>

#include "akt/nn.hpp"
#include "akt/ops.hpp"
#include "akt/optim.hpp"
#include "akt/tensor.hpp"
#include "test_support.hpp"

using namespace akt;
using akt_test::random_tensor;

namespace {

std::vector<float> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)) == 0;
}

Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += double(a[i * k + p]) * b[p * n + j];
      c.data()[i * n + j] = static_cast<float>(acc);
    }
  return c;
}

Tensor naive_conv(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
  Tensor y({B, O, Ho, Wo});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double acc = 0.0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t u = 0; u < kh; ++u)
              for (std::size_t v = 0; v < kw; ++v) {
                const long r = long(i * stride + u) - long(pad);
                const long s = long(j * stride + v) - long(pad);
                if (r < 0 || s < 0 || r >= long(H) || s >= long(W)) continue;
                acc += double(x[((b * C + c) * H + r) * W + s]) * w[((o * C + c) * kh + u) * kw + v];
              }
          y.data()[((b * O + o) * Ho + i) * Wo + j] = static_cast<float>(acc);
        }
  return y;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, double(std::abs(a[i] - b[i])));
  return m;
}

}  // namespace

TEST_SUITE("tensor") {
  TEST_CASE("shape and data length agree") {
    Tensor t({2, 3, 4});
    CHECK(t.numel() == 24);
    CHECK(t.data().size() == shape_numel(t.shape()));
    CHECK_THROWS_AS(Tensor({2, 3}, std::vector<float>(5)), ConfigError);
    CHECK_THROWS_AS(Tensor({2, 0}), ConfigError);
  }

  TEST_CASE("copies alias, clone and detach do not") {
    Tensor a({2}, {1, 2});
    Tensor alias = a;
    Tensor deep = a.clone();
    alias.data()[0] = 7;
    CHECK(a[0] == 7);
    CHECK(deep[0] == 1);
    a.set_requires_grad(true);
    CHECK_FALSE(a.detach().requires_grad());
  }

  TEST_CASE("elementwise examples") {
    CHECK(values(square(Tensor({3}, {1, -2, 3}))) == std::vector<float>{1, 4, 9});
    CHECK(values(relu(Tensor({3}, {-1, 0, 2}))) == std::vector<float>{0, 0, 2});
    // ln(1e-8) = -18.420680743952367...
    CHECK(log(Tensor({1}, {0.0f})).item() == doctest::Approx(-18.420680743952367).epsilon(1e-6));
    CHECK(values(div(Tensor({2}, {1, 3}), 2.0f))[1] == doctest::Approx(1.5));
    CHECK(values(add(Tensor({2}, {1, 3}), Tensor({2}, {4, 5}))) == std::vector<float>{5, 8});
  }

  TEST_CASE("elementwise shape mismatch is a configuration error") {
    CHECK_THROWS_AS(add(Tensor({2, 3}), Tensor({3, 2})), ConfigError);
    CHECK_THROWS_AS(mul(Tensor({4}), Tensor({2})), ConfigError);
  }

  TEST_CASE("non-finite result is a numeric error naming the op") {
    try {
      (void)exp(Tensor({2}, {1.0f, 200.0f}));
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("exp") != std::string::npos);
    }
    CHECK_THROWS_AS(mul(Tensor({1}, {std::numeric_limits<float>::infinity()}), 0.0f), NumericError);
  }

  TEST_CASE("matmul") {
    Tensor eye({2, 2}, {1, 0, 0, 1});
    Tensor a({2, 2}, {1, 2, 3, 4});
    CHECK(values(matmul(eye, a)) == values(a));
    CHECK(values(matmul(a, Tensor({2, 1}, {1, 1}))) == std::vector<float>{3, 7});
    std::mt19937_64 rng(3);
    Tensor x = random_tensor({3, 4}, rng), y = random_tensor({4, 2}, rng);
    CHECK(max_abs_diff(matmul(x, y), naive_matmul(x, y)) < 1e-6);
    CHECK_THROWS_AS(matmul(x, x), ConfigError);
  }

  TEST_CASE("matmul on shapes that exercise every kernel tail") {
    std::mt19937_64 rng(4);
    for (auto [m, k, n] : {std::tuple{37, 53, 29}, {8, 16, 16}, {1, 1, 1}, {17, 33, 48}}) {
      Tensor x = random_tensor({std::size_t(m), std::size_t(k)}, rng);
      Tensor y = random_tensor({std::size_t(k), std::size_t(n)}, rng);
      CHECK(max_abs_diff(matmul(x, y), naive_matmul(x, y)) < 1e-5);
    }
  }

  TEST_CASE("conv2d examples") {
    Tensor ones({1, 1, 3, 3}, 1.0f);
    Tensor out = conv2d(ones, ones, {1, 0});
    CHECK(out.shape() == Shape{1, 1, 1, 1});
    CHECK(out.item() == 9.0f);

    std::mt19937_64 rng(5);
    Tensor x = random_tensor({2, 1, 5, 5}, rng);
    Tensor delta({1, 1, 3, 3}, 0.0f);
    delta.data()[4] = 1.0f;
    CHECK(values(conv2d(x, delta, {1, 1})) == values(x));
  }

  TEST_CASE("conv2d against the direct loop") {
    std::mt19937_64 rng(6);
    struct Case { Shape x, w; std::size_t stride, pad; };
    for (const auto& c : {Case{{2, 3, 7, 7}, {4, 3, 3, 3}, 1, 1}, Case{{2, 3, 8, 8}, {5, 3, 4, 4}, 2, 1},
                          Case{{1, 4, 6, 6}, {3, 4, 2, 2}, 2, 0}, Case{{3, 2, 5, 5}, {2, 2, 1, 1}, 1, 0}}) {
      Tensor x = random_tensor(c.x, rng), w = random_tensor(c.w, rng);
      CHECK(max_abs_diff(conv2d(x, w, {c.stride, c.pad}), naive_conv(x, w, c.stride, c.pad)) < 1e-5);
    }
  }

  TEST_CASE("conv2d with non-integral output size is rejected") {
    CHECK_THROWS_AS(conv2d(Tensor({1, 1, 4, 4}), Tensor({1, 1, 3, 3}), {2, 0}), ConfigError);
    CHECK_THROWS_AS(conv2d(Tensor({1, 1, 2, 2}), Tensor({1, 1, 3, 3}), {1, 0}), ConfigError);
    CHECK_THROWS_AS(conv2d(Tensor({1, 2, 4, 4}), Tensor({1, 3, 3, 3}), {1, 1}), ConfigError);
  }

  TEST_CASE("batchnorm") {
    SUBCASE("zero variance normalizes to zero") {
      Tensor x({4, 2, 1, 1}, 3.0f);
      auto stats = RunningStats::fresh(2);
      Tensor y = batchnorm(x, Tensor::ones({2}), Tensor::zeros({2}), stats, {true});
      for (float v : y.data()) CHECK(v == 0.0f);
    }
    SUBCASE("running mean follows the EMA") {
      Tensor x({2, 1, 1, 1}, 1.0f);
      auto stats = RunningStats::fresh(1);
      (void)batchnorm(x, Tensor::ones({1}), Tensor::zeros({1}), stats, {true, 0.9f});
      CHECK(stats.mean[0] == doctest::Approx(0.1).epsilon(1e-7));
    }
    SUBCASE("training output has unit moments per channel") {
      std::mt19937_64 rng(8);
      Tensor x = random_tensor({8, 3, 4, 4}, rng, -3, 5);
      auto stats = RunningStats::fresh(3);
      Tensor y = batchnorm(x, Tensor::ones({3}), Tensor::zeros({3}), stats, {true});
      for (std::size_t c = 0; c < 3; ++c) {
        double m = 0, m2 = 0;
        std::size_t n = 0;
        for (std::size_t b = 0; b < 8; ++b)
          for (std::size_t i = 0; i < 16; ++i) {
            const double v = y[(b * 3 + c) * 16 + i];
            m += v;
            m2 += v * v;
            ++n;
          }
        m /= n;
        CHECK(m == doctest::Approx(0.0).epsilon(1e-4).scale(1));
        CHECK(m2 / n - m * m == doctest::Approx(1.0).epsilon(1e-4));
      }
    }
    SUBCASE("eval mode uses the running statistics") {
      Tensor x({1, 1, 1, 2}, {2.0f, 4.0f});
      RunningStats stats{{1.0f}, {4.0f}};
      Tensor y = batchnorm(x, Tensor::ones({1}), Tensor::zeros({1}), stats, {false});
      const double sd = std::sqrt(4.0 + 1e-5);
      CHECK(y[0] == doctest::Approx(1.0 / sd));
      CHECK(y[1] == doctest::Approx(3.0 / sd));
      CHECK(stats.mean[0] == 1.0f);
    }
  }

  TEST_CASE("softmax") {
    Tensor s = softmax(Tensor({1, 3}, 2.5f), 1.0f, 1);
    for (float v : s.data()) CHECK(v == doctest::Approx(1.0 / 3.0));
    Tensor t = softmax(Tensor({1, 2}, {0.0f, std::log(3.0f)}), 1.0f, 1);
    CHECK(t[0] == doctest::Approx(0.25).epsilon(1e-6));
    CHECK(t[1] == doctest::Approx(0.75).epsilon(1e-6));

    std::mt19937_64 rng(9);
    Tensor x = random_tensor({4, 7}, rng, -30, 30);
    Tensor y = softmax(x, 20.0f, 1);
    for (std::size_t r = 0; r < 4; ++r) {
      double mx = -1e30, z = 0;
      for (std::size_t j = 0; j < 7; ++j) mx = std::max(mx, double(x[r * 7 + j]));
      for (std::size_t j = 0; j < 7; ++j) z += std::exp((x[r * 7 + j] - mx) / 20.0);
      double row = 0;
      for (std::size_t j = 0; j < 7; ++j) {
        const double ref = std::exp((x[r * 7 + j] - mx) / 20.0) / z;
        CHECK(std::abs(y[r * 7 + j] - ref) < 1e-7);
        CHECK(y[r * 7 + j] > 0.0f);
        row += y[r * 7 + j];
      }
      CHECK(row == doctest::Approx(1.0).epsilon(1e-6));
    }
    CHECK_THROWS_AS(softmax(x, 0.0f, 1), ConfigError);
    CHECK_THROWS_AS(softmax(x, -1.0f, 1), ConfigError);
  }

  TEST_CASE("softmax rows stay positive for large logits") {
    Tensor y = softmax(Tensor({1, 3}, {1000.0f, 0.0f, -1000.0f}), 20.0f, 1);
    double row = 0;
    for (float v : y.data()) {
      CHECK(v > 0.0f);
      row += v;
    }
    CHECK(row == doctest::Approx(1.0).epsilon(1e-6));
  }

  TEST_CASE("cross entropy and argmax") {
    Tensor logits({2, 2}, {0.0f, std::log(3.0f), 2.0f, 0.0f});
    const std::vector<std::int32_t> labels{1, 0};
    const double expected = 0.5 * (-std::log(0.75) - std::log(std::exp(2.0) / (std::exp(2.0) + 1.0)));
    CHECK(cross_entropy(logits, labels).item() == doctest::Approx(expected).epsilon(1e-6));
    CHECK(argmax_rows(logits) == std::vector<std::int32_t>{1, 0});
    const std::vector<std::int32_t> bad{0, 5};
    CHECK_THROWS_AS(cross_entropy(logits, bad), ConfigError);
  }
}

TEST_SUITE("autodiff") {
  TEST_CASE("backward examples") {
    Tensor x({3}, {1, 2, 3});
    x.set_requires_grad(true);
    {
      GradTape tape;
      tape.backward(sum(x));
      CHECK(values(x.grad()) == std::vector<float>{1, 1, 1});
    }
    Tensor y({2}, {1, 2});
    y.set_requires_grad(true);
    GradTape tape;
    Tensor loss = sum(square(y));
    CHECK(tape.size() > 0);
    tape.backward(loss);
    CHECK(values(y.grad()) == std::vector<float>{2, 4});
    CHECK(tape.size() == 0);
  }

  TEST_CASE("non-scalar loss is rejected") {
    Tensor x({3}, 1.0f);
    x.set_requires_grad(true);
    GradTape tape;
    Tensor y = square(x);
    CHECK_THROWS_AS(tape.backward(y), ConfigError);
  }

  TEST_CASE("a tensor used twice receives both contributions") {
    Tensor x({2}, {3, -1});
    x.set_requires_grad(true);
    GradTape tape;
    tape.backward(sum(add(mul(x, 2.0f), square(x))));
    CHECK(values(x.grad()) == std::vector<float>{2 + 6, 2 - 2});
  }

  TEST_CASE("replay runs in exact reverse recording order") {
    std::vector<int> order;
    Tensor x({1}, 1.0f);
    x.set_requires_grad(true);
    GradTape tape;
    Tensor a = x.clone(), b = x.clone(), c = x.clone();
    for (auto [t, id] : {std::pair{&a, 0}, {&b, 1}, {&c, 2}}) {
      t->set_requires_grad(true);
      tape.record("probe", *t, [&order, id = id] { order.push_back(id); });
    }
    tape.backward(sum(add(add(a, b), c)));
    CHECK(order == std::vector<int>{2, 1, 0});
  }

  TEST_CASE("no recording inside NoGrad") {
    Tensor x({2}, 1.0f);
    x.set_requires_grad(true);
    GradTape tape;
    {
      NoGrad off;
      (void)square(x);
    }
    CHECK(tape.size() == 0);
  }

  TEST_CASE("sum rule: grad(f + g) = grad f + grad g") {
    std::mt19937_64 rng(10);
    Tensor base = random_tensor({5}, rng);
    auto grad_of = [&](auto fn) {
      Tensor x = base.clone();
      x.set_requires_grad(true);
      GradTape tape;
      tape.backward(fn(x));
      return values(x.grad());
    };
    auto f = [](const Tensor& x) { return sum(mul(square(x), 3.0f)); };
    auto g = [](const Tensor& x) { return sum(exp(x)); };
    const auto gf = grad_of(f), gg = grad_of(g);
    const auto gs = grad_of([&](const Tensor& x) { return add(f(x), g(x)); });
    for (std::size_t i = 0; i < 5; ++i) CHECK(gs[i] == doctest::Approx(gf[i] + gg[i]).epsilon(1e-6));
  }

  TEST_CASE("every tensor-core op matches central differences") {
    for (const auto& c : akt_test::tensor_core_grad_cases()) {
      for (std::uint64_t seed : {1u, 2u, 3u}) {
        CAPTURE(c.name);
        CAPTURE(seed);
        const auto r = akt_test::run_case(c, seed);
        INFO(r.where);
        CHECK(r.worst < 1e-2);
      }
    }
  }

  TEST_CASE("forward is bit-identical across repeats") {
    std::mt19937_64 rng(12);
    Tensor x = random_tensor({2, 3, 6, 6}, rng), w = random_tensor({4, 3, 3, 3}, rng);
    CHECK(bit_equal(conv2d(x, w, {1, 1}), conv2d(x, w, {1, 1})));
    Tensor a = random_tensor({20, 30}, rng), b = random_tensor({30, 10}, rng);
    CHECK(bit_equal(softmax(matmul(a, b), 20.0f, 1), softmax(matmul(a, b), 20.0f, 1)));
  }
}

TEST_SUITE("optimizer") {
  TEST_CASE("momentum 0 and no decay is plain SGD") {
    std::vector<float> w{1.0f, -2.0f}, v(2, 0.0f);
    const std::vector<float> g{0.5f, 0.25f};
    sgd_nesterov_step(w, g, v, 0.1f, {0.0f, 0.0f, true});
    CHECK(w[0] == doctest::Approx(0.95));
    CHECK(w[1] == doctest::Approx(-2.025));
  }

  TEST_CASE("velocity under a constant gradient") {
    std::vector<float> w{0.0f}, v{0.0f};
    const std::vector<float> g{2.0f};
    sgd_nesterov_step(w, g, v, 0.01f, {0.9f, 0.0f, true});
    CHECK(v[0] == doctest::Approx(2.0));
    sgd_nesterov_step(w, g, v, 0.01f, {0.9f, 0.0f, true});
    CHECK(v[0] == doctest::Approx(2.0 * 1.9));
  }

  TEST_CASE("ten steps on 0.5 w^2 against a scalar recurrence") {
    const double lr = 0.1, mu = 0.9, wd = 1e-4;
    double w_ref = 1.5, v_ref = 0.0;
    std::vector<float> w{1.5f}, v{0.0f};
    for (int i = 0; i < 10; ++i) {
      const std::vector<float> g{w[0]};
      sgd_nesterov_step(w, g, v, float(lr), {float(mu), float(wd), true});
      const double gd = w_ref + wd * w_ref;
      v_ref = mu * v_ref + gd;
      w_ref -= lr * (gd + mu * v_ref);
      CHECK(std::abs(w[0] - w_ref) < 1e-6);
    }
  }

  TEST_CASE("size mismatch is a configuration error") {
    std::vector<float> w(3), v(3);
    const std::vector<float> g(2);
    CHECK_THROWS_AS(sgd_nesterov_step(w, g, v, 0.1f, {}), ConfigError);
  }

  TEST_CASE("optimizer object applies accumulated gradients") {
    Tensor p({2}, {1.0f, 1.0f});
    p.set_requires_grad(true);
    NesterovSgd opt({p}, {0.0f, 0.0f, true});
    {
      GradTape tape;
      tape.backward(sum(square(p)));
    }
    CHECK(grad_norm({p}) == doctest::Approx(std::sqrt(8.0)));
    opt.step(0.25f);
    CHECK(values(p) == std::vector<float>{0.5f, 0.5f});
    opt.zero_grad();
    CHECK(grad_norm({p}) == 0.0);
  }
}
