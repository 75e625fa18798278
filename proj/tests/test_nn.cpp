#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "audiotf/nn.hpp"
#include "fd_check.hpp"

using namespace audiotf;
using Td = Tensor<double>;

namespace {

Td random_tensor(Shape shape, Rng& rng, bool requires_grad = true) {
  std::vector<double> vals(size_t(numel(shape)));
  for (auto& v : vals) v = rng.uniform(-1.0, 1.0);
  return Td::from(std::move(shape), std::move(vals), requires_grad);
}

NamedParams<double> block_params(const TransformerBlock<double>& b) {
  NamedParams<double> out;
  b.collect("b", out);
  return out;
}

}  // namespace

TEST_CASE("dense: identity weights pass input through") {
  Rng rng(1);
  DenseLayer<double> layer(3, 3, rng);
  std::fill(layer.W.values().begin(), layer.W.values().end(), 0.0);
  for (int i = 0; i < 3; ++i) layer.W.values()[size_t(i) * 3 + i] = 1.0;
  auto x = Td::from({2, 3}, {1, 2, 3, 4, 5, 6});
  auto y = layer.forward(x);
  CHECK(y.values() == x.values());
}

TEST_CASE("dense: hand affine") {
  Rng rng(1);
  DenseLayer<double> layer(2, 1, rng);
  layer.W.values() = {1, 1};
  layer.b.values() = {0.5};
  auto y = layer.forward(Td::from({2}, {1, 2}));
  CHECK(y.values()[0] == doctest::Approx(3.5));
  CHECK_THROWS_AS(layer.forward(Td::from({3}, {1, 2, 3})), DimensionError);
}

TEST_CASE("dense: gradient check on random 3x4 -> 5") {
  Rng rng(7);
  DenseLayer<double> layer(4, 5, rng);
  auto x = random_tensor({3, 4}, rng);
  auto res = fd::check_gradients({layer.W, layer.b, x}, [&] {
    auto y = layer.forward(x);
    return sum_all(mul(y, y));
  });
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("layer_norm: constant vector maps to zero") {
  LayerNormParams<double> ln(4);
  auto y = ln.forward(Td::from({4}, {3.7, 3.7, 3.7, 3.7}));
  for (double v : y.values()) CHECK(std::abs(v) < 1e-4);
}

TEST_CASE("layer_norm: two-element hand case") {
  auto gamma = Td::from({2}, {1, 1});
  auto beta = Td::from({2}, {0, 0});
  auto y = layer_norm(Td::from({2}, {1.0, 3.0}), gamma, beta, 1e-12);
  CHECK(y.values()[0] == doctest::Approx(-1.0).epsilon(1e-5));
  CHECK(y.values()[1] == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("layer_norm: per-position mean 0, variance 1") {
  Rng rng(4);
  LayerNormParams<double> ln(8);
  auto x = random_tensor({5, 8}, rng, false);
  auto y = ln.forward(x);
  for (int r = 0; r < 5; ++r) {
    double mean = 0, var = 0;
    for (int i = 0; i < 8; ++i) mean += y.values()[size_t(r) * 8 + i];
    mean /= 8;
    for (int i = 0; i < 8; ++i) {
      const double d = y.values()[size_t(r) * 8 + i] - mean;
      var += d * d;
    }
    var /= 8;
    CHECK(std::abs(mean) < 1e-5);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("layer_norm: gradient check") {
  Rng rng(9);
  LayerNormParams<double> ln(6);
  for (auto& v : ln.gamma.values()) v = rng.uniform(0.5, 1.5);
  for (auto& v : ln.beta.values()) v = rng.uniform(-0.5, 0.5);
  double worst = 0;
  for (int c = 0; c < 20; ++c) {
    auto x = random_tensor({3, 6}, rng);
    auto res = fd::check_gradients({x, ln.gamma, ln.beta}, [&] {
      auto y = ln.forward(x);
      return sum_all(mul(y, y));
    });
    worst = std::max(worst, res.max_rel_err);
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("positional encoding: first row and pos 1") {
  auto pe = positional_encoding<double>(8, 6);
  for (int i = 0; i < 3; ++i) {
    CHECK(pe.values()[size_t(2 * i)] == doctest::Approx(0.0));
    CHECK(pe.values()[size_t(2 * i + 1)] == doctest::Approx(1.0));
  }
  CHECK(pe.values()[size_t(6)] == doctest::Approx(std::sin(1.0)));
  CHECK_THROWS_AS(positional_encoding<double>(8, 5), ContractError);
}

TEST_CASE("positional encoding: bounded, deterministic, slower for larger i") {
  auto pe = positional_encoding<double>(64, 16);
  for (double v : pe.values()) {
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
  }
  auto pe2 = positional_encoding<double>(64, 16);
  CHECK(pe.values() == pe2.values());
  // angular rate at column pair i is 10000^(-2i/E): strictly decreasing in i
  for (int i = 1; i < 8; ++i) {
    const double r_prev = std::pow(10000.0, -2.0 * (i - 1) / 16.0);
    const double r = std::pow(10000.0, -2.0 * i / 16.0);
    CHECK(r < r_prev);
    // the sin column's value at pos 1 equals its angular rate
    CHECK(pe.values()[size_t(16 + 2 * i)] == doctest::Approx(std::sin(r)));
  }
}

TEST_CASE("attention: single position has weight exactly 1") {
  Rng rng(3);
  MultiHeadAttention<double> mha(4, 2, rng);
  auto x = random_tensor({1, 4}, rng, false);
  auto w = mha.attention_weights(x, 0);
  CHECK(w.shape() == Shape{1, 1, 1});
  CHECK(w.values()[0] == doctest::Approx(1.0));
}

TEST_CASE("attention: rows sum to 1 and future weights are exactly 0") {
  Rng rng(17);
  MultiHeadAttention<double> mha(8, 2, rng);
  auto x = random_tensor({6, 8}, rng, false);
  for (int head = 0; head < 2; ++head) {
    auto w = mha.attention_weights(x, head);
    for (int i = 0; i < 6; ++i) {
      double sum = 0;
      for (int j = 0; j < 6; ++j) {
        const double v = w.values()[size_t(i) * 6 + j];
        if (j > i) CHECK(v == 0.0);
        sum += v;
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    }
  }
}

TEST_CASE("attention: shape check and gradient") {
  Rng rng(23);
  MultiHeadAttention<double> mha(4, 2, rng);
  CHECK_THROWS_AS(mha.forward(random_tensor({3, 5}, rng, false)), DimensionError);
  auto x = random_tensor({3, 4}, rng);
  NamedParams<double> params;
  mha.collect("attn", params);
  std::vector<Td> leaves{x};
  for (auto& [n, t] : params) leaves.push_back(t);
  auto res = fd::check_gradients(leaves, [&] {
    auto y = mha.forward(x);
    return sum_all(mul(y, y));
  });
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("transformer block: output shape equals input shape") {
  Rng rng(2);
  TransformerBlock<double> block(8, 2, 16, rng);
  auto x = random_tensor({2, 5, 8}, rng, false);
  CHECK(block.forward(x).shape() == x.shape());
}

TEST_CASE("transformer block with zero weights reduces to LayerNorm twice") {
  Rng rng(2);
  TransformerBlock<double> block(6, 2, 12, rng);
  for (auto& [name, t] : block_params(block)) {
    if (name.find("gamma") != std::string::npos) continue;
    std::fill(t.values().begin(), t.values().end(), 0.0);
  }
  auto x = random_tensor({4, 6}, rng, false);
  auto y = block.forward(x);
  LayerNormParams<double> ln(6);
  auto expect = ln.forward(ln.forward(x));
  for (size_t i = 0; i < y.values().size(); ++i)
    CHECK(y.values()[i] == doctest::Approx(expect.values()[i]).epsilon(1e-10));
}

TEST_CASE("transformer block: full gradient check at tiny scale") {
  Rng rng(12);
  TransformerBlock<double> block(4, 2, 6, rng);
  auto x = random_tensor({3, 4}, rng);
  std::vector<Td> leaves{x};
  for (auto& [n, t] : block_params(block)) leaves.push_back(t);
  auto res = fd::check_gradients(leaves, [&] {
    auto y = block.forward(x);
    return sum_all(mul(y, y));
  });
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("block stack causality: perturbing frame t leaves earlier outputs bit-unchanged") {
  Rng rng(31);
  for (int layers : {1, 3}) {
    std::vector<TransformerBlock<double>> blocks;
    for (int l = 0; l < layers; ++l) blocks.emplace_back(6, 2, 8, rng);
    auto run = [&](const Td& in) {
      Td x = in;
      for (auto& b : blocks) x = b.forward(x);
      return x;
    };
    for (int trial = 0; trial < 10; ++trial) {
      auto x = random_tensor({5, 6}, rng, false);
      auto base = run(x);
      const int t = 1 + int(rng.below(4));
      auto x2 = Td::from(x.shape(), x.values());
      for (int e = 0; e < 6; ++e) x2.values()[size_t(t) * 6 + e] += rng.uniform(0.1, 1.0);
      auto pert = run(x2);
      for (int pos = 0; pos < t; ++pos)
        for (int e = 0; e < 6; ++e)
          CHECK(base.values()[size_t(pos) * 6 + e] == pert.values()[size_t(pos) * 6 + e]);
    }
  }
}

TEST_CASE("time pool: 40 -> 20 at factor 2; constants pass through") {
  Rng rng(5);
  auto x = random_tensor({40, 3}, rng, false);
  auto y = time_average_pool(x, 2, 0);
  CHECK(y.shape() == Shape{20, 3});

  auto c = Td::from({4, 2}, {7, 1, 7, 1, 7, 1, 7, 1});
  auto yc = time_average_pool(c, 2, 0);
  CHECK(yc.values() == std::vector<double>{7, 1, 7, 1});

  CHECK_THROWS_AS(time_average_pool(x, 3, 0), ContractError);
}

TEST_CASE("time pool preserves the per-dim global mean") {
  Rng rng(6);
  auto x = random_tensor({8, 4}, rng, false);
  auto y = time_average_pool(x, 4, 0);
  for (int e = 0; e < 4; ++e) {
    double min = 0, mout = 0;
    for (int t = 0; t < 8; ++t) min += x.values()[size_t(t) * 4 + e] / 8;
    for (int t = 0; t < 2; ++t) mout += y.values()[size_t(t) * 4 + e] / 2;
    CHECK(min == doctest::Approx(mout).epsilon(1e-12));
  }
}

TEST_CASE("time pool gradient check") {
  Rng rng(8);
  auto x = random_tensor({6, 3}, rng);
  auto res = fd::check_gradients({x}, [&] {
    auto y = time_average_pool(x, 2, 0);
    return sum_all(mul(y, y));
  });
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("multiscale spec: geometric split with clamping") {
  CHECK(make_multiscale_spec(8, 8) == MultiScaleSpec{1, 1, 1, 1, 2, 2, 4, 8});

  auto spec = make_multiscale_spec(40, 64);
  int ones = 0;
  for (int i = 0; i < 32; ++i) CHECK(spec[size_t(i)] == 1);
  for (int i = 32; i < 48; ++i) CHECK(spec[size_t(i)] == 2);
  for (int i = 48; i < 56; ++i) CHECK(spec[size_t(i)] == 4);
  for (int i = 56; i < 60; ++i) CHECK(spec[size_t(i)] == 8);
  for (int i = 60; i < 64; ++i) CHECK(spec[size_t(i)] == 8);  // clamped: 40 = 8 * 5
  for (int w : spec) {
    CHECK(is_pow2(w));
    CHECK(40 % w == 0);
    if (w == 1) ++ones;
  }
  CHECK(ones == 32);
}

TEST_CASE("multiscale spec: window budget dominated by w=1 dims") {
  auto spec = make_multiscale_spec(64, 64);
  double budget = 0, ones_budget = 0;
  for (int w : spec) {
    budget += 1.0 / w;
    if (w == 1) ones_budget += 1.0;
  }
  CHECK(ones_budget > budget / 2);
}

TEST_CASE("multiscale layer: identity on all-ones spec; hand window mean") {
  Rng rng(3);
  auto x = random_tensor({4, 2}, rng, false);
  auto y = multi_scale_layer(x, MultiScaleSpec{1, 1});
  CHECK(y.values() == x.values());

  auto t = Td::from({4, 1}, {1, 3, 5, 7});
  auto m = multi_scale_layer(t, MultiScaleSpec{2});
  CHECK(m.values() == std::vector<double>{2, 2, 6, 6});

  CHECK_THROWS_AS(multi_scale_layer(t, MultiScaleSpec{3}), ContractError);
  CHECK_THROWS_AS(multi_scale_layer(t, MultiScaleSpec{1, 1}), ContractError);
}

TEST_CASE("multiscale layer: idempotent under repeated application") {
  Rng rng(41);
  const auto spec = make_multiscale_spec(8, 6);
  for (int c = 0; c < 20; ++c) {
    auto x = random_tensor({2, 8, 6}, rng, false);
    auto once = multi_scale_layer(x, spec);
    auto twice = multi_scale_layer(once, spec);
    CHECK(once.values() == twice.values());
  }
}

TEST_CASE("multiscale layer: gradient check and mean conservation") {
  Rng rng(43);
  const auto spec = make_multiscale_spec(4, 3);
  auto x = random_tensor({4, 3}, rng);
  auto res = fd::check_gradients({x}, [&] {
    auto y = multi_scale_layer(x, spec);
    return sum_all(mul(y, y));
  });
  CHECK(res.max_rel_err < 1e-6);

  auto y = multi_scale_layer(x, spec);
  for (int e = 0; e < 3; ++e) {
    double min = 0, mout = 0;
    for (int t = 0; t < 4; ++t) {
      min += x.values()[size_t(t) * 3 + e];
      mout += y.values()[size_t(t) * 3 + e];
    }
    CHECK(min == doctest::Approx(mout).epsilon(1e-9));
  }
}

TEST_CASE("glorot init is deterministic in the seed") {
  Rng a(99), b(99);
  auto w1 = glorot_uniform<double>(10, 10, {10, 10}, a);
  auto w2 = glorot_uniform<double>(10, 10, {10, 10}, b);
  CHECK(w1.values() == w2.values());
}
