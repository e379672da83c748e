#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "deepnorm/errors.hpp"
#include "deepnorm/layers.hpp"
#include "fd.hpp"

namespace deepnorm {
namespace {

using testing::max_fd_rel_error;
using testing::random_projection;
using testing::random_tensor;

constexpr double kFdTolerance = 1e-4;

LayerNormParams unit_norm(std::size_t d, double eps = kDefaultLayerNormEps) {
  return {Tensor::full({d}, 1.0, true), Tensor::zeros({d}, true), eps};
}

Linear random_linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  return {random_tensor({in, out}, rng, bound), with_bias ? random_tensor({out}, rng, 0.1) : Tensor()};
}

AttentionParams random_attention(std::size_t d, Rng& rng) {
  return {random_linear(d, d, rng), random_linear(d, d, rng, false), random_linear(d, d, rng),
          random_linear(d, d, rng)};
}

FfnParams random_ffn(std::size_t d, std::size_t ff, Rng& rng) {
  return {random_linear(d, ff, rng), random_linear(ff, d, rng)};
}

TEST(LayerNorm, HandExample) {
  auto y = layer_norm(Tensor::from_data({3}, {1, 2, 3}), unit_norm(3, 1e-300));
  const double v = std::sqrt(1.5);
  EXPECT_NEAR(y.data()[0], -v, 1e-12);
  EXPECT_NEAR(y.data()[1], 0.0, 1e-12);
  EXPECT_NEAR(y.data()[2], v, 1e-12);
  EXPECT_NEAR(v, 1.224745, 5e-7);
}

TEST(LayerNorm, ConstantRowMapsToZero) {
  auto y = layer_norm(Tensor::full({2, 5}, 3.25), unit_norm(5));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, GainAndBiasApplyPerFeature) {
  LayerNormParams p{Tensor::from_data({3}, {2, 3, 4}), Tensor::from_data({3}, {1, 1, 1}), 1e-300};
  auto y = layer_norm(Tensor::from_data({3}, {1, 2, 3}), p);
  const double v = std::sqrt(1.5);
  EXPECT_NEAR(y.data()[0], 1 - 2 * v, 1e-12);
  EXPECT_NEAR(y.data()[1], 1.0, 1e-12);
  EXPECT_NEAR(y.data()[2], 1 + 4 * v, 1e-12);
}

TEST(LayerNorm, WidthMismatchIsDimensionError) {
  EXPECT_THROW(layer_norm(Tensor::zeros({2, 4}), unit_norm(3)), DimensionError);
}

// Output statistics for inputs on ordinary scales. With eps added to the
// variance, the output std is sqrt(var / (var + eps)), which is within 1e-4
// of 1 once the input std reaches about 0.071 at eps = 1e-6.
TEST(LayerNorm, OutputMeanZeroStdOne) {
  Rng rng(17);
  const auto p = unit_norm(64);
  for (int trial = 0; trial < 200; ++trial) {
    const double scale_ = 0.2 + std::exp(rng.symmetric(1.0) * std::log(100.0));
    const double offset = rng.symmetric(50.0);
    std::vector<double> x(64);
    for (auto& v : x) v = offset + rng.symmetric(scale_);
    auto y = layer_norm(Tensor::from_data({64}, x), p);
    double m = 0, s2 = 0;
    for (double v : y.data()) m += v;
    m /= 64;
    for (double v : y.data()) s2 += (v - m) * (v - m);
    EXPECT_LE(std::abs(m), 1e-10);
    EXPECT_NEAR(std::sqrt(s2 / 64), 1.0, 1e-4);
  }
}

TEST(LayerNorm, TinyInputStdShrinksOutput) {
  // Input std = 100 * eps: the eps term dominates and the output std is far below 1.
  const double eps = kDefaultLayerNormEps;
  std::vector<double> x{-100 * eps, 100 * eps};
  auto y = layer_norm(Tensor::from_data({2}, x), unit_norm(2, eps));
  const double expected = 100 * eps / std::sqrt(100 * eps * 100 * eps + eps);
  EXPECT_NEAR(y.data()[1], expected, 1e-12);
  EXPECT_LT(y.data()[1], 0.2);
}

TEST(LayerNorm, RowStatisticsUseEpsInsideRoot) {
  auto s = row_statistics(Tensor::from_data({1, 2}, {1, 3}), 0.5);
  EXPECT_DOUBLE_EQ(s.mean[0], 2.0);
  EXPECT_DOUBLE_EQ(s.sigma[0], std::sqrt(1.5));
}

TEST(SublayerV1, ZeroFunctionIsPlainNorm) {
  Rng rng(1);
  auto x = random_tensor({2, 3, 8}, rng, 1.0, false);
  const auto p = unit_norm(8);
  auto io = sublayer_v1(x, [](const Tensor& t) { return scale(t, 0.0); }, p);
  const auto ref = layer_norm(x, p);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(io.out_res.data()[i], ref.data()[i]);
}

TEST(SublayerV1, IdentityFunctionMatchesNormOfInput) {
  Rng rng(2);
  auto x = random_tensor({2, 3, 8}, rng, 1.0, false);
  const auto p = unit_norm(8, 1e-300);
  auto io = sublayer_v1(x, [](const Tensor& t) { return t; }, p);
  const auto ref = layer_norm(x, p);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(io.out_res.data()[i], ref.data()[i], 1e-12);
}

TEST(SublayerV1, GainEqualToSigmaRecoversShiftedSum) {
  // Single position, w = sigma of the summed input: out = sum - mu + b.
  Rng rng(3);
  auto x = random_tensor({1, 1, 6}, rng, 2.0, false);
  auto f = [](const Tensor& t) { return scale(t, 0.5); };
  const auto probe = sublayer_v1(x, f, unit_norm(6));
  const double sigma = probe.norm_stats.sigma[0];
  const double mu = probe.norm_stats.mean[0];
  auto b = random_tensor({6}, rng, 1.0, false);
  const LayerNormParams p{Tensor::full({6}, sigma), b, kDefaultLayerNormEps};
  const auto io = sublayer_v1(x, f, p);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_NEAR(io.out_res.data()[i], io.residual_sum.data()[i] - mu + b.data()[i], 1e-10);
  }
}

TEST(SublayerV1, ScaledSumIdentityHoldsElementwise) {
  for (int seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const std::size_t d = 16;
    auto x = random_tensor({3, 4, d}, rng, 3.0, false);
    const auto ffn = random_ffn(d, 32, rng);
    const LayerNormParams p{random_tensor({d}, rng, 2.0, false), random_tensor({d}, rng, 1.0, false),
                            kDefaultLayerNormEps};
    const auto io = sublayer_v1(x, [&](const Tensor& t) { return feed_forward(t, ffn); }, p);
    ASSERT_EQ(io.in_model.shape(), x.shape());
    ASSERT_EQ(io.out_res.shape(), x.shape());
    for (std::size_t r = 0; r < 12; ++r) {
      const double mu = io.norm_stats.mean[r];
      const double sigma = io.norm_stats.sigma[r];
      for (std::size_t c = 0; c < d; ++c) {
        const std::size_t i = r * d + c;
        const double w = p.gain.data()[c];
        const double s = io.in_model.data()[i] + io.in_res.data()[i];
        EXPECT_NEAR(io.out_res.data()[i], (w / sigma) * s - (w / sigma) * mu + p.bias.data()[c], 1e-10);
      }
    }
  }
}

TEST(SublayerV2, ZeroFunctionIsExactIdentityAtAnyDepth) {
  Rng rng(4);
  auto x = random_tensor({2, 5, 8}, rng, 4.0, false);
  const auto p = unit_norm(8);
  Tensor h = x;
  for (int layer = 0; layer < 48; ++layer) {
    h = sublayer_v2(h, [](const Tensor& t) { return scale(t, 0.0); }, p).out_res;
  }
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(h.data()[i], x.data()[i], 1e-15);
}

TEST(SublayerV2, ResidualDifferenceIsFunctionOfNormedInput) {
  for (int seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const std::size_t d = 8;
    auto x = random_tensor({2, 3, d}, rng, 2.0, false);
    const auto lin = random_linear(d, d, rng);
    const LayerNormParams p{random_tensor({d}, rng, 2.0, false), random_tensor({d}, rng, 1.0, false),
                            kDefaultLayerNormEps};
    auto f = [&](const Tensor& t) { return linear(t, lin); };
    const auto io = sublayer_v2(x, f, p);
    const auto ref = f(layer_norm(x, p));
    for (std::size_t i = 0; i < x.numel(); ++i) {
      EXPECT_NEAR(io.out_res.data()[i] - x.data()[i], ref.data()[i], 1e-12);
    }
  }
}

TEST(Sublayer, DispatchFollowsOrder) {
  Rng rng(5);
  auto x = random_tensor({1, 2, 4}, rng, 1.0, false);
  const auto p = unit_norm(4);
  auto f = [](const Tensor& t) { return scale(t, 2.0); };
  const auto a = apply_sublayer(NormOrder::V1, x, f, p).out_res;
  const auto b = sublayer_v1(x, f, p).out_res;
  const auto c = apply_sublayer(NormOrder::V2, x, f, p).out_res;
  const auto d = sublayer_v2(x, f, p).out_res;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    EXPECT_EQ(a.data()[i], b.data()[i]);
    EXPECT_EQ(c.data()[i], d.data()[i]);
  }
  EXPECT_EQ(parse_norm_order("v1"), NormOrder::V1);
  EXPECT_EQ(to_string(NormOrder::V2), "v2");
  EXPECT_THROW(parse_norm_order("v3"), ConfigError);
}

TEST(Attention, SinglePositionReturnsProjectedValue) {
  Rng rng(6);
  const std::size_t d = 4;
  auto x = random_tensor({1, 1, d}, rng, 1.0, false);
  const auto params = random_attention(d, rng);
  const auto out = multi_head_attention(x, x, x, AttentionMask::all(1, 1, 1), 1, params);
  const auto ref = linear(linear(x, params.value), params.output);
  for (std::size_t i = 0; i < d; ++i) EXPECT_NEAR(out.data()[i], ref.data()[i], 1e-14);
}

TEST(Attention, WeightsAreRowStochastic) {
  for (int seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const std::size_t d = 8, heads = 2, batch = 3, len = 5;
    auto x = random_tensor({batch, len, d}, rng, 2.0, false);
    const auto params = random_attention(d, rng);
    std::vector<std::int32_t> keys(batch * len, 5);
    keys[len - 1] = 0;
    keys[2 * len - 2] = 0;
    keys[2 * len - 1] = 0;
    auto mask = AttentionMask::key_padding(keys, batch, len, len, 0);
    mask.apply_causal();
    AttentionTrace trace;
    multi_head_attention(x, x, x, mask, heads, params, &trace);
    ASSERT_EQ(trace.weights.shape(), (Shape{batch * heads, len, len}));
    for (std::size_t bh = 0; bh < batch * heads; ++bh) {
      for (std::size_t q = 0; q < len; ++q) {
        double row = 0;
        for (std::size_t k = 0; k < len; ++k) {
          const double w = trace.weights.at({bh, q, k});
          if (!mask.is_allowed(bh / heads, q, k)) EXPECT_LT(w, 1e-300);
          row += w;
        }
        EXPECT_NEAR(row, 1.0, 1e-12);
      }
    }
  }
}

TEST(Attention, FullyMaskedRowIsContractError) {
  Rng rng(7);
  auto x = random_tensor({1, 2, 4}, rng, 1.0, false);
  auto mask = AttentionMask::all(1, 2, 2);
  mask.allowed[2] = 0;
  mask.allowed[3] = 0;
  EXPECT_THROW(multi_head_attention(x, x, x, mask, 2, random_attention(4, rng)), ContractError);
}

TEST(Attention, IndivisibleHeadsIsConfigError) {
  Rng rng(8);
  auto x = random_tensor({1, 2, 6}, rng, 1.0, false);
  EXPECT_THROW(multi_head_attention(x, x, x, AttentionMask::all(1, 2, 2), 4, random_attention(6, rng)), ConfigError);
}

TEST(FeedForward, ZeroWeightsGiveZeros) {
  Rng rng(9);
  FfnParams p{{Tensor::zeros({4, 8}), Tensor::zeros({8})}, {Tensor::zeros({8, 4}), Tensor::zeros({4})}};
  const auto y = feed_forward(random_tensor({2, 3, 4}, rng, 1.0, false), p);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(FeedForward, PositionPermutationCommutes) {
  Rng rng(10);
  const std::size_t len = 5, d = 4;
  auto x = random_tensor({1, len, d}, rng, 1.0, false);
  const auto p = random_ffn(d, 8, rng);
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  std::vector<double> px(len * d);
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t c = 0; c < d; ++c) px[i * d + c] = x.data()[perm[i] * d + c];
  const auto y = feed_forward(x, p);
  const auto py = feed_forward(Tensor::from_data({1, len, d}, px), p);
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t c = 0; c < d; ++c) EXPECT_EQ(py.data()[i * d + c], y.data()[perm[i] * d + c]);
}

TEST(Dropout, IdentityWithoutRngAndScaledKeepOtherwise) {
  Rng rng(11);
  auto x = random_tensor({1000}, rng, 1.0, false);
  EXPECT_TRUE(dropout(x, 0.5, nullptr).same_storage(x));
  Rng drop(3);
  const auto y = dropout(x, 0.25, &drop);
  std::size_t kept = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    if (y.data()[i] != 0.0) {
      ++kept;
      EXPECT_NEAR(y.data()[i], x.data()[i] / 0.75, 1e-15);
    }
  }
  EXPECT_NEAR(static_cast<double>(kept) / 1000.0, 0.75, 0.05);
}

TEST(LayersGradient, FiniteDifferencesOverTenSeeds) {
  const std::size_t d = 8, ff = 12, heads = 2;
  for (int seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    auto x = random_tensor({2, 3, d}, rng, 1.5);
    auto mem = random_tensor({2, 4, d}, rng, 1.5);
    LayerNormParams norm{random_tensor({d}, rng, 2.0), random_tensor({d}, rng, 1.0), kDefaultLayerNormEps};
    auto attn = random_attention(d, rng);
    auto ffn = random_ffn(d, ff, rng);
    auto mask = AttentionMask::all(2, 3, 3).apply_causal();
    auto cross = AttentionMask::all(2, 3, 4);
    cross.allowed[3] = 0;

    EXPECT_LE(max_fd_rel_error({x, norm.gain, norm.bias}, [&] { return random_projection(layer_norm(x, norm), 1); }),
              kFdTolerance)
        << "layer_norm seed " << seed;
    EXPECT_LE(max_fd_rel_error({x, ffn.inner.weight, ffn.inner.bias, ffn.outer.weight, ffn.outer.bias},
                               [&] { return random_projection(feed_forward(x, ffn), 2); }),
              kFdTolerance)
        << "ffn seed " << seed;
    EXPECT_LE(max_fd_rel_error({x, attn.query.weight, attn.query.bias, attn.key.weight, attn.value.weight,
                                attn.value.bias, attn.output.weight, attn.output.bias},
                               [&] { return random_projection(multi_head_attention(x, x, x, mask, heads, attn), 3); }),
              kFdTolerance)
        << "self attention seed " << seed;
    EXPECT_LE(max_fd_rel_error({x, mem}, [&] {
                return random_projection(multi_head_attention(x, mem, mem, cross, heads, attn), 4);
              }),
              kFdTolerance)
        << "cross attention seed " << seed;
    for (auto order : {NormOrder::V1, NormOrder::V2}) {
      auto f = [&](const Tensor& t) { return feed_forward(t, ffn); };
      EXPECT_LE(max_fd_rel_error({x, norm.gain, norm.bias, ffn.inner.weight},
                                 [&] { return random_projection(apply_sublayer(order, x, f, norm).out_res, 5); }),
                kFdTolerance)
          << to_string(order) << " sublayer seed " << seed;
    }
  }
}

}  // namespace
}  // namespace deepnorm
