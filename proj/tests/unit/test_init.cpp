#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "deepnorm/errors.hpp"
#include "deepnorm/init.hpp"
#include "deepnorm/model.hpp"

namespace deepnorm {
namespace {

struct Moments {
  double mean = 0;
  double std = 0;
  double max_abs = 0;
  std::size_t n = 0;
};

// Draws the scheme repeatedly until at least min_n samples are collected.
Moments sample_moments(const InitScheme& scheme, Rng& rng, std::size_t min_n) {
  double s = 0, s2 = 0;
  Moments m;
  while (m.n < min_n) {
    auto t = sample_uniform(scheme, rng, false);
    for (double v : t.data()) {
      s += v;
      s2 += v * v;
      m.max_abs = std::max(m.max_abs, std::abs(v));
    }
    m.n += t.numel();
  }
  m.mean = s / static_cast<double>(m.n);
  m.std = std::sqrt(s2 / static_cast<double>(m.n) - m.mean * m.mean);
  return m;
}

TEST(InitBounds, ClosedForms) {
  EXPECT_NEAR(InitScheme::glorot(512, 512).bound(), 0.0765466, 5e-8);
  EXPECT_NEAR(InitScheme::glorot(1, 2).bound(), 1.4142136, 5e-8);
  EXPECT_NEAR(InitScheme::lipschitz_linear(512, 512).bound(), 0.0441942, 5e-8);
  EXPECT_DOUBLE_EQ(InitScheme::lipschitz_linear(1, 7).bound(), 1.0);
  EXPECT_NEAR(InitScheme::lipschitz_embedding(32768, 512).bound(), 0.0077522, 5e-8);
  EXPECT_DOUBLE_EQ(InitScheme::lipschitz_embedding(1, 1).bound(), 1.0);
}

TEST(InitBounds, ShapesFollowArguments) {
  EXPECT_EQ(InitScheme::glorot(3, 5).shape(), (Shape{3, 5}));
  EXPECT_EQ(InitScheme::lipschitz_linear(3, 5).shape(), (Shape{3, 5}));
  EXPECT_EQ(InitScheme::lipschitz_embedding(11, 4).shape(), (Shape{11, 4}));
}

TEST(InitBounds, ZeroDimensionIsContractError) {
  Rng rng(1);
  EXPECT_THROW(glorot_uniform(0, 4, rng), ContractError);
  EXPECT_THROW(glorot_uniform(4, 0, rng), ContractError);
  EXPECT_THROW(lipschitz_linear_uniform(0, 4, rng), ContractError);
  EXPECT_THROW(lipschitz_embedding_uniform(4, 0, rng), ContractError);
}

TEST(InitSamples, Glorot512SquareStd) {
  Rng rng(5);
  const double bound = InitScheme::glorot(512, 512).bound();
  const auto m = sample_moments(InitScheme::glorot(512, 512), rng, 1);
  EXPECT_EQ(m.n, 512u * 512u);
  EXPECT_LE(m.max_abs, bound);
  EXPECT_NEAR(m.std, bound / std::sqrt(3.0), 0.02 * bound / std::sqrt(3.0));
}

TEST(InitSamples, LipschitzLinearStd) {
  Rng rng(6);
  auto m = sample_moments(InitScheme::lipschitz_linear(512, 512), rng, 100000);
  EXPECT_NEAR(m.std, 0.0255156, 0.02 * 0.0255156);
}

TEST(InitSamples, EmbeddingStrictlyInsideSupport) {
  Rng rng(8);
  auto e = lipschitz_embedding_uniform(300, 64, rng);
  const double bound = InitScheme::lipschitz_embedding(300, 64).bound();
  EXPECT_EQ(e.shape(), (Shape{300, 64}));
  for (double v : e.data()) ASSERT_LT(std::abs(v), bound);
}

TEST(InitSamples, RandomShapePairsAllSchemes) {
  Rng pick(2024);
  for (int pair = 0; pair < 10; ++pair) {
    const std::size_t i = 1 + pick.below(1024);
    const std::size_t o = 1 + pick.below(1024);
    for (const auto& scheme :
         {InitScheme::glorot(i, o), InitScheme::lipschitz_linear(i, o), InitScheme::lipschitz_embedding(i, o)}) {
      Rng rng = Rng(pair).split(static_cast<std::uint64_t>(scheme.kind));
      const auto m = sample_moments(scheme, rng, 100000);
      const double bound = scheme.bound();
      const double sigma = bound / std::sqrt(3.0);
      EXPECT_LE(m.max_abs, bound) << i << "x" << o;
      EXPECT_LE(std::abs(m.mean), 3.0 * sigma / std::sqrt(static_cast<double>(m.n))) << i << "x" << o;
      EXPECT_NEAR(m.std, sigma, 0.02 * sigma) << i << "x" << o;
    }
  }
}

TEST(InitBounds, LipschitzLinearNotWiderThanGlorotUpToFiveToOne) {
  for (std::size_t i = 1; i <= 200; ++i) {
    for (std::size_t o = 1; o <= 5 * i && o <= 1000; ++o) {
      ASSERT_LE(InitScheme::lipschitz_linear(i, o).bound(), InitScheme::glorot(i, o).bound() * (1 + 1e-15))
          << i << "x" << o;
    }
  }
  // Past the 5:1 ratio the order flips.
  EXPECT_GT(InitScheme::lipschitz_linear(10, 60).bound(), InitScheme::glorot(10, 60).bound());
}

ModelConfig small_config(InitFamily family) {
  ModelConfig cfg;
  cfg.enc_layers = 2;
  cfg.dec_layers = 2;
  cfg.d_model = 16;
  cfg.d_ff = 32;
  cfg.n_heads = 2;
  cfg.vocab_size = 20;
  cfg.init_family = family;
  return cfg;
}

TEST(InitModelParams, NormAndBiasConstants) {
  for (auto family : {InitFamily::Glorot, InitFamily::Lipschitz}) {
    const auto cfg = small_config(family);
    const auto specs = model_param_specs(cfg);
    const auto params = init_model_params(specs, family, Rng(3));
    ASSERT_EQ(params.size(), specs.size());
    for (const auto& spec : specs) {
      const auto& t = params.get(spec.name);
      EXPECT_EQ(t.shape(), spec.shape) << spec.name;
      for (double v : t.data()) {
        if (spec.role == ParamRole::NormGain) ASSERT_EQ(v, 1.0) << spec.name;
        if (spec.role == ParamRole::NormBias || spec.role == ParamRole::LinearBias) ASSERT_EQ(v, 0.0) << spec.name;
      }
    }
  }
}

TEST(InitModelParams, FamilySelectsBounds) {
  const auto cfg = small_config(InitFamily::Lipschitz);
  const auto specs = model_param_specs(cfg);
  for (auto family : {InitFamily::Glorot, InitFamily::Lipschitz}) {
    const auto params = init_model_params(specs, family, Rng(4));
    for (const auto& spec : specs) {
      double bound = 0;
      if (spec.role == ParamRole::LinearWeight) {
        bound = family == InitFamily::Glorot ? InitScheme::glorot(spec.shape[0], spec.shape[1]).bound()
                                             : InitScheme::lipschitz_linear(spec.shape[0], spec.shape[1]).bound();
      } else if (spec.role == ParamRole::Embedding) {
        bound = family == InitFamily::Glorot ? InitScheme::glorot(spec.shape[0], spec.shape[1]).bound()
                                             : InitScheme::lipschitz_embedding(spec.shape[0], spec.shape[1]).bound();
      } else {
        continue;
      }
      double max_abs = 0;
      for (double v : params.get(spec.name).data()) max_abs = std::max(max_abs, std::abs(v));
      EXPECT_LE(max_abs, bound) << spec.name;
      // Samples fill most of the support, so the wrong bound would show.
      EXPECT_GT(max_abs, 0.8 * bound) << spec.name;
    }
  }
}

TEST(InitModelParams, DeterministicAndOrderIndependent) {
  const auto cfg = small_config(InitFamily::Lipschitz);
  auto specs = model_param_specs(cfg);
  const auto a = init_model_params(specs, InitFamily::Lipschitz, Rng(9));
  const auto b = init_model_params(specs, InitFamily::Lipschitz, Rng(9));
  std::reverse(specs.begin(), specs.end());
  const auto c = init_model_params(specs, InitFamily::Lipschitz, Rng(9));
  for (const auto& entry : a) {
    const auto x = entry.tensor.data();
    const auto y = b.get(entry.name).data();
    const auto z = c.get(entry.name).data();
    ASSERT_TRUE(std::equal(x.begin(), x.end(), y.begin(), y.end())) << entry.name;
    ASSERT_TRUE(std::equal(x.begin(), x.end(), z.begin(), z.end())) << entry.name;
  }
}

TEST(InitModelParams, DifferentSeedsDiffer) {
  const auto specs = model_param_specs(small_config(InitFamily::Glorot));
  const auto a = init_model_params(specs, InitFamily::Glorot, Rng(1));
  const auto b = init_model_params(specs, InitFamily::Glorot, Rng(2));
  const auto x = a.get(specs.front().name).data();
  const auto y = b.get(specs.front().name).data();
  EXPECT_FALSE(std::equal(x.begin(), x.end(), y.begin(), y.end()));
}

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(a(), b());
  EXPECT_NE(Rng(42).split("x")(), Rng(42).split("y")());
  Rng u(1);
  for (int i = 0; i < 10000; ++i) {
    const double v = u.uniform_open();
    ASSERT_GT(v, 0.0);
    ASSERT_LT(v, 1.0);
  }
}

}  // namespace
}  // namespace deepnorm
