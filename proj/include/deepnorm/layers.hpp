#pragma once

// Transformer building blocks and the two residual/normalization orders:
//   V1 (post-norm): out_res = LN(in_res + F(in_res))
//   V2 (pre-norm):  out_res = in_res + F(LN(in_res))

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string_view>
#include <vector>

#include "deepnorm/rng.hpp"
#include "deepnorm/tensor.hpp"

namespace deepnorm {

enum class NormOrder { V1, V2 };

std::string_view to_string(NormOrder order);
NormOrder parse_norm_order(std::string_view text);

inline constexpr double kDefaultLayerNormEps = 1e-6;

struct LayerNormParams {
  Tensor gain;  // w
  Tensor bias;  // b
  double eps = kDefaultLayerNormEps;
};

// Per-row statistics seen by a layer norm: mean and the normalizing scale
// sqrt(var + eps) with population variance.
struct LayerNormStats {
  std::vector<double> mean;
  std::vector<double> sigma;
};

LayerNormStats row_statistics(const Tensor& x, double eps);

Tensor layer_norm(const Tensor& x, const LayerNormParams& p, LayerNormStats* stats = nullptr);

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]; may be undefined
};

Tensor linear(const Tensor& x, const Linear& layer);

// Keys allowed per (batch, query, key); broadcast over heads.
struct AttentionMask {
  std::size_t batch = 0;
  std::size_t q_len = 0;
  std::size_t k_len = 0;
  std::vector<std::uint8_t> allowed;

  static AttentionMask all(std::size_t batch, std::size_t q_len, std::size_t k_len);
  // Keys whose token equals pad_id are masked. key_tokens is [batch, k_len].
  static AttentionMask key_padding(std::span<const std::int32_t> key_tokens, std::size_t batch, std::size_t q_len,
                                   std::size_t k_len, std::int32_t pad_id);
  AttentionMask& apply_causal();

  bool is_allowed(std::size_t b, std::size_t q, std::size_t k) const {
    return allowed[(b * q_len + q) * k_len + k] != 0;
  }
};

inline constexpr double kMaskedScore = -1e9;

// Sets masked scores of [batch*heads, q_len, k_len] to kMaskedScore.
Tensor apply_attention_mask(const Tensor& scores, const AttentionMask& mask, std::size_t heads);

struct AttentionParams {
  Linear query;
  Linear key;  // no bias: softmax is invariant to it
  Linear value;
  Linear output;
};

// Optional capture of the post-softmax weights, [batch*heads, q_len, k_len].
struct AttentionTrace {
  Tensor weights;
};

// q: [batch, q_len, d_model]; k, v: [batch, k_len, d_model].
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask& mask,
                            std::size_t heads, const AttentionParams& params, AttentionTrace* trace = nullptr);

struct FfnParams {
  Linear inner;  // d_model -> d_ff
  Linear outer;  // d_ff -> d_model
};

Tensor feed_forward(const Tensor& x, const FfnParams& params);

// Inverted dropout; identity when rate == 0 or rng is null.
Tensor dropout(const Tensor& x, double rate, Rng* rng);

using SublayerFn = std::function<Tensor(const Tensor&)>;

struct SublayerIO {
  Tensor in_res;
  Tensor in_model;
  Tensor residual_sum;  // in_res + in_model
  Tensor out_res;
  // V1: statistics of residual_sum as used by its LN. V2: statistics of in_res.
  LayerNormStats norm_stats;
};

SublayerIO sublayer_v1(const Tensor& in_res, const SublayerFn& f, const LayerNormParams& p);
SublayerIO sublayer_v2(const Tensor& in_res, const SublayerFn& f, const LayerNormParams& p);
SublayerIO apply_sublayer(NormOrder order, const Tensor& in_res, const SublayerFn& f, const LayerNormParams& p);

}  // namespace deepnorm
