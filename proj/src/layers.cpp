#include "deepnorm/layers.hpp"

#include <cmath>
#include <string>

#include "deepnorm/errors.hpp"

namespace deepnorm {

std::string_view to_string(NormOrder order) { return order == NormOrder::V1 ? "v1" : "v2"; }

NormOrder parse_norm_order(std::string_view text) {
  if (text == "v1") return NormOrder::V1;
  if (text == "v2") return NormOrder::V2;
  throw ConfigError("norm_order: expected v1 or v2, got '" + std::string(text) + "'");
}

LayerNormStats row_statistics(const Tensor& x, double eps) {
  const auto cols = x.shape().back();
  const auto rows = x.numel() / cols;
  const double n = static_cast<double>(cols);
  auto xs = x.data();
  LayerNormStats stats;
  stats.mean.resize(rows);
  stats.sigma.resize(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xs.data() + r * cols;
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) total += row[c];
    const double mu = total / n;
    double sq = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double d = row[c] - mu;
      sq += d * d;
    }
    stats.mean[r] = mu;
    stats.sigma[r] = std::sqrt(sq / n + eps);
  }
  return stats;
}

Tensor layer_norm(const Tensor& x, const LayerNormParams& p, LayerNormStats* stats_out) {
  const auto cols = x.shape().back();
  if (p.gain.numel() != cols || p.bias.numel() != cols) {
    throw DimensionError("layer_norm: parameters of width " + std::to_string(p.gain.numel()) +
                         " do not match input " + to_string(x.shape()));
  }
  if (!(p.eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
  const auto rows = x.numel() / cols;
  auto stats = row_statistics(x, p.eps);
  auto xs = x.data();
  auto w = p.gain.data();
  auto b = p.bias.data();
  std::vector<double> normalized(xs.size());
  Buffer out(xs.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double mu = stats.mean[r];
    const double inv = 1.0 / stats.sigma[r];
    for (std::size_t c = 0; c < cols; ++c) {
      const auto i = r * cols + c;
      normalized[i] = (xs[i] - mu) * inv;
      out[i] = normalized[i] * w[c] + b[c];
    }
  }
  std::vector<double> sigma = stats.sigma;
  if (stats_out) *stats_out = std::move(stats);
  return Tensor::make_result(
      x.shape(), std::move(out), {x, p.gain, p.bias}, "layer_norm",
      [x, gain = p.gain, bias = p.bias, rows, cols, normalized = std::move(normalized),
       sigma = std::move(sigma)](const OpOutput& o) {
        auto w = gain.data();
        if (gain.requires_grad()) {
          auto g = gain.grad_buffer();
          for (std::size_t i = 0; i < o.grad.size(); ++i) g[i % cols] += o.grad[i] * normalized[i];
        }
        if (bias.requires_grad()) {
          auto g = bias.grad_buffer();
          for (std::size_t i = 0; i < o.grad.size(); ++i) g[i % cols] += o.grad[i];
        }
        if (!x.requires_grad()) return;
        auto g = x.grad_buffer();
        const double n = static_cast<double>(cols);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_d = 0.0;
          double mean_dx = 0.0;
          for (std::size_t c = 0; c < cols; ++c) {
            const auto i = r * cols + c;
            const double d = o.grad[i] * w[c];
            mean_d += d;
            mean_dx += d * normalized[i];
          }
          mean_d /= n;
          mean_dx /= n;
          const double inv = 1.0 / sigma[r];
          for (std::size_t c = 0; c < cols; ++c) {
            const auto i = r * cols + c;
            g[i] += inv * (o.grad[i] * w[c] - mean_d - normalized[i] * mean_dx);
          }
        }
      });
}

Tensor linear(const Tensor& x, const Linear& layer) {
  return affine(x, layer.weight, layer.bias);
}

// ---------------------------------------------------------------------------
// Attention

AttentionMask AttentionMask::all(std::size_t batch, std::size_t q_len, std::size_t k_len) {
  return AttentionMask{batch, q_len, k_len, std::vector<std::uint8_t>(batch * q_len * k_len, 1)};
}

AttentionMask AttentionMask::key_padding(std::span<const std::int32_t> key_tokens, std::size_t batch,
                                         std::size_t q_len, std::size_t k_len, std::int32_t pad_id) {
  if (key_tokens.size() != batch * k_len) throw DimensionError("key_padding: token count does not match shape");
  auto mask = all(batch, q_len, k_len);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t q = 0; q < q_len; ++q)
      for (std::size_t k = 0; k < k_len; ++k)
        if (key_tokens[b * k_len + k] == pad_id) mask.allowed[(b * q_len + q) * k_len + k] = 0;
  return mask;
}

AttentionMask& AttentionMask::apply_causal() {
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t q = 0; q < q_len; ++q)
      for (std::size_t k = q + 1; k < k_len; ++k) allowed[(b * q_len + q) * k_len + k] = 0;
  return *this;
}

Tensor apply_attention_mask(const Tensor& scores, const AttentionMask& mask, std::size_t heads) {
  if (scores.rank() != 3 || scores.dim(0) != mask.batch * heads || scores.dim(1) != mask.q_len ||
      scores.dim(2) != mask.k_len) {
    throw DimensionError("attention mask [" + std::to_string(mask.batch) + "x" + std::to_string(mask.q_len) + "x" +
                         std::to_string(mask.k_len) + "] does not broadcast to scores " + to_string(scores.shape()));
  }
  auto s = scores.data();
  Buffer out(s.begin(), s.end());
  std::vector<std::uint8_t> keep(out.size());
  const auto plane = mask.q_len * mask.k_len;
  for (std::size_t bh = 0; bh < scores.dim(0); ++bh) {
    const auto* allowed = mask.allowed.data() + (bh / heads) * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      keep[bh * plane + i] = allowed[i];
      if (!allowed[i]) out[bh * plane + i] = kMaskedScore;
    }
  }
  return Tensor::make_result(scores.shape(), std::move(out), {scores}, "attention_mask",
                             [scores, keep = std::move(keep)](const OpOutput& o) {
                               auto g = scores.grad_buffer();
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 if (keep[i]) g[i] += o.grad[i];
                             });
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask& mask,
                            std::size_t heads, const AttentionParams& params, AttentionTrace* trace) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3) {
    throw DimensionError("multi_head_attention: expected [batch, len, d_model] inputs, got " +
                         to_string(q.shape()) + ", " + to_string(k.shape()) + ", " + to_string(v.shape()));
  }
  const auto d_model = q.dim(2);
  if (heads == 0 || d_model % heads != 0) {
    throw ConfigError("n_heads: d_model " + std::to_string(d_model) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (k.shape() != v.shape() || k.dim(0) != q.dim(0)) {
    throw DimensionError("multi_head_attention: key/value shapes " + to_string(k.shape()) + " and " +
                         to_string(v.shape()) + " do not match query " + to_string(q.shape()));
  }
  if (mask.batch != q.dim(0) || mask.q_len != q.dim(1) || mask.k_len != k.dim(1)) {
    throw DimensionError("multi_head_attention: mask does not match query/key lengths");
  }
  for (std::size_t b = 0; b < mask.batch; ++b) {
    for (std::size_t i = 0; i < mask.q_len; ++i) {
      bool any = false;
      for (std::size_t j = 0; j < mask.k_len && !any; ++j) any = mask.is_allowed(b, i, j);
      if (!any) {
        throw ContractError("multi_head_attention: query " + std::to_string(i) + " of batch row " +
                            std::to_string(b) + " has no unmasked key");
      }
    }
  }

  const double head_dim = static_cast<double>(d_model / heads);
  auto qh = split_heads(linear(q, params.query), heads);
  auto kh = split_heads(linear(k, params.key), heads);
  auto vh = split_heads(linear(v, params.value), heads);
  auto scores = scale(batched_matmul(qh, kh, /*transpose_b=*/true), 1.0 / std::sqrt(head_dim));
  auto weights = softmax(apply_attention_mask(scores, mask, heads), 2);
  if (trace) trace->weights = weights;
  auto context = merge_heads(batched_matmul(weights, vh), heads);
  return linear(context, params.output);
}

Tensor feed_forward(const Tensor& x, const FfnParams& params) {
  return linear(relu(linear(x, params.inner)), params.outer);
}

Tensor dropout(const Tensor& x, double rate, Rng* rng) {
  if (rate <= 0.0 || rng == nullptr) return x;
  if (rate >= 1.0) throw ConfigError("dropout: rate must be < 1");
  const double keep_scale = 1.0 / (1.0 - rate);
  auto xs = x.data();
  std::vector<double> factors(xs.size());
  Buffer out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    factors[i] = rng->uniform_open() < rate ? 0.0 : keep_scale;
    out[i] = xs[i] * factors[i];
  }
  return Tensor::make_result(x.shape(), std::move(out), {x}, "dropout",
                             [x, factors = std::move(factors)](const OpOutput& o) {
                               auto g = x.grad_buffer();
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * factors[i];
                             });
}

// ---------------------------------------------------------------------------
// Sublayer wiring

SublayerIO sublayer_v1(const Tensor& in_res, const SublayerFn& f, const LayerNormParams& p) {
  SublayerIO io;
  io.in_res = in_res;
  io.in_model = f(in_res);
  io.residual_sum = add(in_res, io.in_model);
  io.out_res = layer_norm(io.residual_sum, p, &io.norm_stats);
  return io;
}

SublayerIO sublayer_v2(const Tensor& in_res, const SublayerFn& f, const LayerNormParams& p) {
  SublayerIO io;
  io.in_res = in_res;
  io.in_model = f(layer_norm(in_res, p, &io.norm_stats));
  io.residual_sum = add(in_res, io.in_model);
  io.out_res = io.residual_sum;
  return io;
}

SublayerIO apply_sublayer(NormOrder order, const Tensor& in_res, const SublayerFn& f, const LayerNormParams& p) {
  return order == NormOrder::V1 ? sublayer_v1(in_res, f, p) : sublayer_v2(in_res, f, p);
}

}  // namespace deepnorm
