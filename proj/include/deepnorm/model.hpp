#pragma once

// Encoder-decoder transformer with configurable depth and normalization order.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "deepnorm/init.hpp"
#include "deepnorm/layers.hpp"
#include "deepnorm/rng.hpp"
#include "deepnorm/tensor.hpp"
#include "deepnorm/tokens.hpp"

namespace deepnorm {

struct ModelConfig {
  std::size_t enc_layers = 6;
  std::size_t dec_layers = 6;
  std::size_t d_model = 64;
  std::size_t d_ff = 256;
  std::size_t n_heads = 4;
  std::size_t vocab_size = 64;
  NormOrder norm_order = NormOrder::V2;
  InitFamily init_family = InitFamily::Glorot;
  bool tie_embeddings = false;
  bool scale_embedding = true;
  bool final_ln_v2 = true;
  double ln_eps = kDefaultLayerNormEps;
  std::size_t max_seq_len = 64;
  double dropout = 0.0;

  // Throws ConfigError naming the first offending field.
  void validate() const;
  bool has_final_norm() const { return norm_order == NormOrder::V2 && final_ln_v2; }
};

nlohmann::json to_json(const ModelConfig& cfg);
// Strict: unknown keys and ill-typed values raise ConfigError. Missing keys
// keep the values already in `base`.
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {});

enum class SublayerKind { SelfAttention, CrossAttention, FeedForward };
enum class Stack { Encoder, Decoder };

std::string_view to_string(SublayerKind kind);
std::string_view to_string(Stack stack);

struct EncoderLayer {
  AttentionParams self_attn;
  LayerNormParams self_attn_norm;
  FfnParams ffn;
  LayerNormParams ffn_norm;
};

struct DecoderLayer {
  AttentionParams self_attn;
  LayerNormParams self_attn_norm;
  AttentionParams cross_attn;
  LayerNormParams cross_attn_norm;
  FfnParams ffn;
  LayerNormParams ffn_norm;
};

// Parameter names and roles for a config, in canonical order.
std::vector<ParamSpec> model_param_specs(const ModelConfig& cfg);

class TransformerModel {
 public:
  // Wires an already-initialized parameter set; names must match
  // model_param_specs(cfg) exactly.
  TransformerModel(ModelConfig cfg, ParameterSet params);

  const ModelConfig& config() const { return cfg_; }
  const ParameterSet& parameters() const { return params_; }
  std::size_t parameter_count() const { return params_.total_elements(); }

  // Deep copy with independent storage.
  TransformerModel clone() const;
  void zero_grad();

  Tensor src_embedding;  // [vocab, d_model]
  Tensor tgt_embedding;  // [vocab, d_model]
  std::vector<EncoderLayer> encoder;
  std::vector<DecoderLayer> decoder;
  std::optional<LayerNormParams> encoder_final_norm;
  std::optional<LayerNormParams> decoder_final_norm;
  Linear output;  // weight undefined when embeddings are tied
  Tensor positional;  // [max_seq_len, d_model], constant

 private:
  ModelConfig cfg_;
  ParameterSet params_;
};

TransformerModel build_model(const ModelConfig& cfg, const Rng& rng);

// Sinusoidal position encodings, [len, d_model].
Tensor sinusoidal_positions(std::size_t len, std::size_t d_model);

// One captured sublayer evaluation.
struct SublayerRecord {
  Stack stack;
  std::size_t layer;
  SublayerKind kind;
  NormOrder order;
  SublayerIO io;
  std::vector<double> gain;
  std::vector<double> bias;
  // Row r of the [batch*len, d_model] stream is a real (non-pad) token.
  std::vector<std::uint8_t> row_valid;
};

// Per-call instrumentation; pass to forward() to capture every sublayer.
struct ForwardProbe {
  std::vector<SublayerRecord> records;
};

struct ForwardOptions {
  ForwardProbe* probe = nullptr;
  Rng* dropout_rng = nullptr;  // dropout is active only when set
};

// Encoder memory, [batch, src_len, d_model].
Tensor encode(const TransformerModel& model, const Tokens& src, const ForwardOptions& opts = {});
// Logits [batch, tgt_len, vocab] for teacher-forced targets under a causal mask.
Tensor decode(const TransformerModel& model, const Tensor& memory, const Tokens& src, const Tokens& tgt_in,
              const ForwardOptions& opts = {});
Tensor forward(const TransformerModel& model, const Tokens& src, const Tokens& tgt_in,
               const ForwardOptions& opts = {});

// Argmax decoding over eos and content ids, ties to the lowest id. Each output
// excludes eos and has at most min(max_len, max_seq_len - 1) tokens.
std::vector<std::vector<std::int32_t>> decode_greedy(const TransformerModel& model, const Tokens& src,
                                                     std::size_t max_len);

// Binary checkpoint: "DNLB1", u32 json length, config JSON, u32 parameter
// count, then per parameter: u32 name length, name, u32 rank, u64 dims,
// little-endian IEEE-754 doubles.
void save_checkpoint(const TransformerModel& model, const std::string& path);
TransformerModel load_checkpoint(const std::string& path);

}  // namespace deepnorm
