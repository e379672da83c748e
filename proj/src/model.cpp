#include "deepnorm/model.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "deepnorm/errors.hpp"
#include "json_fields.hpp"

namespace deepnorm {

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* field) {
    if (v == 0) throw ConfigError(std::string(field) + ": must be >= 1");
  };
  positive(enc_layers, "enc_layers");
  positive(dec_layers, "dec_layers");
  positive(d_model, "d_model");
  positive(d_ff, "d_ff");
  positive(n_heads, "n_heads");
  positive(vocab_size, "vocab_size");
  positive(max_seq_len, "max_seq_len");
  if (d_model % n_heads != 0) {
    throw ConfigError("n_heads: d_model " + std::to_string(d_model) + " is not divisible by " +
                      std::to_string(n_heads));
  }
  if (vocab_size <= static_cast<std::size_t>(kFirstContentId)) {
    throw ConfigError("vocab_size: needs at least one content id beyond 0 (pad), 1 (bos), 2 (eos)");
  }
  if (!(ln_eps > 0.0)) throw ConfigError("ln_eps: must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout: must be in [0, 1)");
}

nlohmann::json to_json(const ModelConfig& cfg) {
  return nlohmann::json{
      {"enc_layers", cfg.enc_layers},
      {"dec_layers", cfg.dec_layers},
      {"d_model", cfg.d_model},
      {"d_ff", cfg.d_ff},
      {"n_heads", cfg.n_heads},
      {"vocab_size", cfg.vocab_size},
      {"norm_order", to_string(cfg.norm_order)},
      {"init_family", to_string(cfg.init_family)},
      {"tie_embeddings", cfg.tie_embeddings},
      {"scale_embedding", cfg.scale_embedding},
      {"final_ln_v2", cfg.final_ln_v2},
      {"ln_eps", cfg.ln_eps},
      {"max_seq_len", cfg.max_seq_len},
      {"dropout", cfg.dropout},
  };
}

ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig cfg) {
  json_fields::require_object(j, "model");
  for (const auto& [key, value] : j.items()) {
    if (key == "enc_layers") cfg.enc_layers = json_fields::as_size(value, key);
    else if (key == "dec_layers") cfg.dec_layers = json_fields::as_size(value, key);
    else if (key == "d_model") cfg.d_model = json_fields::as_size(value, key);
    else if (key == "d_ff") cfg.d_ff = json_fields::as_size(value, key);
    else if (key == "n_heads") cfg.n_heads = json_fields::as_size(value, key);
    else if (key == "vocab_size") cfg.vocab_size = json_fields::as_size(value, key);
    else if (key == "norm_order") cfg.norm_order = parse_norm_order(json_fields::as_string(value, key));
    else if (key == "init_family") cfg.init_family = parse_init_family(json_fields::as_string(value, key));
    else if (key == "tie_embeddings") cfg.tie_embeddings = json_fields::as_bool(value, key);
    else if (key == "scale_embedding") cfg.scale_embedding = json_fields::as_bool(value, key);
    else if (key == "final_ln_v2") cfg.final_ln_v2 = json_fields::as_bool(value, key);
    else if (key == "ln_eps") cfg.ln_eps = json_fields::as_double(value, key);
    else if (key == "max_seq_len") cfg.max_seq_len = json_fields::as_size(value, key);
    else if (key == "dropout") cfg.dropout = json_fields::as_double(value, key);
    else throw ConfigError("model: unknown key '" + key + "'");
  }
  return cfg;
}

std::string_view to_string(SublayerKind kind) {
  switch (kind) {
    case SublayerKind::SelfAttention:
      return "self_attn";
    case SublayerKind::CrossAttention:
      return "cross_attn";
    case SublayerKind::FeedForward:
      return "ffn";
  }
  return "";
}

std::string_view to_string(Stack stack) { return stack == Stack::Encoder ? "encoder" : "decoder"; }

// ---------------------------------------------------------------------------
// Parameter layout

namespace {

void add_linear(std::vector<ParamSpec>& specs, const std::string& prefix, std::size_t in, std::size_t out,
                bool with_bias = true) {
  specs.push_back({prefix + ".weight", ParamRole::LinearWeight, {in, out}});
  if (with_bias) specs.push_back({prefix + ".bias", ParamRole::LinearBias, {out}});
}

void add_attention(std::vector<ParamSpec>& specs, const std::string& prefix, std::size_t d) {
  add_linear(specs, prefix + ".query", d, d);
  add_linear(specs, prefix + ".key", d, d, /*with_bias=*/false);
  add_linear(specs, prefix + ".value", d, d);
  add_linear(specs, prefix + ".output", d, d);
}

void add_norm(std::vector<ParamSpec>& specs, const std::string& prefix, std::size_t d) {
  specs.push_back({prefix + ".gain", ParamRole::NormGain, {d}});
  specs.push_back({prefix + ".bias", ParamRole::NormBias, {d}});
}

void add_ffn(std::vector<ParamSpec>& specs, const std::string& prefix, std::size_t d, std::size_t d_ff) {
  add_linear(specs, prefix + ".inner", d, d_ff);
  add_linear(specs, prefix + ".outer", d_ff, d);
}

std::string layer_prefix(const char* stack, std::size_t i) { return std::string(stack) + "." + std::to_string(i); }

}  // namespace

std::vector<ParamSpec> model_param_specs(const ModelConfig& cfg) {
  const auto d = cfg.d_model;
  std::vector<ParamSpec> specs;
  specs.push_back({"src_embedding", ParamRole::Embedding, {cfg.vocab_size, d}});
  specs.push_back({"tgt_embedding", ParamRole::Embedding, {cfg.vocab_size, d}});
  for (std::size_t i = 0; i < cfg.enc_layers; ++i) {
    const auto p = layer_prefix("enc", i);
    add_attention(specs, p + ".self_attn", d);
    add_norm(specs, p + ".self_attn_norm", d);
    add_ffn(specs, p + ".ffn", d, cfg.d_ff);
    add_norm(specs, p + ".ffn_norm", d);
  }
  for (std::size_t i = 0; i < cfg.dec_layers; ++i) {
    const auto p = layer_prefix("dec", i);
    add_attention(specs, p + ".self_attn", d);
    add_norm(specs, p + ".self_attn_norm", d);
    add_attention(specs, p + ".cross_attn", d);
    add_norm(specs, p + ".cross_attn_norm", d);
    add_ffn(specs, p + ".ffn", d, cfg.d_ff);
    add_norm(specs, p + ".ffn_norm", d);
  }
  if (cfg.has_final_norm()) {
    add_norm(specs, "enc.final_norm", d);
    add_norm(specs, "dec.final_norm", d);
  }
  if (!cfg.tie_embeddings) {
    add_linear(specs, "output", d, cfg.vocab_size);
  } else {
    specs.push_back({"output.bias", ParamRole::LinearBias, {cfg.vocab_size}});
  }
  return specs;
}

namespace {

Linear wire_linear(const ParameterSet& ps, const std::string& prefix, bool with_bias = true) {
  return Linear{ps.get(prefix + ".weight"), with_bias ? ps.get(prefix + ".bias") : Tensor{}};
}

AttentionParams wire_attention(const ParameterSet& ps, const std::string& prefix) {
  return AttentionParams{wire_linear(ps, prefix + ".query"), wire_linear(ps, prefix + ".key", false),
                         wire_linear(ps, prefix + ".value"), wire_linear(ps, prefix + ".output")};
}

LayerNormParams wire_norm(const ParameterSet& ps, const std::string& prefix, double eps) {
  return LayerNormParams{ps.get(prefix + ".gain"), ps.get(prefix + ".bias"), eps};
}

FfnParams wire_ffn(const ParameterSet& ps, const std::string& prefix) {
  return FfnParams{wire_linear(ps, prefix + ".inner"), wire_linear(ps, prefix + ".outer")};
}

}  // namespace

TransformerModel::TransformerModel(ModelConfig cfg, ParameterSet params) : cfg_(std::move(cfg)), params_(std::move(params)) {
  cfg_.validate();
  const auto specs = model_param_specs(cfg_);
  if (specs.size() != params_.size()) {
    throw DataError("model: expected " + std::to_string(specs.size()) + " parameters, got " +
                    std::to_string(params_.size()));
  }
  for (const auto& spec : specs) {
    if (!params_.contains(spec.name)) throw DataError("model: missing parameter " + spec.name);
    if (params_.get(spec.name).shape() != spec.shape) {
      throw DataError("model: parameter " + spec.name + " has shape " + to_string(params_.get(spec.name).shape()) +
                      ", expected " + to_string(spec.shape));
    }
  }
  const double eps = cfg_.ln_eps;
  src_embedding = params_.get("src_embedding");
  tgt_embedding = params_.get("tgt_embedding");
  for (std::size_t i = 0; i < cfg_.enc_layers; ++i) {
    const auto p = layer_prefix("enc", i);
    encoder.push_back(EncoderLayer{wire_attention(params_, p + ".self_attn"), wire_norm(params_, p + ".self_attn_norm", eps),
                                   wire_ffn(params_, p + ".ffn"), wire_norm(params_, p + ".ffn_norm", eps)});
  }
  for (std::size_t i = 0; i < cfg_.dec_layers; ++i) {
    const auto p = layer_prefix("dec", i);
    decoder.push_back(DecoderLayer{wire_attention(params_, p + ".self_attn"), wire_norm(params_, p + ".self_attn_norm", eps),
                                   wire_attention(params_, p + ".cross_attn"), wire_norm(params_, p + ".cross_attn_norm", eps),
                                   wire_ffn(params_, p + ".ffn"), wire_norm(params_, p + ".ffn_norm", eps)});
  }
  if (cfg_.has_final_norm()) {
    encoder_final_norm = wire_norm(params_, "enc.final_norm", eps);
    decoder_final_norm = wire_norm(params_, "dec.final_norm", eps);
  }
  output = Linear{cfg_.tie_embeddings ? Tensor{} : params_.get("output.weight"), params_.get("output.bias")};
  positional = sinusoidal_positions(cfg_.max_seq_len, cfg_.d_model);
}

TransformerModel TransformerModel::clone() const {
  ParameterSet copy;
  for (const auto& e : params_) copy.add(e.name, e.tensor.clone());
  return TransformerModel(cfg_, std::move(copy));
}

void TransformerModel::zero_grad() {
  for (const auto& e : params_) {
    auto t = e.tensor;
    t.zero_grad();
  }
}

TransformerModel build_model(const ModelConfig& cfg, const Rng& rng) {
  cfg.validate();
  return TransformerModel(cfg, init_model_params(model_param_specs(cfg), cfg.init_family, rng));
}

Tensor sinusoidal_positions(std::size_t len, std::size_t d_model) {
  std::vector<double> table(len * d_model);
  for (std::size_t pos = 0; pos < len; ++pos) {
    for (std::size_t i = 0; i < d_model; ++i) {
      const double exponent = static_cast<double>(i - i % 2) / static_cast<double>(d_model);
      const double angle = static_cast<double>(pos) / std::pow(10000.0, exponent);
      table[pos * d_model + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return Tensor::from_data({len, d_model}, std::move(table));
}

// ---------------------------------------------------------------------------
// Forward pass

namespace {

Tensor embed(const TransformerModel& model, const Tensor& table, const Tokens& tokens) {
  const auto& cfg = model.config();
  if (tokens.len > cfg.max_seq_len) {
    throw DataError("forward: sequence length " + std::to_string(tokens.len) + " exceeds max_seq_len " +
                    std::to_string(cfg.max_seq_len));
  }
  if (tokens.ids.size() != tokens.batch * tokens.len || tokens.ids.empty()) {
    throw DataError("forward: token matrix is empty or inconsistent with its shape");
  }
  for (auto id : tokens.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
      throw DataError("forward: token id " + std::to_string(id) + " outside vocabulary of size " +
                      std::to_string(cfg.vocab_size));
    }
  }
  auto x = embedding(table, tokens.ids, {tokens.batch, tokens.len});
  if (cfg.scale_embedding) x = scale(x, std::sqrt(static_cast<double>(cfg.d_model)));
  const auto d = cfg.d_model;
  auto pe = model.positional.data();
  std::vector<double> tiled(tokens.batch * tokens.len * d);
  for (std::size_t b = 0; b < tokens.batch; ++b) {
    std::copy_n(pe.begin(), tokens.len * d, tiled.begin() + static_cast<std::ptrdiff_t>(b * tokens.len * d));
  }
  return add(x, Tensor::from_data({tokens.batch, tokens.len, d}, std::move(tiled)));
}

std::vector<std::uint8_t> valid_rows(const Tokens& tokens) {
  std::vector<std::uint8_t> rows(tokens.ids.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = tokens.ids[i] != kPadId;
  return rows;
}

class SublayerRunner {
 public:
  SublayerRunner(const TransformerModel& model, const ForwardOptions& opts, Stack stack, const Tokens& tokens)
      : model_(model), opts_(opts), stack_(stack), tokens_(tokens) {}

  Tensor run(std::size_t layer, SublayerKind kind, const Tensor& in_res, const SublayerFn& f,
             const LayerNormParams& norm) {
    const double rate = model_.config().dropout;
    Rng* rng = opts_.dropout_rng;
    auto wrapped = [&](const Tensor& x) { return dropout(f(x), rate, rng); };
    auto io = apply_sublayer(model_.config().norm_order, in_res, wrapped, norm);
    auto out = io.out_res;
    if (opts_.probe) {
      opts_.probe->records.push_back(SublayerRecord{
          stack_, layer, kind, model_.config().norm_order, std::move(io),
          std::vector<double>(norm.gain.data().begin(), norm.gain.data().end()),
          std::vector<double>(norm.bias.data().begin(), norm.bias.data().end()), valid_rows(tokens_)});
    }
    return out;
  }

 private:
  const TransformerModel& model_;
  const ForwardOptions& opts_;
  Stack stack_;
  const Tokens& tokens_;
};

}  // namespace

Tensor encode(const TransformerModel& model, const Tokens& src, const ForwardOptions& opts) {
  const auto& cfg = model.config();
  auto x = dropout(embed(model, model.src_embedding, src), cfg.dropout, opts.dropout_rng);
  const auto self_mask = AttentionMask::key_padding(src.ids, src.batch, src.len, src.len, kPadId);
  SublayerRunner runner(model, opts, Stack::Encoder, src);
  for (std::size_t i = 0; i < model.encoder.size(); ++i) {
    const auto& layer = model.encoder[i];
    x = runner.run(i, SublayerKind::SelfAttention, x,
                   [&](const Tensor& h) { return multi_head_attention(h, h, h, self_mask, cfg.n_heads, layer.self_attn); },
                   layer.self_attn_norm);
    x = runner.run(i, SublayerKind::FeedForward, x, [&](const Tensor& h) { return feed_forward(h, layer.ffn); },
                   layer.ffn_norm);
  }
  if (model.encoder_final_norm) x = layer_norm(x, *model.encoder_final_norm);
  return x;
}

Tensor decode(const TransformerModel& model, const Tensor& memory, const Tokens& src, const Tokens& tgt_in,
              const ForwardOptions& opts) {
  const auto& cfg = model.config();
  if (tgt_in.batch != src.batch) throw DataError("forward: source and target batch sizes differ");
  auto y = dropout(embed(model, model.tgt_embedding, tgt_in), cfg.dropout, opts.dropout_rng);
  auto self_mask = AttentionMask::key_padding(tgt_in.ids, tgt_in.batch, tgt_in.len, tgt_in.len, kPadId);
  self_mask.apply_causal();
  const auto cross_mask = AttentionMask::key_padding(src.ids, src.batch, tgt_in.len, src.len, kPadId);
  SublayerRunner runner(model, opts, Stack::Decoder, tgt_in);
  for (std::size_t i = 0; i < model.decoder.size(); ++i) {
    const auto& layer = model.decoder[i];
    y = runner.run(i, SublayerKind::SelfAttention, y,
                   [&](const Tensor& h) { return multi_head_attention(h, h, h, self_mask, cfg.n_heads, layer.self_attn); },
                   layer.self_attn_norm);
    y = runner.run(i, SublayerKind::CrossAttention, y,
                   [&](const Tensor& h) {
                     return multi_head_attention(h, memory, memory, cross_mask, cfg.n_heads, layer.cross_attn);
                   },
                   layer.cross_attn_norm);
    y = runner.run(i, SublayerKind::FeedForward, y, [&](const Tensor& h) { return feed_forward(h, layer.ffn); },
                   layer.ffn_norm);
  }
  if (model.decoder_final_norm) y = layer_norm(y, *model.decoder_final_norm);
  if (cfg.tie_embeddings) return add_bias(matmul(y, transpose(model.tgt_embedding)), model.output.bias);
  return linear(y, model.output);
}

Tensor forward(const TransformerModel& model, const Tokens& src, const Tokens& tgt_in, const ForwardOptions& opts) {
  auto memory = encode(model, src, opts);
  return decode(model, memory, src, tgt_in, opts);
}

std::vector<std::vector<std::int32_t>> decode_greedy(const TransformerModel& model, const Tokens& src,
                                                     std::size_t max_len) {
  NoGradGuard no_grad;
  const auto& cfg = model.config();
  max_len = std::min(max_len, cfg.max_seq_len - 1);
  std::vector<std::vector<std::int32_t>> outputs(src.batch);
  if (src.batch == 0 || max_len == 0) return outputs;
  auto memory = encode(model, src, {});
  std::vector<bool> finished(src.batch, false);
  std::vector<std::vector<std::int32_t>> prefixes(src.batch, std::vector<std::int32_t>{kBosId});
  for (std::size_t step = 0; step < max_len; ++step) {
    const auto len = step + 1;
    Tokens tgt = Tokens::filled(src.batch, len);
    for (std::size_t b = 0; b < src.batch; ++b) {
      std::copy(prefixes[b].begin(), prefixes[b].end(), tgt.ids.begin() + static_cast<std::ptrdiff_t>(b * len));
    }
    auto logits = decode(model, memory, src, tgt, {});
    auto values = logits.data();
    const auto vocab = cfg.vocab_size;
    bool all_done = true;
    for (std::size_t b = 0; b < src.batch; ++b) {
      if (finished[b]) {
        prefixes[b].push_back(kPadId);
        continue;
      }
      const auto* row = values.data() + (b * len + step) * vocab;
      // pad and bos are never emitted. max_element returns the first maximum,
      // so ties go to the lowest id.
      const auto best = static_cast<std::int32_t>(std::max_element(row + kEosId, row + vocab) - row);
      prefixes[b].push_back(best);
      if (best == kEosId) {
        finished[b] = true;
      } else {
        outputs[b].push_back(best);
        all_done = false;
      }
    }
    if (all_done) break;
  }
  return outputs;
}

}  // namespace deepnorm
