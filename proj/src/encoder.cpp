#include "perfect/encoder.hpp"

#include <cmath>

#include "perfect/errors.hpp"

namespace perfect {

std::string_view to_string(AdapterPlacement placement) {
  return placement == AdapterPlacement::after_ffn_only ? "after_ffn_only" : "after_attn_and_ffn";
}

AdapterPlacement parse_adapter_placement(std::string_view name) {
  if (name == "after_ffn_only") return AdapterPlacement::after_ffn_only;
  if (name == "after_attn_and_ffn") return AdapterPlacement::after_attn_and_ffn;
  throw InputError("unknown adapter placement '" + std::string(name) + "'");
}

void EncoderConfig::validate() const {
  if (vocab_size <= Vocab::kSpecialCount) throw InputError("encoder: vocab_size too small");
  if (hidden == 0 || layers == 0 || heads == 0 || ffn_mult == 0 || max_seq == 0 || type_vocab == 0) {
    throw InputError("encoder: hidden, layers, heads, ffn_mult, max_seq, type_vocab must be positive");
  }
  if (hidden % heads != 0) {
    throw InputError("encoder: hidden " + std::to_string(hidden) + " not divisible by " + std::to_string(heads) +
                     " heads");
  }
  if (adapter && (adapter->bottleneck == 0 || adapter->bottleneck >= hidden)) {
    throw InputError("encoder: adapter bottleneck must satisfy 1 <= B < H (B=" +
                     std::to_string(adapter->bottleneck) + ", H=" + std::to_string(hidden) + ")");
  }
}

EncoderParamCounts count_encoder_params(const EncoderConfig& c) {
  const auto h = c.hidden, f = c.ffn_inner();
  EncoderParamCounts n;
  n.embeddings = (c.vocab_size + c.max_seq + c.type_vocab) * h;
  n.embedding_norm = 2 * h;
  n.attention = c.layers * 4 * (h * h + h);
  n.ffn = c.layers * (h * f + f + f * h + h);
  n.layer_norms = c.layers * 4 * h;
  if (c.adapter) {
    const auto b = c.adapter->bottleneck;
    n.adapters = c.layers * c.adapters_per_layer() * (2 * h * b + b + h);
  }
  if (c.mlm_head_transform) n.mlm_head = h * h + h + 2 * h + c.vocab_size;
  return n;
}

std::string layer_prefix(std::size_t layer) { return "layer" + std::to_string(layer) + "."; }

Tensor apply_adapter(const Tensor& x, const AdapterWeights& adapter) {
  const auto inner = gelu(add_row(matmul(x, adapter.down_weight), adapter.down_bias));
  return add(add_row(matmul(inner, adapter.up_weight), adapter.up_bias), x);
}

Tensor mlm_logits(const Tensor& hidden, const Tensor& output_embedding) {
  if (output_embedding.dim() != 2 || output_embedding.shape()[1] != hidden.cols()) {
    throw DimensionError("mlm_logits: output embedding " + shape_string(output_embedding.shape()) +
                         " does not match hidden " + shape_string(hidden.shape()));
  }
  return matmul_nt(hidden, output_embedding);
}

Encoder::Encoder(EncoderConfig config) : config_(std::move(config)) {
  config_.validate();
  init_parameters();
}

Encoder::Encoder(const Encoder& other) : config_(other.config_), passes_(other.forward_passes()) {
  for (const auto& item : other.params_.items()) {
    Tensor copy = item.tensor.detach();
    copy.set_requires_grad(item.tensor.requires_grad());
    params_.add(item.name, std::move(copy));
  }
}

Encoder::Encoder(Encoder&& other) noexcept
    : config_(std::move(other.config_)), params_(std::move(other.params_)), passes_(other.forward_passes()) {}

void Encoder::reinitialize_adapters(Rng& rng) {
  if (!config_.adapter) return;
  const auto& a = *config_.adapter;
  for (auto& item : params_.items()) {
    if (item.name.find("adapter.") == std::string::npos) continue;
    const bool down = item.name.ends_with(".down.weight");
    const bool up = item.name.ends_with(".up.weight") && !a.up_projection_zero_init;
    if (!down && !up) continue;
    for (auto& v : item.tensor.mutable_values()) v = rng.normal(0.0, a.init_scale);
  }
}

void Encoder::init_parameters() {
  // Adapters draw from their own stream so the backbone is the same with or
  // without them.
  Rng rng(config_.init_seed);
  Rng adapter_rng(Rng::mix(config_.init_seed, 0xada7));
  const auto h = config_.hidden, f = config_.ffn_inner();
  auto draw = [](Rng& source, Shape shape, double stddev) {
    std::vector<double> v(shape_size(shape));
    for (auto& x : v) x = source.normal(0.0, stddev);
    return Tensor(std::move(shape), std::move(v));
  };
  auto normal = [&](Shape shape, double stddev) { return draw(rng, std::move(shape), stddev); };
  auto weight_std = [&](std::size_t fan_in) {
    return config_.init_std > 0.0 ? config_.init_std : 1.0 / std::sqrt(static_cast<double>(fan_in));
  };
  auto add_linear = [&](const std::string& prefix, std::size_t in, std::size_t out) {
    params_.add(prefix + ".weight", normal({in, out}, weight_std(in)));
    params_.add(prefix + ".bias", Tensor::zeros({out}));
  };
  auto add_norm = [&](const std::string& prefix) {
    params_.add(prefix + ".gain", Tensor::full({h}, 1.0));
    params_.add(prefix + ".bias", Tensor::zeros({h}));
  };
  auto add_adapter = [&](const std::string& prefix) {
    const auto& a = *config_.adapter;
    params_.add(prefix + ".down.weight", draw(adapter_rng, {h, a.bottleneck}, a.init_scale));
    params_.add(prefix + ".down.bias", Tensor::zeros({a.bottleneck}));
    params_.add(prefix + ".up.weight",
                a.up_projection_zero_init ? Tensor::zeros({a.bottleneck, h})
                                           : draw(adapter_rng, {a.bottleneck, h}, a.init_scale));
    params_.add(prefix + ".up.bias", Tensor::zeros({h}));
  };

  params_.add("embeddings.token", normal({config_.vocab_size, h}, 1.0));
  params_.add("embeddings.position", normal({config_.max_seq, h}, 0.2));
  params_.add("embeddings.segment", normal({config_.type_vocab, h}, 0.2));
  add_norm("embeddings.norm");
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const auto p = layer_prefix(l);
    for (const char* name : {"query", "key", "value", "output"}) add_linear(p + "attention." + name, h, h);
    if (config_.adapter && config_.adapter_placement == AdapterPlacement::after_attn_and_ffn) {
      add_adapter(p + "attention_adapter");
    }
    add_norm(p + "attention_norm");
    add_linear(p + "ffn.inner", h, f);
    add_linear(p + "ffn.outer", f, h);
    if (config_.adapter) add_adapter(p + "ffn_adapter");
    add_norm(p + "ffn_norm");
  }
  if (config_.mlm_head_transform) {
    add_linear("mlm_head.transform", h, h);
    add_norm("mlm_head.norm");
    params_.add("mlm_head.decoder.bias", Tensor::zeros({config_.vocab_size}));
  }
}

Tensor Encoder::linear(const Tensor& x, const std::string& prefix) const {
  return add_row(matmul(x, params_.get(prefix + ".weight")), params_.get(prefix + ".bias"));
}

std::optional<AdapterWeights> Encoder::adapter(std::size_t layer, std::string_view site) const {
  const auto prefix = layer_prefix(layer) + std::string(site);
  if (!params_.contains(prefix + ".down.weight")) return std::nullopt;
  return AdapterWeights{params_.get(prefix + ".down.weight"), params_.get(prefix + ".down.bias"),
                        params_.get(prefix + ".up.weight"), params_.get(prefix + ".up.bias")};
}

Tensor Encoder::embed(const Batch& batch, const Tensor* prompt) const {
  const std::size_t prompt_rows = prompt ? prompt->rows() : 0;
  const std::size_t stride = prompt_rows + batch.seq;
  if (stride > config_.max_seq) {
    throw ContractError("encode: sequence of " + std::to_string(stride) + " positions exceeds max_seq " +
                        std::to_string(config_.max_seq));
  }
  std::vector<std::size_t> ids(batch.ids.size());
  std::vector<std::size_t> segments(batch.segments.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (batch.ids[i] >= config_.vocab_size) {
      throw InputError("encode: token id " + std::to_string(batch.ids[i]) + " >= vocab_size " +
                       std::to_string(config_.vocab_size));
    }
    if (batch.segments[i] >= config_.type_vocab) {
      throw InputError("encode: segment id " + std::to_string(batch.segments[i]) + " >= type_vocab " +
                       std::to_string(config_.type_vocab));
    }
    ids[i] = batch.ids[i];
    segments[i] = batch.segments[i];
  }
  Tensor x = add(gather_rows(params_.get("embeddings.token"), ids),
                 gather_rows(params_.get("embeddings.segment"), segments));
  if (prompt) {
    if (prompt->cols() != config_.hidden) {
      throw DimensionError("encode: prompt " + shape_string(prompt->shape()) + " does not match hidden size");
    }
    // Rows [P ; E] then reorder so each example reads [P ; its tokens].
    std::vector<std::size_t> order;
    order.reserve(batch.size * stride);
    for (std::size_t b = 0; b < batch.size; ++b) {
      for (std::size_t t = 0; t < prompt_rows; ++t) order.push_back(t);
      for (std::size_t j = 0; j < batch.seq; ++j) order.push_back(prompt_rows + b * batch.seq + j);
    }
    x = gather_rows(concat_rows(*prompt, x), order);
  }
  std::vector<std::size_t> positions(batch.size * stride);
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i % stride;
  x = add(x, gather_rows(params_.get("embeddings.position"), positions));
  return layer_norm(x, params_.get("embeddings.norm.gain"), params_.get("embeddings.norm.bias"));
}

Tensor Encoder::encode(const Batch& batch, const Tensor* prompt) const {
  const std::size_t prompt_rows = prompt ? prompt->rows() : 0;
  const std::size_t stride = prompt_rows + batch.seq;
  std::vector<unsigned char> key_mask(batch.size * stride, 1);
  for (std::size_t b = 0; b < batch.size; ++b) {
    for (std::size_t j = 0; j < batch.seq; ++j) key_mask[b * stride + prompt_rows + j] = batch.attention[b * batch.seq + j];
  }

  passes_.fetch_add(batch.size, std::memory_order_relaxed);
  Tensor x = embed(batch, prompt);
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const auto p = layer_prefix(l);
    Tensor attended = attention(linear(x, p + "attention.query"), linear(x, p + "attention.key"),
                                linear(x, p + "attention.value"), batch.size, stride, config_.heads, key_mask);
    attended = linear(attended, p + "attention.output");
    if (auto a = adapter(l, "attention_adapter")) attended = apply_adapter(attended, *a);
    x = layer_norm(add(x, attended), params_.get(p + "attention_norm.gain"), params_.get(p + "attention_norm.bias"));

    Tensor ffn = linear(gelu(linear(x, p + "ffn.inner")), p + "ffn.outer");
    if (auto a = adapter(l, "ffn_adapter")) ffn = apply_adapter(ffn, *a);
    x = layer_norm(add(x, ffn), params_.get(p + "ffn_norm.gain"), params_.get(p + "ffn_norm.bias"));
  }
  return x;
}

Tensor Encoder::encode(std::span<const TokenId> tokens, std::vector<std::string>* warnings) const {
  MaskedExample ex;
  const auto n = std::min(tokens.size(), config_.max_seq);
  if (n < tokens.size() && warnings) {
    warnings->push_back("input of " + std::to_string(tokens.size()) + " tokens truncated to " +
                        std::to_string(config_.max_seq));
  }
  ex.ids.assign(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(n));
  ex.segments.assign(n, 0);
  const MaskedExample* one = &ex;
  return encode(build_batch(std::span(one, 1), n));
}

const Tensor& Encoder::output_embedding() const { return params_.get("embeddings.token"); }

Tensor Encoder::vocab_logits(const Tensor& hidden) const {
  if (!config_.mlm_head_transform) return mlm_logits(hidden, output_embedding());
  Tensor t = gelu(linear(hidden, "mlm_head.transform"));
  t = layer_norm(t, params_.get("mlm_head.norm.gain"), params_.get("mlm_head.norm.bias"));
  return add_row(mlm_logits(t, output_embedding()), params_.get("mlm_head.decoder.bias"));
}

}  // namespace perfect
