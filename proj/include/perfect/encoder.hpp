#pragma once

#include <atomic>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "perfect/masking.hpp"
#include "perfect/parameters.hpp"
#include "perfect/rng.hpp"
#include "perfect/tensor.hpp"

namespace perfect {

struct AdapterConfig {
  std::size_t bottleneck = 16;
  // Standard deviation of the down-projection initialization.
  double init_scale = 1e-2;
  // Zero up-projection makes a fresh adapter the identity map.
  bool up_projection_zero_init = true;
};

enum class AdapterPlacement { after_ffn_only, after_attn_and_ffn };

std::string_view to_string(AdapterPlacement placement);
AdapterPlacement parse_adapter_placement(std::string_view name);

struct EncoderConfig {
  std::size_t vocab_size = 512;
  std::size_t hidden = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ffn_mult = 4;
  std::size_t max_seq = 64;
  // Segment embedding rows; two-segment mask layouts need 2.
  std::size_t type_vocab = 2;
  // Dense + GeLU + layer norm before the tied vocabulary projection, plus a
  // decoder bias (the RoBERTa MLM head). Off for the toy encoder.
  bool mlm_head_transform = false;
  std::optional<AdapterConfig> adapter;
  AdapterPlacement adapter_placement = AdapterPlacement::after_ffn_only;
  // Standard deviation for weight matrices; 0 selects 1/√fan_in.
  double init_std = 0.0;
  std::uint64_t init_seed = 20220101;

  std::size_t ffn_inner() const { return ffn_mult * hidden; }
  std::size_t adapters_per_layer() const {
    if (!adapter) return 0;
    return adapter_placement == AdapterPlacement::after_ffn_only ? 1 : 2;
  }
  void validate() const;
};

// Closed-form parameter counts per component for a configuration.
struct EncoderParamCounts {
  std::size_t embeddings = 0;       // token + position + segment tables
  std::size_t embedding_norm = 0;
  std::size_t attention = 0;        // all layers
  std::size_t ffn = 0;
  std::size_t layer_norms = 0;      // two per layer
  std::size_t adapters = 0;
  std::size_t mlm_head = 0;

  std::size_t backbone() const { return embeddings + embedding_norm + attention + ffn + layer_norms + mlm_head; }
  std::size_t total() const { return backbone() + adapters; }
};

EncoderParamCounts count_encoder_params(const EncoderConfig& config);

struct AdapterWeights {
  Tensor down_weight;  // H × B
  Tensor down_bias;    // B
  Tensor up_weight;    // B × H
  Tensor up_bias;      // H
};

// A(x) = U(GeLU(D(x))) + x, applied row-wise to x [rows × H].
Tensor apply_adapter(const Tensor& x, const AdapterWeights& adapter);

// Vocabulary scores h · Wᵀ for hidden states h [rows × H] and output
// embedding W [V × H].
Tensor mlm_logits(const Tensor& hidden, const Tensor& output_embedding);

// Post-norm transformer MLM encoder. Each layer computes
//   x = LN(x + Adapter_attn(Attention(x)))
//   x = LN(x + Adapter_ffn(FFN(x)))
// with either adapter absent according to the configuration. The MLM output
// embedding is tied to the token embedding table.
class Encoder {
 public:
  explicit Encoder(EncoderConfig config);
  Encoder(const Encoder& other);
  Encoder(Encoder&& other) noexcept;
  Encoder& operator=(const Encoder&) = delete;
  Encoder& operator=(Encoder&&) = delete;

  const EncoderConfig& config() const { return config_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  // Hidden states for a padded batch, [batch.size · (T + batch.seq) × H]
  // where T is the number of prompt rows (0 without a prompt). Each example's
  // rows are [prompt ; tokens].
  Tensor encode(const Batch& batch, const Tensor* prompt = nullptr) const;

  // Single unpadded sequence, [len × H]. Ids must be < vocab_size; inputs
  // longer than max_seq are cut to max_seq and a note is appended to warnings.
  Tensor encode(std::span<const TokenId> tokens, std::vector<std::string>* warnings = nullptr) const;

  // Token embedding table, shared with the MLM output projection.
  const Tensor& output_embedding() const;
  // Full MLM head on hidden rows: optional transform, tied projection, bias.
  Tensor vocab_logits(const Tensor& hidden) const;

  std::optional<AdapterWeights> adapter(std::size_t layer, std::string_view site) const;

  // Redraws adapter down-projections (and up-projections unless zero-init).
  void reinitialize_adapters(Rng& rng);

  // Number of sequences pushed through the encoder since the last reset.
  std::size_t forward_passes() const { return passes_.load(std::memory_order_relaxed); }
  void reset_forward_passes() const { passes_.store(0, std::memory_order_relaxed); }

 private:
  void init_parameters();
  Tensor embed(const Batch& batch, const Tensor* prompt) const;
  Tensor linear(const Tensor& x, const std::string& prefix) const;

  EncoderConfig config_;
  ParameterStore params_;
  mutable std::atomic<std::size_t> passes_{0};
};

std::string layer_prefix(std::size_t layer);

}  // namespace perfect
