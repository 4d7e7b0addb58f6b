#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "perfect/encoder.hpp"
#include "perfect/masking.hpp"
#include "perfect/rng.hpp"
#include "perfect/tensor.hpp"

namespace perfect {

// Per-class verbalizer token sequences for cloze scoring.
struct VerbalizerMap {
  std::vector<std::string> class_names;
  std::vector<std::vector<TokenId>> tokens;

  std::size_t classes() const { return tokens.size(); }
  std::size_t max_length() const;
  std::size_t total_length() const;
  bool single_token() const { return max_length() == 1; }
  void validate(std::size_t vocab_size) const;

  // {class_name: [token, ...]} ordered by label_names. Every label needs an
  // entry and every token must already be in the vocabulary.
  static VerbalizerMap from_json(std::string_view json, const Vocab& vocab,
                                 std::span<const std::string> label_names);
  static VerbalizerMap load(const std::string& path, const Vocab& vocab, std::span<const std::string> label_names);
  std::string to_json(const Vocab& vocab) const;
};

// ------------------------------------------------------------------ Finetune

// softmax(W h_[CLS]) head, weights [K × H] and bias [K].
struct ClsHead {
  Tensor weight;
  Tensor bias;
  static ClsHead random(std::size_t classes, std::size_t hidden, double stddev, Rng& rng);
};

// Class logits from the hidden state at position 0 of every example, [B × K].
Tensor cls_finetune_logits(const Batch& batch, const Encoder& encoder, const ClsHead& head);
// Single-example form, a K-vector.
Tensor cls_finetune_logits(const MaskedExample& example, const Encoder& encoder, const ClsHead& head);

// ------------------------------------------------------------------ PET

// exp(W_v(y)·h) / Σ_v' exp(W_v'·h) at the single mask for each class's
// verbalizer token. Values are vocabulary probabilities, not renormalized over
// classes. Requires one mask and single-token verbalizers.
Tensor pet_single_token_prob(const MaskedExample& example, const VerbalizerMap& verbalizers,
                             const Encoder& encoder);

// Mean over examples of Σ_{k≠y} max(0, m − s_y + s_k), where
// s_k = Σ_{j<ℓ_k} log p(mask_j = verbalizer_k[j]). mask_logits holds the
// vocabulary logits of each example's M_max masks, ordered (example, slot).
Tensor pet_margin_loss(const Tensor& mask_logits, std::span<const std::size_t> labels,
                       const VerbalizerMap& verbalizers, double margin);
// Encoder forward plus pet_margin_loss for a batch built with M_max masks.
Tensor pet_multitoken_train_loss(const Batch& batch, const Encoder& encoder, const VerbalizerMap& verbalizers,
                                 double margin);

// Sentence tokens plus layout, so decoding can re-mask per candidate length.
struct ClozeInput {
  std::vector<TokenId> first;
  std::vector<TokenId> second;
  MaskPlacement placement = MaskPlacement::single_sentence_suffix;
  std::size_t max_seq = 64;
};

struct DecodeResult {
  std::size_t label = 0;
  std::size_t forward_passes = 0;
  std::vector<double> scores;  // accumulated log-probability per class
};

// For each class, trims the mask block to that class's verbalizer length and
// fills it one token per forward pass: every pass scores the class's token at
// each open mask, commits the most probable (ties → lower position), and adds
// its log-probability. The class with the highest total wins (ties → lower
// index). length_normalized divides each total by ℓ_k.
DecodeResult pet_autoregressive_decode(const ClozeInput& input, const VerbalizerMap& verbalizers,
                                       const Encoder& encoder, bool length_normalized = false);

// ------------------------------------------------------------------ soft prompts

struct SoftPrompt {
  Tensor weights;  // [T × H]

  std::size_t length() const { return weights.defined() ? weights.rows() : 0; }

  // Rows copied from the token embeddings of a random subset of the pool_size
  // most frequent corpus tokens (ids follow frequency rank after the
  // specials); the whole vocabulary when it is smaller.
  static SoftPrompt from_vocabulary(const Encoder& encoder, const Vocab& vocab, std::size_t length,
                                    std::size_t pool_size, Rng& rng);
};

inline constexpr std::size_t kDefaultPromptTokens = 20;
inline constexpr std::size_t kPromptPool = 5000;

// [P ; embeddings] at the embedding level: token_embeddings [len × H] becomes
// [(T + len) × H]. max_seq bounds the result.
Tensor soft_prompt_prepend(const Tensor& token_embeddings, const SoftPrompt& prompt, std::size_t max_seq);

}  // namespace perfect
