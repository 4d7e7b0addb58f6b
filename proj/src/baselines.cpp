#include "perfect/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "perfect/errors.hpp"

namespace perfect {

// ------------------------------------------------------------------ VerbalizerMap

std::size_t VerbalizerMap::max_length() const {
  std::size_t n = 0;
  for (const auto& t : tokens) n = std::max(n, t.size());
  return n;
}

std::size_t VerbalizerMap::total_length() const {
  std::size_t n = 0;
  for (const auto& t : tokens) n += t.size();
  return n;
}

void VerbalizerMap::validate(std::size_t vocab_size) const {
  if (tokens.empty()) throw ContractError("verbalizers: empty map");
  for (std::size_t k = 0; k < tokens.size(); ++k) {
    if (tokens[k].empty()) throw ContractError("verbalizers: class " + std::to_string(k) + " has no tokens");
    for (auto id : tokens[k]) {
      if (id >= vocab_size) throw InputError("verbalizers: token id " + std::to_string(id) + " outside vocabulary");
    }
  }
}

VerbalizerMap VerbalizerMap::from_json(std::string_view json, const Vocab& vocab,
                                       std::span<const std::string> label_names) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(json);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("verbalizers: ") + e.what());
  }
  if (!doc.is_object()) throw InputError("verbalizers: expected an object of class name to token list");
  VerbalizerMap map;
  for (const auto& name : label_names) {
    if (!doc.contains(name)) throw InputError("verbalizers: no entry for class '" + name + "'");
    std::vector<TokenId> ids;
    for (const auto& tok : doc.at(name)) {
      const auto word = tok.get<std::string>();
      const auto id = vocab.find(word);
      if (!id) throw InputError("verbalizers: token '" + word + "' is not in the vocabulary");
      ids.push_back(*id);
    }
    map.class_names.push_back(name);
    map.tokens.push_back(std::move(ids));
  }
  map.validate(vocab.size());
  return map;
}

VerbalizerMap VerbalizerMap::load(const std::string& path, const Vocab& vocab,
                                  std::span<const std::string> label_names) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open verbalizer file '" + path + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return from_json(buffer.str(), vocab, label_names);
}

std::string VerbalizerMap::to_json(const Vocab& vocab) const {
  nlohmann::ordered_json doc = nlohmann::ordered_json::object();
  for (std::size_t k = 0; k < tokens.size(); ++k) {
    auto& list = doc[class_names.at(k)] = nlohmann::ordered_json::array();
    for (auto id : tokens[k]) list.push_back(vocab.token(id));
  }
  return doc.dump();
}

// ------------------------------------------------------------------ Finetune

ClsHead ClsHead::random(std::size_t classes, std::size_t hidden, double stddev, Rng& rng) {
  std::vector<double> w(classes * hidden);
  for (auto& v : w) v = rng.normal(0.0, stddev);
  return {Tensor({classes, hidden}, std::move(w), true), Tensor::zeros({classes}, true)};
}

Tensor cls_finetune_logits(const Batch& batch, const Encoder& encoder, const ClsHead& head) {
  const auto hidden = encoder.encode(batch);
  std::vector<std::size_t> cls_rows(batch.size);
  for (std::size_t b = 0; b < batch.size; ++b) cls_rows[b] = b * batch.seq;
  return add_row(matmul_nt(gather_rows(hidden, cls_rows), head.weight), head.bias);
}

Tensor cls_finetune_logits(const MaskedExample& example, const Encoder& encoder, const ClsHead& head) {
  const auto batch = build_batch(std::span(&example, 1), example.ids.size());
  return reshape(cls_finetune_logits(batch, encoder, head), {head.weight.rows()});
}

// ------------------------------------------------------------------ PET

namespace {

double row_log_softmax_at(std::span<const double> row, std::size_t index) {
  double hi = -std::numeric_limits<double>::infinity();
  for (double v : row) hi = std::max(hi, v);
  double total = 0.0;
  for (double v : row) total += std::exp(v - hi);
  return row[index] - hi - std::log(total);
}

}  // namespace

Tensor pet_single_token_prob(const MaskedExample& example, const VerbalizerMap& verbalizers,
                             const Encoder& encoder) {
  if (!verbalizers.single_token()) {
    throw ContractError("pet_single_token_prob: multi-token verbalizers need the multi-token path");
  }
  if (example.mask_positions.size() != 1) throw ContractError("pet_single_token_prob: expected exactly one mask");
  const auto batch = build_batch(std::span(&example, 1), example.ids.size());
  const auto hidden = encoder.encode(batch);
  const std::size_t rows[] = {example.mask_positions[0]};
  const auto probs = softmax_rows(encoder.vocab_logits(gather_rows(hidden, rows)));
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> picks;
  for (const auto& t : verbalizers.tokens) picks.push_back({{0, t[0]}});
  return pick_sum(probs, picks);
}

Tensor pet_margin_loss(const Tensor& mask_logits, std::span<const std::size_t> labels,
                       const VerbalizerMap& verbalizers, double margin) {
  if (labels.empty()) throw ContractError("pet loss: empty batch");
  const auto slots = verbalizers.max_length();
  if (mask_logits.rows() != labels.size() * slots) {
    throw DimensionError("pet loss: " + std::to_string(mask_logits.rows()) + " mask rows for " +
                         std::to_string(labels.size()) + " examples with " + std::to_string(slots) + " masks");
  }
  const auto logp = log_softmax_rows(mask_logits);
  const auto k_count = verbalizers.classes();
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> groups;
  groups.reserve(labels.size() * k_count);
  for (std::size_t b = 0; b < labels.size(); ++b) {
    for (std::size_t k = 0; k < k_count; ++k) {
      std::vector<std::pair<std::size_t, std::size_t>> g;
      for (std::size_t j = 0; j < verbalizers.tokens[k].size(); ++j) g.emplace_back(b * slots + j, verbalizers.tokens[k][j]);
      groups.push_back(std::move(g));
    }
  }
  const auto class_scores = reshape(pick_sum(logp, groups), {labels.size(), k_count});
  return multiclass_hinge(class_scores, labels, margin, false);
}

Tensor pet_multitoken_train_loss(const Batch& batch, const Encoder& encoder, const VerbalizerMap& verbalizers,
                                 double margin) {
  if (batch.masks != verbalizers.max_length()) {
    throw ContractError("pet loss: batch has " + std::to_string(batch.masks) + " masks, verbalizers need " +
                        std::to_string(verbalizers.max_length()));
  }
  const auto hidden = encoder.encode(batch);
  const auto logits = encoder.vocab_logits(gather_rows(hidden, batch.mask_rows()));
  return pet_margin_loss(logits, batch.labels, verbalizers, margin);
}

DecodeResult pet_autoregressive_decode(const ClozeInput& input, const VerbalizerMap& verbalizers,
                                       const Encoder& encoder, bool length_normalized) {
  NoGradGuard no_grad;
  DecodeResult result;
  result.scores.assign(verbalizers.classes(), 0.0);
  for (std::size_t k = 0; k < verbalizers.classes(); ++k) {
    const auto& target = verbalizers.tokens[k];
    auto ex = insert_masks(input.first, input.second, {input.placement, target.size()}, input.max_seq);
    std::vector<bool> open(target.size(), true);
    double total = 0.0;
    for (std::size_t step = 0; step < target.size(); ++step) {
      const auto batch = build_batch(std::span(&ex, 1), ex.ids.size());
      const auto hidden = encoder.encode(batch);
      ++result.forward_passes;
      const auto logits = encoder.vocab_logits(gather_rows(hidden, ex.mask_positions));
      const auto vocab = logits.cols();
      std::size_t best_slot = 0;
      double best = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < target.size(); ++j) {
        if (!open[j]) continue;
        const double lp = row_log_softmax_at(logits.values().subspan(j * vocab, vocab), target[j]);
        if (lp > best) {
          best = lp;
          best_slot = j;
        }
      }
      open[best_slot] = false;
      ex.ids[ex.mask_positions[best_slot]] = target[best_slot];
      total += best;
    }
    result.scores[k] = length_normalized ? total / static_cast<double>(target.size()) : total;
  }
  result.label = static_cast<std::size_t>(
      std::max_element(result.scores.begin(), result.scores.end()) - result.scores.begin());
  return result;
}

// ------------------------------------------------------------------ soft prompts

SoftPrompt SoftPrompt::from_vocabulary(const Encoder& encoder, const Vocab& vocab, std::size_t length,
                                       std::size_t pool_size, Rng& rng) {
  const auto& table = encoder.output_embedding();
  const auto hidden = table.cols();
  const auto corpus_tokens = std::min(vocab.size(), table.rows()) - Vocab::kSpecialCount;
  const auto pool = std::min(pool_size, corpus_tokens);
  if (pool == 0) throw ContractError("soft prompt: vocabulary has no corpus tokens");
  std::vector<std::size_t> candidates(pool);
  std::iota(candidates.begin(), candidates.end(), Vocab::kSpecialCount);
  rng.shuffle(std::span(candidates));
  std::vector<double> values;
  values.reserve(length * hidden);
  for (std::size_t t = 0; t < length; ++t) {
    // Draw without replacement while the pool lasts.
    const auto id = t < pool ? candidates[t] : candidates[rng.below(pool)];
    const auto row = table.values().subspan(id * hidden, hidden);
    values.insert(values.end(), row.begin(), row.end());
  }
  return {Tensor({length, hidden}, std::move(values), true)};
}

Tensor soft_prompt_prepend(const Tensor& token_embeddings, const SoftPrompt& prompt, std::size_t max_seq) {
  if (prompt.length() == 0) return token_embeddings;
  if (prompt.length() + token_embeddings.rows() > max_seq) {
    throw ContractError("soft prompt: " + std::to_string(prompt.length()) + " prompt rows + " +
                        std::to_string(token_embeddings.rows()) + " tokens exceed " + std::to_string(max_seq));
  }
  return concat_rows(prompt.weights, token_embeddings);
}

}  // namespace perfect
