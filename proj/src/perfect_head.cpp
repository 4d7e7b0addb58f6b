#include "perfect/perfect_head.hpp"

#include <algorithm>
#include <limits>

#include "perfect/errors.hpp"

namespace perfect {

namespace {

constexpr std::size_t kEvalChunk = 64;

double squared_distance(const double* a, std::span<const double> b) {
  double d = 0.0;
  for (std::size_t j = 0; j < b.size(); ++j) d += (a[j] - b[j]) * (a[j] - b[j]);
  return d;
}

std::vector<std::size_t> per_slot_labels(std::span<const std::size_t> labels, std::size_t rows,
                                         std::size_t slots) {
  if (labels.empty()) throw ContractError("loss: empty batch");
  if (rows != labels.size() * slots) {
    throw DimensionError("loss: " + std::to_string(rows) + " mask rows for " + std::to_string(labels.size()) +
                         " examples of " + std::to_string(slots) + " slots");
  }
  std::vector<std::size_t> expanded;
  expanded.reserve(rows);
  for (auto y : labels) expanded.insert(expanded.end(), slots, y);
  return expanded;
}

}  // namespace

std::string_view to_string(InferenceMode mode) {
  switch (mode) {
    case InferenceMode::prototypical: return "prototypical";
    case InferenceMode::label_embedding: return "label_embedding";
    case InferenceMode::training_objective: return "training_objective";
  }
  return "unknown";
}

InferenceMode parse_inference_mode(std::string_view name) {
  for (auto m : {InferenceMode::prototypical, InferenceMode::label_embedding, InferenceMode::training_objective}) {
    if (to_string(m) == name) return m;
  }
  throw InputError("unknown inference mode '" + std::string(name) + "'");
}

std::string_view to_string(LossKind kind) { return kind == LossKind::hinge ? "hinge" : "cross_entropy"; }

LossKind parse_loss_kind(std::string_view name) {
  if (name == "hinge") return LossKind::hinge;
  if (name == "cross_entropy") return LossKind::cross_entropy;
  throw InputError("unknown loss '" + std::string(name) + "'");
}

LabelEmbedding LabelEmbedding::random(std::size_t classes, std::size_t slots, std::size_t hidden, double sigma,
                                      Rng& rng) {
  std::vector<double> values(classes * slots * hidden);
  for (auto& v : values) v = rng.normal(0.0, sigma);
  return {Tensor({classes, slots, hidden}, std::move(values), true), sigma};
}

LabelEmbedding LabelEmbedding::from_verbalizers(const Tensor& output_embedding,
                                                const std::vector<std::vector<TokenId>>& verbalizers,
                                                std::size_t slots) {
  const auto hidden = output_embedding.cols();
  std::vector<double> values;
  values.reserve(verbalizers.size() * slots * hidden);
  for (const auto& tokens : verbalizers) {
    if (tokens.empty()) throw ContractError("from_verbalizers: empty verbalizer");
    for (std::size_t i = 0; i < slots; ++i) {
      const auto id = tokens[std::min(i, tokens.size() - 1)];
      if (id >= output_embedding.rows()) throw InputError("from_verbalizers: token id out of range");
      const auto row = output_embedding.values().subspan(id * hidden, hidden);
      values.insert(values.end(), row.begin(), row.end());
    }
  }
  return {Tensor({verbalizers.size(), slots, hidden}, std::move(values), true), 0.0};
}

Tensor score_tokens(const Tensor& mask_hidden, const LabelEmbedding& labels) {
  return slot_scores(mask_hidden, labels.weights);
}

double hinge_loss(std::span<const double> scores, std::size_t label, double margin) {
  if (label >= scores.size()) throw ContractError("hinge_loss: label out of range");
  double total = 0.0;
  for (std::size_t k = 0; k < scores.size(); ++k) {
    if (k == label) continue;
    const double slack = margin - scores[label] + scores[k];
    if (!(slack <= 0.0)) total += slack;
  }
  return total / static_cast<double>(scores.size());
}

Tensor total_loss(const Tensor& mask_hidden, std::span<const std::size_t> labels, const LabelEmbedding& embedding,
                  double margin) {
  const auto targets = per_slot_labels(labels, mask_hidden.rows(), embedding.slots());
  return multiclass_hinge(score_tokens(mask_hidden, embedding), targets, margin, true);
}

Tensor cross_entropy_total_loss(const Tensor& mask_hidden, std::span<const std::size_t> labels,
                                const LabelEmbedding& embedding) {
  const auto targets = per_slot_labels(labels, mask_hidden.rows(), embedding.slots());
  return softmax_cross_entropy(score_tokens(mask_hidden, embedding), targets);
}

Tensor mask_hidden_states(const Encoder& encoder, const Batch& batch, const Tensor* prompt) {
  const auto hidden = encoder.encode(batch, prompt);
  const auto rows = batch.mask_rows(prompt ? prompt->rows() : 0);
  return gather_rows(hidden, rows);
}

std::vector<double> embed_masks(std::span<const MaskedExample> examples, const Encoder& encoder,
                                const Tensor* prompt) {
  NoGradGuard no_grad;
  std::vector<double> out;
  for (std::size_t start = 0; start < examples.size(); start += kEvalChunk) {
    const auto chunk = examples.subspan(start, std::min(kEvalChunk, examples.size() - start));
    const auto batch = build_batch(chunk, longest(chunk));
    const auto h = mask_hidden_states(encoder, batch, prompt);
    out.insert(out.end(), h.values().begin(), h.values().end());
  }
  return out;
}

PrototypeBank prototypes_from_embeddings(std::span<const double> mask_embeddings,
                                         std::span<const std::size_t> labels, std::size_t classes,
                                         std::size_t slots, std::size_t hidden) {
  if (mask_embeddings.size() != labels.size() * slots * hidden) {
    throw DimensionError("prototypes: embedding buffer does not match examples × slots × hidden");
  }
  PrototypeBank bank{slots, classes, hidden, std::vector<double>(slots * classes * hidden, 0.0),
                     std::vector<std::size_t>(classes, 0)};
  for (std::size_t n = 0; n < labels.size(); ++n) {
    const auto y = labels[n];
    if (y >= classes) throw ContractError("prototypes: label out of range");
    ++bank.counts[y];
    for (std::size_t i = 0; i < slots; ++i) {
      const double* h = mask_embeddings.data() + (n * slots + i) * hidden;
      double* c = bank.centroids.data() + (i * classes + y) * hidden;
      for (std::size_t d = 0; d < hidden; ++d) c[d] += h[d];
    }
  }
  for (std::size_t y = 0; y < classes; ++y) {
    if (bank.counts[y] == 0) {
      throw ContractError("prototypes: class " + std::to_string(y) + " has no training examples");
    }
    const double inv = 1.0 / static_cast<double>(bank.counts[y]);
    for (std::size_t i = 0; i < slots; ++i) {
      double* c = bank.centroids.data() + (i * classes + y) * hidden;
      for (std::size_t d = 0; d < hidden; ++d) c[d] *= inv;
    }
  }
  return bank;
}

PrototypeBank compute_prototypes(const Encoder& encoder, std::span<const MaskedExample> train,
                                 std::size_t classes, const Tensor* prompt) {
  if (train.empty()) throw ContractError("compute_prototypes: empty training set");
  std::vector<std::size_t> labels;
  for (const auto& ex : train) labels.push_back(ex.label);
  const auto embeddings = embed_masks(train, encoder, prompt);
  return prototypes_from_embeddings(embeddings, labels, classes, train.front().mask_positions.size(),
                                    encoder.config().hidden);
}

std::size_t nearest_prototype(std::span<const double> query_masks, const PrototypeBank& bank) {
  if (query_masks.size() != bank.slots * bank.hidden) {
    throw DimensionError("nearest_prototype: query has " + std::to_string(query_masks.size()) +
                         " values, bank expects " + std::to_string(bank.slots * bank.hidden));
  }
  std::size_t best = 0;
  double best_distance = std::numeric_limits<double>::infinity();
  for (std::size_t y = 0; y < bank.classes; ++y) {
    double closest = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < bank.slots; ++i) {
      closest = std::min(closest, squared_distance(query_masks.data() + i * bank.hidden, bank.centroid(i, y)));
    }
    if (closest < best_distance) {
      best_distance = closest;
      best = y;
    }
  }
  return best;
}

std::size_t nearest_label_embedding(std::span<const double> query_masks, const LabelEmbedding& labels) {
  const auto k = labels.classes(), m = labels.slots(), h = labels.hidden();
  PrototypeBank bank{m, k, h, std::vector<double>(m * k * h), std::vector<std::size_t>(k, 0)};
  const auto& lv = labels.weights.values();
  for (std::size_t y = 0; y < k; ++y) {
    for (std::size_t i = 0; i < m; ++i) {
      std::copy_n(lv.begin() + static_cast<std::ptrdiff_t>((y * m + i) * h), h,
                  bank.centroids.begin() + static_cast<std::ptrdiff_t>((i * k + y) * h));
    }
  }
  return nearest_prototype(query_masks, bank);
}

std::size_t best_mean_score(std::span<const double> query_masks, const LabelEmbedding& labels) {
  const auto k = labels.classes(), m = labels.slots(), h = labels.hidden();
  if (query_masks.size() != m * h) throw DimensionError("best_mean_score: query does not match label embedding");
  const auto& lv = labels.weights.values();
  std::size_t best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t y = 0; y < k; ++y) {
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t d = 0; d < h; ++d) total += lv[(y * m + i) * h + d] * query_masks[i * h + d];
    }
    const double score = total / static_cast<double>(m);
    if (score > best_score) {
      best_score = score;
      best = y;
    }
  }
  return best;
}

std::vector<std::size_t> classify_all(std::span<const MaskedExample> queries, const Encoder& encoder,
                                      InferenceMode mode, const LabelEmbedding& labels,
                                      const PrototypeBank* bank, const Tensor* prompt) {
  if (mode == InferenceMode::prototypical && !bank) throw ContractError("classify: prototypical mode needs a bank");
  const auto embeddings = embed_masks(queries, encoder, prompt);
  const auto per_query = embeddings.size() / std::max<std::size_t>(queries.size(), 1);
  std::vector<std::size_t> out;
  out.reserve(queries.size());
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const auto h = std::span(embeddings).subspan(q * per_query, per_query);
    switch (mode) {
      case InferenceMode::prototypical: out.push_back(nearest_prototype(h, *bank)); break;
      case InferenceMode::label_embedding: out.push_back(nearest_label_embedding(h, labels)); break;
      case InferenceMode::training_objective: out.push_back(best_mean_score(h, labels)); break;
    }
  }
  return out;
}

std::size_t classify_prototypical(const MaskedExample& query, const Encoder& encoder, const PrototypeBank& bank,
                                  const Tensor* prompt) {
  return nearest_prototype(embed_masks(std::span(&query, 1), encoder, prompt), bank);
}

std::size_t classify_label_embedding(const MaskedExample& query, const Encoder& encoder,
                                     const LabelEmbedding& labels, const Tensor* prompt) {
  return nearest_label_embedding(embed_masks(std::span(&query, 1), encoder, prompt), labels);
}

std::size_t classify_training_objective(const MaskedExample& query, const Encoder& encoder,
                                        const LabelEmbedding& labels, const Tensor* prompt) {
  return best_mean_score(embed_masks(std::span(&query, 1), encoder, prompt), labels);
}

}  // namespace perfect
