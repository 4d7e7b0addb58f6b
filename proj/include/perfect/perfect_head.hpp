#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "perfect/encoder.hpp"
#include "perfect/masking.hpp"
#include "perfect/rng.hpp"
#include "perfect/tensor.hpp"

namespace perfect {

// Trainable per-slot class embeddings, weights shaped [K × M × H]. Separate
// storage from the encoder's vocabulary table.
struct LabelEmbedding {
  Tensor weights;
  double init_sigma = 0.0;

  std::size_t classes() const { return weights.shape()[0]; }
  std::size_t slots() const { return weights.shape()[1]; }
  std::size_t hidden() const { return weights.shape()[2]; }

  // Entries drawn from Normal(0, sigma).
  static LabelEmbedding random(std::size_t classes, std::size_t slots, std::size_t hidden, double sigma,
                               Rng& rng);
  // Slot i of class k copies the output-embedding row of the class's i-th
  // verbalizer token (its last token for slots past the verbalizer length).
  static LabelEmbedding from_verbalizers(const Tensor& output_embedding,
                                         const std::vector<std::vector<TokenId>>& verbalizers,
                                         std::size_t slots);
};

// Per-slot class means of training mask embeddings, stored [M × K × H].
struct PrototypeBank {
  std::size_t slots = 0;
  std::size_t classes = 0;
  std::size_t hidden = 0;
  std::vector<double> centroids;
  std::vector<std::size_t> counts;

  std::span<const double> centroid(std::size_t slot, std::size_t label) const {
    return std::span(centroids).subspan((slot * classes + label) * hidden, hidden);
  }
};

enum class InferenceMode { prototypical, label_embedding, training_objective };
enum class LossKind { hinge, cross_entropy };

std::string_view to_string(InferenceMode mode);
InferenceMode parse_inference_mode(std::string_view name);
std::string_view to_string(LossKind kind);
LossKind parse_loss_kind(std::string_view name);

inline constexpr double kDefaultMargin = 1.0;
inline constexpr double kDefaultSigma = 1e-4;

// t_i = L_i · h_i for each slot; mask_hidden is [M × H] (or stacked
// [R·M × H]) and the result [M × K] (or [R·M × K]).
Tensor score_tokens(const Tensor& mask_hidden, const LabelEmbedding& labels);

// (1/K) Σ_{k≠y} max(0, m − t_y + t_k) for one slot.
double hinge_loss(std::span<const double> scores, std::size_t label, double margin);

// Mean of hinge_loss over every (example, slot); mask_hidden stacks the M
// mask rows of each example, labels has one entry per example.
Tensor total_loss(const Tensor& mask_hidden, std::span<const std::size_t> labels, const LabelEmbedding& embedding,
                  double margin);
// Same average with per-slot softmax cross-entropy instead of the hinge.
Tensor cross_entropy_total_loss(const Tensor& mask_hidden, std::span<const std::size_t> labels,
                                const LabelEmbedding& embedding);

// Hidden states of every mask, [batch.size · M × H], ordered (example, slot).
Tensor mask_hidden_states(const Encoder& encoder, const Batch& batch, const Tensor* prompt = nullptr);

// Means from already-computed mask embeddings ([N·M × H], ordered
// (example, slot)). Every class must be present.
PrototypeBank prototypes_from_embeddings(std::span<const double> mask_embeddings,
                                         std::span<const std::size_t> labels, std::size_t classes,
                                         std::size_t slots, std::size_t hidden);

// Runs the encoder without recording gradients over the training set.
PrototypeBank compute_prototypes(const Encoder& encoder, std::span<const MaskedExample> train,
                                 std::size_t classes, const Tensor* prompt = nullptr);

// argmax_y max_i exp(−‖h_i − c_iy‖²), evaluated as argmin_y min_i ‖h_i − c_iy‖².
// Lowest class index wins ties.
std::size_t nearest_prototype(std::span<const double> query_masks, const PrototypeBank& bank);
// Same rule with L[y][i] standing in for c_iy.
std::size_t nearest_label_embedding(std::span<const double> query_masks, const LabelEmbedding& labels);
// argmax_k of the slot-averaged scores t_ik; lowest index wins ties.
std::size_t best_mean_score(std::span<const double> query_masks, const LabelEmbedding& labels);

std::size_t classify_prototypical(const MaskedExample& query, const Encoder& encoder, const PrototypeBank& bank,
                                  const Tensor* prompt = nullptr);
std::size_t classify_label_embedding(const MaskedExample& query, const Encoder& encoder,
                                     const LabelEmbedding& labels, const Tensor* prompt = nullptr);
std::size_t classify_training_objective(const MaskedExample& query, const Encoder& encoder,
                                        const LabelEmbedding& labels, const Tensor* prompt = nullptr);

// Batched inference: one encoder pass per query, chunked.
std::vector<std::size_t> classify_all(std::span<const MaskedExample> queries, const Encoder& encoder,
                                      InferenceMode mode, const LabelEmbedding& labels,
                                      const PrototypeBank* bank, const Tensor* prompt = nullptr);

// Mask embeddings for a set of examples in eval mode, [N·M × H] flattened.
std::vector<double> embed_masks(std::span<const MaskedExample> examples, const Encoder& encoder,
                                const Tensor* prompt = nullptr);

}  // namespace perfect
