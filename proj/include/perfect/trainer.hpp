#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "perfect/baselines.hpp"
#include "perfect/encoder.hpp"
#include "perfect/masking.hpp"
#include "perfect/perfect_head.hpp"

namespace perfect {

// Systems that can be trained and compared.
enum class Method {
  perfect,              // adapters + layer norms + random label embedding
  perfect_init,         // as perfect, label embedding copied from verbalizer rows
  finetune,             // everything + CLS head
  pet,                  // everything, toy pattern + verbalizers
  pattern_free_pet,     // adapters + layer norms, verbalizers, no pattern
  bitfit_mte,           // biases + label embedding
  prompt_mte,           // soft prompt + label embedding
  perfect_no_adapters,  // everything + label embedding
};

// Which tensors a method trains.
enum class PolicyKind { perfect, finetune, pet, bitfit_mte, prompt_mte, pattern_free_pet, perfect_no_adapters };

std::string_view to_string(Method method);
Method parse_method(std::string_view name);
std::string_view to_string(PolicyKind policy);
PolicyKind parse_policy(std::string_view name);
PolicyKind policy_for(Method method);
bool uses_adapters(Method method);
bool uses_label_embedding(Method method);
bool uses_verbalizers(Method method);

struct TrainConfig {
  std::size_t steps = 600;
  std::size_t batch_size = 32;
  std::size_t checkpoint_every = 50;
  double margin = kDefaultMargin;
  std::uint64_t seed = 0;
  double lr_backbone = 1e-4;
  double lr_label_embedding = 1e-2;
  double lr_prompt = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  LossKind loss = LossKind::hinge;
  InferenceMode inference = InferenceMode::prototypical;
  bool length_normalized = false;

  void validate() const;
};

struct ModelConfig {
  Method method = Method::perfect;
  EncoderConfig encoder;
  AdapterConfig adapter;
  std::size_t masks = 2;
  // single_sentence_suffix for single-sentence tasks; pair tasks default to
  // pair_between.
  std::optional<MaskPlacement> placement;
  double sigma = kDefaultSigma;
  std::size_t prompt_tokens = kDefaultPromptTokens;
  // Cloze pattern words placed before the mask block (PET only).
  std::vector<std::string> pattern = {"it", "was"};

  // The encoder configuration the method actually builds (adapters on/off).
  EncoderConfig effective_encoder() const;
};

// Method defaults for learning rates: 1e-5 for fully fine-tuned baselines,
// 1e-4 for adapter/bias/prompt backbones.
TrainConfig default_train_config(Method method);

// Everything the model needs from the task.
struct TaskInfo {
  std::size_t classes = 2;
  bool pair = false;
  std::vector<std::string> label_names;
  // Required for pet, pattern_free_pet and perfect_init.
  std::optional<VerbalizerMap> verbalizers;
};

struct PreparedExample {
  MaskedExample input;  // what training and one-pass inference consume
  ClozeInput cloze;     // raw layout for autoregressive decoding
};

class Model {
 public:
  Model(const ModelConfig& config, const TaskInfo& task, const Vocab& vocab, std::uint64_t seed);

  Method method() const { return config_.method; }
  const ModelConfig& config() const { return config_; }
  const TaskInfo& task() const { return task_; }
  MaskPlacement placement() const;
  std::size_t slots() const;

  Encoder& encoder() { return encoder_; }
  const Encoder& encoder() const { return encoder_; }
  ParameterStore& heads() { return heads_; }
  const ParameterStore& heads() const { return heads_; }

  // Encoder tensors followed by head tensors.
  std::vector<NamedTensor> parameters() const;
  std::size_t parameter_count() const;

  LabelEmbedding label_embedding() const;
  ClsHead cls_head() const;
  const Tensor* prompt() const;

  PreparedExample prepare(const LabeledText& text, const Vocab& vocab) const;

  // Training objective on a batch.
  Tensor loss(std::span<const PreparedExample> batch, const TrainConfig& config) const;

  // Predicted labels; prototypical inference builds its bank from train
  // unless one is supplied.
  std::vector<std::size_t> predict(std::span<const PreparedExample> queries, std::span<const PreparedExample> train,
                                   const TrainConfig& config, const PrototypeBank* bank = nullptr) const;

 private:
  ModelConfig config_;
  TaskInfo task_;
  Encoder encoder_;
  ParameterStore heads_;
  std::vector<TokenId> pattern_ids_;
};

// Marks the policy's tensors trainable and freezes the rest; returns the
// trainable names.
std::set<std::string> freeze_mask(Model& model, PolicyKind policy);
std::set<std::string> trainable_names(const Model& model, PolicyKind policy);

struct ParamCount {
  std::size_t trainable = 0;
  std::size_t total = 0;           // every tensor of the model as built
  std::size_t backbone_total = 0;  // encoder without adapters or task heads
  std::map<std::string, std::size_t> breakdown;  // trainable elements per component

  double trainable_percent() const;
  double trainable_percent_of_backbone() const;
};

// Closed form from the configuration alone.
ParamCount count_trainable_params(const ModelConfig& config, std::size_t classes);
// Element count of the tensors currently marked trainable.
ParamCount registry_count(const Model& model);
// Closed form, verified against the live registry; a mismatch throws.
ParamCount count_trainable_params(const Model& model);

std::string parameter_component(std::string_view name);

// Decoupled-weight-decay Adam over the currently trainable tensors. Learning
// rate per tensor: label_embedding, soft_prompt and everything else
// (backbone) have separate rates.
class AdamW {
 public:
  AdamW(std::vector<NamedTensor> params, const TrainConfig& config);

  void step();
  void zero_grad();
  double lr_for(std::string_view name) const;
  const std::vector<NamedTensor>& params() const { return params_; }

 private:
  std::vector<NamedTensor> params_;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
  TrainConfig config_;
  std::size_t t_ = 0;
};

// Forward, backward, AdamW step on the trainable set, then zeroed grads.
// A non-finite loss raises NumericError naming the step and learning rates.
double train_step(Model& model, std::span<const PreparedExample> batch, AdamW& optimizer, const TrainConfig& config,
                  std::size_t step = 0);

struct CheckpointRecord {
  std::size_t step = 0;
  double val_accuracy = 0.0;
  double train_loss = 0.0;
};

// Step with the highest validation accuracy, earliest on ties.
std::size_t select_checkpoint(std::span<const CheckpointRecord> history);

struct TrainResult {
  std::vector<CheckpointRecord> history;
  std::vector<double> losses;
  std::size_t selected_step = 0;
  double mean_step_seconds = 0.0;
  std::set<std::string> trainable;
};

// Runs config.steps optimizer steps, evaluating validation accuracy every
// checkpoint_every steps (and at the last step), then restores the trainable
// tensors of the selected checkpoint.
TrainResult fit(Model& model, std::span<const PreparedExample> train, std::span<const PreparedExample> val,
                const TrainConfig& config);

double accuracy(std::span<const std::size_t> predictions, std::span<const PreparedExample> gold);

}  // namespace perfect
