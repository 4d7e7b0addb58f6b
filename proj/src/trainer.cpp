#include "perfect/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

#include "perfect/errors.hpp"

namespace perfect {

namespace {

constexpr std::uint64_t kAdapterStream = 1;
constexpr std::uint64_t kLabelStream = 2;
constexpr std::uint64_t kPromptStream = 3;
constexpr std::uint64_t kHeadStream = 4;
constexpr std::uint64_t kBatchStream = 5;

constexpr std::size_t kEvalChunk = 64;

struct MethodName {
  Method method;
  std::string_view name;
};

constexpr MethodName kMethods[] = {
    {Method::perfect, "perfect"},
    {Method::perfect_init, "perfect_init"},
    {Method::finetune, "finetune"},
    {Method::pet, "pet"},
    {Method::pattern_free_pet, "pattern_free_pet"},
    {Method::bitfit_mte, "bitfit_mte"},
    {Method::prompt_mte, "prompt_mte"},
    {Method::perfect_no_adapters, "perfect_no_adapters"},
};

struct PolicyName {
  PolicyKind policy;
  std::string_view name;
};

constexpr PolicyName kPolicies[] = {
    {PolicyKind::perfect, "perfect"},
    {PolicyKind::finetune, "finetune"},
    {PolicyKind::pet, "pet"},
    {PolicyKind::bitfit_mte, "bitfit_mte"},
    {PolicyKind::prompt_mte, "prompt_mte"},
    {PolicyKind::pattern_free_pet, "pattern_free_pet"},
    {PolicyKind::perfect_no_adapters, "perfect_no_adapters"},
};

bool is_layer_norm(std::string_view name) { return name.find("norm.") != std::string_view::npos; }
bool is_adapter(std::string_view name) { return name.find("adapter.") != std::string_view::npos; }
bool is_bias(std::string_view name) { return name.ends_with(".bias"); }
bool is_encoder_tensor(std::string_view name) {
  return name != "label_embedding" && name != "soft_prompt" && !name.starts_with("cls_head.");
}

std::size_t argmax_row(std::span<const double> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

}  // namespace

std::string_view to_string(Method method) {
  for (const auto& m : kMethods) {
    if (m.method == method) return m.name;
  }
  return "unknown";
}

Method parse_method(std::string_view name) {
  for (const auto& m : kMethods) {
    if (m.name == name) return m.method;
  }
  throw InputError("unknown method '" + std::string(name) + "'");
}

std::string_view to_string(PolicyKind policy) {
  for (const auto& p : kPolicies) {
    if (p.policy == policy) return p.name;
  }
  return "unknown";
}

PolicyKind parse_policy(std::string_view name) {
  for (const auto& p : kPolicies) {
    if (p.name == name) return p.policy;
  }
  throw ContractError("unknown training policy '" + std::string(name) + "'");
}

PolicyKind policy_for(Method method) {
  switch (method) {
    case Method::perfect:
    case Method::perfect_init: return PolicyKind::perfect;
    case Method::finetune: return PolicyKind::finetune;
    case Method::pet: return PolicyKind::pet;
    case Method::pattern_free_pet: return PolicyKind::pattern_free_pet;
    case Method::bitfit_mte: return PolicyKind::bitfit_mte;
    case Method::prompt_mte: return PolicyKind::prompt_mte;
    case Method::perfect_no_adapters: return PolicyKind::perfect_no_adapters;
  }
  throw ContractError("unknown method");
}

bool uses_adapters(Method method) {
  return method == Method::perfect || method == Method::perfect_init || method == Method::pattern_free_pet;
}

bool uses_label_embedding(Method method) {
  return method != Method::finetune && method != Method::pet && method != Method::pattern_free_pet;
}

bool uses_verbalizers(Method method) {
  return method == Method::pet || method == Method::pattern_free_pet || method == Method::perfect_init;
}

void TrainConfig::validate() const {
  if (steps == 0) throw InputError("train: steps must be at least 1");
  if (batch_size == 0) throw InputError("train: batch_size must be at least 1");
  if (checkpoint_every == 0) throw InputError("train: checkpoint_every must be at least 1");
  if (margin <= 0.0) throw InputError("train: margin must be positive");
}

TrainConfig default_train_config(Method method) {
  TrainConfig config;
  if (method == Method::finetune || method == Method::pet || method == Method::perfect_no_adapters) {
    config.lr_backbone = 1e-5;
  }
  return config;
}

EncoderConfig ModelConfig::effective_encoder() const {
  EncoderConfig out = encoder;
  if (uses_adapters(method)) {
    out.adapter = adapter;
  } else {
    out.adapter.reset();
  }
  return out;
}

// ------------------------------------------------------------------ Model

Model::Model(const ModelConfig& config, const TaskInfo& task, const Vocab& vocab, std::uint64_t seed)
    : config_(config), task_(task), encoder_(config.effective_encoder()) {
  if (config_.encoder.vocab_size < vocab.size()) {
    throw InputError("model: encoder vocab_size " + std::to_string(config_.encoder.vocab_size) +
                     " smaller than vocabulary of " + std::to_string(vocab.size()));
  }
  if (task_.classes < 2) throw InputError("model: need at least two classes");
  if (uses_verbalizers(config_.method)) {
    if (!task_.verbalizers) throw InputError("model: method " + std::string(to_string(config_.method)) + " needs verbalizers");
    task_.verbalizers->validate(config_.encoder.vocab_size);
    if (task_.verbalizers->classes() != task_.classes) throw InputError("model: verbalizer map does not cover every class");
  }
  if (config_.masks == 0) throw InputError("model: masks must be at least 1");
  (void)placement();

  Rng adapter_rng(Rng::mix(seed, kAdapterStream));
  encoder_.reinitialize_adapters(adapter_rng);
  const auto hidden = config_.encoder.hidden;

  if (uses_label_embedding(config_.method)) {
    LabelEmbedding labels;
    if (config_.method == Method::perfect_init) {
      labels = LabelEmbedding::from_verbalizers(encoder_.output_embedding(), task_.verbalizers->tokens, config_.masks);
    } else {
      Rng rng(Rng::mix(seed, kLabelStream));
      labels = LabelEmbedding::random(task_.classes, config_.masks, hidden, config_.sigma, rng);
    }
    heads_.add("label_embedding", labels.weights);
  }
  if (config_.method == Method::prompt_mte) {
    Rng rng(Rng::mix(seed, kPromptStream));
    heads_.add("soft_prompt", SoftPrompt::from_vocabulary(encoder_, vocab, config_.prompt_tokens, kPromptPool, rng).weights);
  }
  if (config_.method == Method::finetune) {
    Rng rng(Rng::mix(seed, kHeadStream));
    auto head = ClsHead::random(task_.classes, hidden, 1.0 / std::sqrt(static_cast<double>(hidden)), rng);
    heads_.add("cls_head.weight", head.weight);
    heads_.add("cls_head.bias", head.bias);
  }
  if (config_.method == Method::pet) {
    for (const auto& word : config_.pattern) {
      const auto id = vocab.find(word);
      if (!id) throw InputError("model: pattern word '" + word + "' is not in the vocabulary");
      pattern_ids_.push_back(*id);
    }
  }
}

MaskPlacement Model::placement() const {
  if (!task_.pair) {
    if (config_.placement && *config_.placement != MaskPlacement::single_sentence_suffix) {
      throw InputError("model: pair mask placement requested for a single-sentence task");
    }
    return MaskPlacement::single_sentence_suffix;
  }
  const auto p = config_.placement.value_or(MaskPlacement::pair_between);
  if (p == MaskPlacement::single_sentence_suffix) {
    throw InputError("model: single_sentence_suffix placement requested for a sentence-pair task");
  }
  return p;
}

std::size_t Model::slots() const {
  if (config_.method == Method::pet || config_.method == Method::pattern_free_pet) {
    return task_.verbalizers->max_length();
  }
  return config_.masks;
}

std::vector<NamedTensor> Model::parameters() const {
  std::vector<NamedTensor> out = encoder_.params().items();
  out.insert(out.end(), heads_.items().begin(), heads_.items().end());
  return out;
}

std::size_t Model::parameter_count() const { return encoder_.params().element_count() + heads_.element_count(); }

LabelEmbedding Model::label_embedding() const { return {heads_.get("label_embedding"), config_.sigma}; }

ClsHead Model::cls_head() const { return {heads_.get("cls_head.weight"), heads_.get("cls_head.bias")}; }

const Tensor* Model::prompt() const { return heads_.contains("soft_prompt") ? &heads_.get("soft_prompt") : nullptr; }

PreparedExample Model::prepare(const LabeledText& text, const Vocab& vocab) const {
  PreparedExample out;
  auto first = tokenize(text.text_a, vocab);
  auto second = tokenize(text.text_b, vocab);
  const auto layout = placement();
  if (config_.method == Method::finetune) {
    out.input = plain_input(first, second, config_.encoder.max_seq, text.label);
  } else {
    if (config_.method == Method::pet) {
      const bool after_second =
          layout == MaskPlacement::pair_suffix || layout == MaskPlacement::pair_two_segment_suffix;
      auto& host = after_second ? second : first;
      host.insert(host.end(), pattern_ids_.begin(), pattern_ids_.end());
    }
    const auto prompt_rows = config_.method == Method::prompt_mte ? config_.prompt_tokens : 0;
    if (prompt_rows >= config_.encoder.max_seq) throw InputError("model: soft prompt longer than max_seq");
    const auto budget = config_.encoder.max_seq - prompt_rows;
    out.input = insert_masks(first, second, {layout, slots()}, budget, text.label);
    out.cloze = {std::move(first), std::move(second), layout, budget};
  }
  out.input.raw = text.text_b.empty() ? text.text_a : text.text_a + " ||| " + text.text_b;
  return out;
}

namespace {

std::vector<MaskedExample> inputs_of(std::span<const PreparedExample> batch) {
  std::vector<MaskedExample> out;
  out.reserve(batch.size());
  for (const auto& ex : batch) out.push_back(ex.input);
  return out;
}

}  // namespace

Tensor Model::loss(std::span<const PreparedExample> batch, const TrainConfig& config) const {
  if (batch.empty()) throw ContractError("loss: empty batch");
  const auto inputs = inputs_of(batch);
  const auto packed = build_batch(inputs, longest(inputs));
  switch (config_.method) {
    case Method::finetune:
      return softmax_cross_entropy(cls_finetune_logits(packed, encoder_, cls_head()), packed.labels);
    case Method::pet:
    case Method::pattern_free_pet:
      return pet_multitoken_train_loss(packed, encoder_, *task_.verbalizers, config.margin);
    default: {
      const auto h = mask_hidden_states(encoder_, packed, prompt());
      if (config.loss == LossKind::cross_entropy) return cross_entropy_total_loss(h, packed.labels, label_embedding());
      return total_loss(h, packed.labels, label_embedding(), config.margin);
    }
  }
}

std::vector<std::size_t> Model::predict(std::span<const PreparedExample> queries,
                                        std::span<const PreparedExample> train, const TrainConfig& config,
                                        const PrototypeBank* bank) const {
  std::vector<std::size_t> out;
  out.reserve(queries.size());
  switch (config_.method) {
    case Method::finetune: {
      NoGradGuard no_grad;
      for (std::size_t start = 0; start < queries.size(); start += kEvalChunk) {
        const auto chunk = inputs_of(queries.subspan(start, std::min(kEvalChunk, queries.size() - start)));
        const auto logits = cls_finetune_logits(build_batch(chunk, longest(chunk)), encoder_, cls_head());
        for (std::size_t r = 0; r < chunk.size(); ++r) out.push_back(argmax_row(logits.values().subspan(r * task_.classes, task_.classes)));
      }
      return out;
    }
    case Method::pet:
    case Method::pattern_free_pet:
      for (const auto& q : queries) {
        out.push_back(pet_autoregressive_decode(q.cloze, *task_.verbalizers, encoder_, config.length_normalized).label);
      }
      return out;
    default: {
      const auto inputs = inputs_of(queries);
      std::optional<PrototypeBank> own;
      if (config.inference == InferenceMode::prototypical && !bank) {
        own = compute_prototypes(encoder_, inputs_of(train), task_.classes, prompt());
        bank = &*own;
      }
      return classify_all(inputs, encoder_, config.inference, label_embedding(), bank, prompt());
    }
  }
}

// ------------------------------------------------------------------ freezing

std::set<std::string> trainable_names(const Model& model, PolicyKind policy) {
  std::set<std::string> names;
  for (const auto& p : model.parameters()) {
    const std::string_view name = p.name;
    bool train = false;
    switch (policy) {
      case PolicyKind::perfect:
      case PolicyKind::pattern_free_pet:
        train = is_adapter(name) || is_layer_norm(name) || name == "label_embedding";
        break;
      case PolicyKind::finetune:
        train = is_encoder_tensor(name) || name.starts_with("cls_head.");
        break;
      case PolicyKind::pet:
        train = is_encoder_tensor(name);
        break;
      case PolicyKind::bitfit_mte:
        train = (is_encoder_tensor(name) && is_bias(name)) || name == "label_embedding";
        break;
      case PolicyKind::prompt_mte:
        train = name == "soft_prompt" || name == "label_embedding";
        break;
      case PolicyKind::perfect_no_adapters:
        train = is_encoder_tensor(name) || name == "label_embedding";
        break;
    }
    if (train) names.insert(p.name);
  }
  return names;
}

std::set<std::string> freeze_mask(Model& model, PolicyKind policy) {
  auto names = trainable_names(model, policy);
  for (auto& p : model.encoder().params().items()) p.tensor.set_requires_grad(names.contains(p.name));
  for (auto& p : model.heads().items()) p.tensor.set_requires_grad(names.contains(p.name));
  return names;
}

// ------------------------------------------------------------------ accounting

std::string parameter_component(std::string_view name) {
  if (name == "label_embedding") return "label_embedding";
  if (name == "soft_prompt") return "soft_prompt";
  if (name.starts_with("cls_head.")) return "cls_head";
  if (is_adapter(name)) return "adapters";
  if (is_layer_norm(name)) return "layer_norms";
  return "backbone";
}

double ParamCount::trainable_percent() const {
  return total == 0 ? 0.0 : 100.0 * static_cast<double>(trainable) / static_cast<double>(total);
}

double ParamCount::trainable_percent_of_backbone() const {
  return backbone_total == 0 ? 0.0 : 100.0 * static_cast<double>(trainable) / static_cast<double>(backbone_total);
}

ParamCount count_trainable_params(const ModelConfig& config, std::size_t classes) {
  const auto enc = config.effective_encoder();
  enc.validate();
  const auto counts = count_encoder_params(enc);
  const auto h = enc.hidden, f = enc.ffn_inner();
  const auto method = config.method;
  const bool verbalizer_head = method == Method::pet || method == Method::pattern_free_pet;

  const std::size_t label_embedding = uses_label_embedding(method) ? classes * config.masks * h : 0;
  const std::size_t soft_prompt = method == Method::prompt_mte ? config.prompt_tokens * h : 0;
  const std::size_t cls_head = method == Method::finetune ? classes * h + classes : 0;
  const std::size_t mlm_norm = enc.mlm_head_transform ? 2 * h : 0;
  const std::size_t norms = counts.embedding_norm + counts.layer_norms + mlm_norm;
  const std::size_t other_backbone = counts.backbone() - norms;
  (void)verbalizer_head;

  ParamCount out;
  out.total = counts.total() + label_embedding + soft_prompt + cls_head;
  out.backbone_total = counts.backbone();
  auto put = [&](const char* component, std::size_t n) {
    if (n > 0) out.breakdown[component] += n;
  };
  switch (policy_for(method)) {
    case PolicyKind::perfect:
    case PolicyKind::pattern_free_pet:
      put("adapters", counts.adapters);
      put("layer_norms", norms);
      break;
    case PolicyKind::finetune:
      put("backbone", other_backbone);
      put("layer_norms", norms);
      put("cls_head", cls_head);
      break;
    case PolicyKind::pet:
    case PolicyKind::perfect_no_adapters:
      put("backbone", other_backbone);
      put("layer_norms", norms);
      break;
    case PolicyKind::bitfit_mte: {
      std::size_t biases = enc.layers * (4 * h + f + h);
      if (enc.mlm_head_transform) biases += h + enc.vocab_size;
      const std::size_t norm_biases = h * (1 + 2 * enc.layers + (enc.mlm_head_transform ? 1 : 0));
      put("backbone", biases);
      put("layer_norms", norm_biases);
      break;
    }
    case PolicyKind::prompt_mte:
      put("soft_prompt", soft_prompt);
      break;
  }
  put("label_embedding", label_embedding);
  out.trainable = 0;
  for (const auto& [_, n] : out.breakdown) out.trainable += n;
  return out;
}

ParamCount registry_count(const Model& model) {
  ParamCount out;
  for (const auto& p : model.parameters()) {
    out.total += p.tensor.size();
    if (is_encoder_tensor(p.name) && !is_adapter(p.name)) out.backbone_total += p.tensor.size();
    if (!p.tensor.requires_grad()) continue;
    out.trainable += p.tensor.size();
    out.breakdown[parameter_component(p.name)] += p.tensor.size();
  }
  return out;
}

ParamCount count_trainable_params(const Model& model) {
  const auto closed = count_trainable_params(model.config(), model.task().classes);
  const auto live = registry_count(model);
  if (closed.trainable != live.trainable || closed.total != live.total || closed.breakdown != live.breakdown ||
      closed.backbone_total != live.backbone_total) {
    std::ostringstream msg;
    msg << "parameter accounting mismatch for " << to_string(model.method()) << ": closed form "
        << closed.trainable << "/" << closed.total << ", registry " << live.trainable << "/" << live.total;
    throw Error(msg.str());
  }
  return closed;
}

// ------------------------------------------------------------------ optimizer

AdamW::AdamW(std::vector<NamedTensor> params, const TrainConfig& config) : params_(std::move(params)), config_(config) {
  for (const auto& p : params_) {
    first_.emplace_back(p.tensor.size(), 0.0);
    second_.emplace_back(p.tensor.size(), 0.0);
  }
}

double AdamW::lr_for(std::string_view name) const {
  if (name == "label_embedding") return config_.lr_label_embedding;
  if (name == "soft_prompt") return config_.lr_prompt;
  return config_.lr_backbone;
}

void AdamW::step() {
  ++t_;
  const double bias1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bias2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t p = 0; p < params_.size(); ++p) {
    auto& tensor = params_[p].tensor;
    if (!tensor.has_grad()) continue;
    const double lr = lr_for(params_[p].name);
    auto values = tensor.mutable_values();
    const auto grad = tensor.grad();
    auto& m = first_[p];
    auto& v = second_[p];
    for (std::size_t i = 0; i < values.size(); ++i) {
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * grad[i];
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * grad[i] * grad[i];
      const double update = (m[i] / bias1) / (std::sqrt(v[i] / bias2) + config_.adam_eps);
      values[i] -= lr * (update + config_.weight_decay * values[i]);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

double train_step(Model& model, std::span<const PreparedExample> batch, AdamW& optimizer, const TrainConfig& config,
                  std::size_t step) {
  const auto loss = model.loss(batch, config);
  const double value = loss.item();
  if (!std::isfinite(value)) {
    std::ostringstream msg;
    msg << "non-finite loss " << value << " at step " << step << " (lr backbone " << config.lr_backbone
        << ", lr label embedding " << config.lr_label_embedding << ", lr prompt " << config.lr_prompt << ")";
    throw NumericError(msg.str());
  }
  backward(loss);
  optimizer.step();
  optimizer.zero_grad();
  return value;
}

std::size_t select_checkpoint(std::span<const CheckpointRecord> history) {
  if (history.empty()) throw ContractError("select_checkpoint: no checkpoints evaluated");
  const CheckpointRecord* best = &history.front();
  for (const auto& rec : history) {
    if (rec.val_accuracy > best->val_accuracy || (rec.val_accuracy == best->val_accuracy && rec.step < best->step)) {
      best = &rec;
    }
  }
  return best->step;
}

double accuracy(std::span<const std::size_t> predictions, std::span<const PreparedExample> gold) {
  if (predictions.size() != gold.size() || gold.empty()) throw ContractError("accuracy: size mismatch");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) hits += predictions[i] == gold[i].input.label ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(gold.size());
}

TrainResult fit(Model& model, std::span<const PreparedExample> train, std::span<const PreparedExample> val,
                const TrainConfig& config) {
  config.validate();
  if (train.empty()) throw ContractError("fit: empty training set");
  TrainResult result;
  result.trainable = freeze_mask(model, policy_for(model.method()));

  std::vector<NamedTensor> trainable;
  for (const auto& p : model.parameters()) {
    if (p.tensor.requires_grad()) trainable.push_back(p);
  }
  AdamW optimizer(trainable, config);

  std::vector<std::vector<double>> best;
  auto snapshot = [&] {
    best.clear();
    for (const auto& p : trainable) best.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  };

  Rng rng(Rng::mix(config.seed, kBatchStream));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  const auto batch_size = std::min(config.batch_size, train.size());
  std::vector<PreparedExample> batch;
  double best_accuracy = -1.0;
  double elapsed = 0.0;

  for (std::size_t step = 1; step <= config.steps; ++step) {
    batch.clear();
    while (batch.size() < batch_size) {
      if (cursor == order.size()) {
        rng.shuffle(std::span(order));
        cursor = 0;
      }
      batch.push_back(train[order[cursor++]]);
    }
    const auto start = std::chrono::steady_clock::now();
    const double loss = train_step(model, batch, optimizer, config, step);
    elapsed += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.losses.push_back(loss);

    if (step % config.checkpoint_every == 0 || step == config.steps) {
      double acc = 0.0;
      if (!val.empty()) acc = accuracy(model.predict(val, train, config), val);
      result.history.push_back({step, acc, loss});
      if (acc > best_accuracy) {
        best_accuracy = acc;
        snapshot();
      }
    }
  }
  result.mean_step_seconds = elapsed / static_cast<double>(config.steps);
  result.selected_step = select_checkpoint(result.history);
  for (std::size_t p = 0; p < trainable.size(); ++p) {
    auto values = trainable[p].tensor.mutable_values();
    std::copy(best[p].begin(), best[p].end(), values.begin());
  }
  return result;
}

}  // namespace perfect
