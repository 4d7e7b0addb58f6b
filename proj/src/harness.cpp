#include "perfect/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_set>

#include "perfect/errors.hpp"

namespace perfect {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

constexpr std::uint64_t kTestStream = 0x7e57;
constexpr std::uint64_t kEpisodeStream = 0xe915;

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << content;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

}  // namespace

// ------------------------------------------------------------------ synthetic tasks

std::string_view to_string(SynthTask task) {
  switch (task) {
    case SynthTask::keyword: return "keyword";
    case SynthTask::pair_agreement: return "pair_agreement";
    case SynthTask::topic: return "topic";
    case SynthTask::parity: return "parity";
  }
  return "unknown";
}

SynthTask parse_synth_task(std::string_view name) {
  for (auto t : {SynthTask::keyword, SynthTask::pair_agreement, SynthTask::topic, SynthTask::parity}) {
    if (to_string(t) == name) return t;
  }
  throw InputError("unknown synthetic task '" + std::string(name) + "'");
}

void SynthSpec::validate() const {
  if (classes < 2) throw InputError("synthetic: need at least two classes");
  if ((task == SynthTask::pair_agreement || task == SynthTask::parity) && classes != 2) {
    throw InputError("synthetic: " + std::string(to_string(task)) + " is a two-class task");
  }
  if (examples < classes) throw InputError("synthetic: fewer examples than classes");
  if (length == 0) throw InputError("synthetic: length must be positive");
  if (cues == 0 || cues > length) throw InputError("synthetic: cues must be in [1, length]");
  if (cue_pool == 0) throw InputError("synthetic: cue_pool must be positive");
  if (distractors == 0) throw InputError("synthetic: need at least one distractor word");
}

namespace {

std::vector<std::string> synth_label_names(const SynthSpec& spec) {
  switch (spec.task) {
    case SynthTask::keyword:
      if (spec.classes == 2) return {"negative", "positive"};
      break;
    case SynthTask::pair_agreement: return {"different", "same"};
    case SynthTask::parity: return {"even", "odd"};
    case SynthTask::topic: {
      std::vector<std::string> names;
      for (std::size_t k = 0; k < spec.classes; ++k) names.push_back("topic" + std::to_string(k));
      return names;
    }
  }
  std::vector<std::string> names;
  for (std::size_t k = 0; k < spec.classes; ++k) names.push_back("class" + std::to_string(k));
  return names;
}

std::string distractor(std::size_t i) { return "w" + std::to_string(i); }

std::vector<std::string> filler(const SynthSpec& spec, Rng& rng, std::size_t length) {
  std::vector<std::string> words(length);
  for (auto& w : words) w = distractor(rng.below(spec.distractors));
  return words;
}

// Distinct positions in [0, length).
std::vector<std::size_t> positions(Rng& rng, std::size_t length, std::size_t count) {
  std::vector<std::size_t> all(length);
  std::iota(all.begin(), all.end(), 0);
  rng.shuffle(std::span(all));
  all.resize(count);
  return all;
}

LabeledText cue_sentence(const SynthSpec& spec, Rng& rng, std::size_t label, const std::string& prefix) {
  auto words = filler(spec, rng, spec.length);
  for (auto p : positions(rng, spec.length, spec.cues)) {
    words[p] = prefix + std::to_string(label) + "_" + std::to_string(rng.below(spec.cue_pool));
  }
  return {join_words(words), "", label};
}

LabeledText pair_sentence(const SynthSpec& spec, Rng& rng, std::size_t label) {
  auto a = filler(spec, rng, spec.length);
  auto b = filler(spec, rng, spec.length);
  const auto pool = std::max<std::size_t>(spec.cue_pool, 2);
  const auto key_a = rng.below(pool);
  auto key_b = key_a;
  if (label == 0) key_b = (key_a + 1 + rng.below(pool - 1)) % pool;
  a[rng.below(spec.length)] = "key" + std::to_string(key_a);
  b[rng.below(spec.length)] = "key" + std::to_string(key_b);
  return {join_words(a), join_words(b), label};
}

LabeledText parity_sentence(const SynthSpec& spec, Rng& rng, std::size_t label) {
  auto words = filler(spec, rng, spec.length);
  std::size_t ones = 0;
  for (auto& w : words) {
    if (rng.uniform() < 0.3) {
      w = "one";
      ++ones;
    }
  }
  if (ones % 2 != label) {
    auto& w = words[rng.below(spec.length)];
    w = w == "one" ? distractor(rng.below(spec.distractors)) : "one";
  }
  return {join_words(words), "", label};
}

}  // namespace

Corpus generate_synthetic(const SynthSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  Corpus corpus;
  corpus.label_names = synth_label_names(spec);
  corpus.pair = spec.task == SynthTask::pair_agreement;
  std::vector<std::size_t> labels(spec.examples);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i % spec.classes;
  rng.shuffle(std::span(labels));
  for (auto label : labels) {
    switch (spec.task) {
      case SynthTask::keyword: corpus.examples.push_back(cue_sentence(spec, rng, label, "k")); break;
      case SynthTask::topic: corpus.examples.push_back(cue_sentence(spec, rng, label, "t")); break;
      case SynthTask::pair_agreement: corpus.examples.push_back(pair_sentence(spec, rng, label)); break;
      case SynthTask::parity: corpus.examples.push_back(parity_sentence(spec, rng, label)); break;
    }
  }
  return corpus;
}

std::vector<std::vector<std::string>> default_verbalizer_words(std::size_t classes) {
  std::vector<std::vector<std::string>> out;
  for (std::size_t k = 0; k < classes; ++k) {
    const auto base = "verb" + std::to_string(k);
    if (k % 2 == 0) {
      out.push_back({base});
    } else {
      out.push_back({base, base + "b", base + "c"});
    }
  }
  return out;
}

// ------------------------------------------------------------------ task data

TaskData load_task(const TaskSpec& spec, const std::vector<std::string>& pattern) {
  TaskData data;
  data.name = spec.name;
  if (spec.synth) {
    data.pool = generate_synthetic(*spec.synth);
    if (spec.test_examples > 0) {
      auto test_spec = *spec.synth;
      test_spec.seed = Rng::mix(spec.synth->seed, kTestStream);
      test_spec.examples = spec.test_examples;
      auto test = generate_synthetic(test_spec);
      std::set<std::pair<std::string, std::string>> seen;
      for (const auto& ex : data.pool.examples) seen.emplace(ex.text_a, ex.text_b);
      std::erase_if(test.examples, [&](const LabeledText& ex) { return seen.contains({ex.text_a, ex.text_b}); });
      data.test = std::move(test);
    }
  } else {
    if (spec.train_path.empty()) throw InputError("task '" + spec.name + "': no synthetic spec and no train_path");
    data.pool = load_corpus(spec.train_path);
    if (!spec.test_path.empty()) {
      auto test = load_corpus(spec.test_path);
      if (test.label_names != data.pool.label_names) {
        throw InputError("task '" + spec.name + "': test labels differ from training labels");
      }
      data.test = std::move(test);
    }
  }

  auto texts = data.pool.texts();
  if (data.test) {
    auto more = data.test->texts();
    texts.insert(texts.end(), more.begin(), more.end());
  }
  texts.push_back(join_words(pattern));
  const auto defaults = default_verbalizer_words(data.pool.classes());
  if (spec.verbalizer_path.empty()) {
    for (const auto& words : defaults) texts.push_back(join_words(words));
  }
  data.vocab = Vocab::build(texts);

  if (spec.verbalizer_path.empty()) {
    nlohmann::json doc = nlohmann::json::object();
    for (std::size_t k = 0; k < defaults.size(); ++k) doc[data.pool.label_names[k]] = defaults[k];
    data.verbalizers = VerbalizerMap::from_json(doc.dump(), data.vocab, data.pool.label_names);
  } else {
    data.verbalizers = VerbalizerMap::load(spec.verbalizer_path, data.vocab, data.pool.label_names);
  }
  return data;
}

// ------------------------------------------------------------------ episodes

FewShotEpisode sample_episode(const Corpus& pool, const Corpus* test, std::size_t shots, std::uint64_t data_seed) {
  if (shots == 0) throw InputError("episode: shots must be positive");
  const auto k_count = pool.classes();
  std::vector<std::vector<std::size_t>> by_class(k_count);
  for (std::size_t i = 0; i < pool.examples.size(); ++i) {
    const auto label = pool.examples[i].label;
    if (label >= k_count) throw InputError("episode: example " + std::to_string(i) + " has an unknown label");
    by_class[label].push_back(i);
  }
  for (std::size_t k = 0; k < k_count; ++k) {
    if (by_class[k].size() < 2 * shots) {
      throw InputError("episode: class '" + pool.label_names[k] + "' has " + std::to_string(by_class[k].size()) +
                       " examples, need " + std::to_string(2 * shots));
    }
  }
  Rng rng(Rng::mix(data_seed, kEpisodeStream));
  FewShotEpisode episode;
  episode.data_seed = data_seed;
  std::vector<bool> used(pool.examples.size(), false);
  for (auto& members : by_class) {
    rng.shuffle(std::span(members));
    for (std::size_t j = 0; j < 2 * shots; ++j) {
      used[members[j]] = true;
      (j < shots ? episode.train : episode.val).push_back(pool.examples[members[j]]);
    }
  }
  rng.shuffle(std::span(episode.train));
  rng.shuffle(std::span(episode.val));
  if (test) {
    episode.test = test->examples;
  } else {
    for (std::size_t i = 0; i < pool.examples.size(); ++i) {
      if (!used[i]) episode.test.push_back(pool.examples[i]);
    }
  }
  return episode;
}

// ------------------------------------------------------------------ experiments

Aggregate aggregate(std::vector<double> accuracies) {
  if (accuracies.empty()) throw ContractError("aggregate: no accuracies");
  std::sort(accuracies.begin(), accuracies.end());
  Aggregate out;
  out.count = accuracies.size();
  // Offsets from the minimum keep a constant list exact (std 0).
  out.worst = accuracies.front();
  double offset = 0.0;
  for (double a : accuracies) offset += a - out.worst;
  out.mean = out.worst + offset / static_cast<double>(out.count);
  if (out.count > 1) {
    double ss = 0.0;
    for (double a : accuracies) ss += (a - out.mean) * (a - out.mean);
    out.std = std::sqrt(ss / static_cast<double>(out.count - 1));
  }
  return out;
}

namespace {

struct Prepared {
  std::vector<PreparedExample> train, val, test;
};

Prepared prepare_episode(const Model& model, const FewShotEpisode& episode, const Vocab& vocab) {
  Prepared out;
  for (const auto& ex : episode.train) out.train.push_back(model.prepare(ex, vocab));
  for (const auto& ex : episode.val) out.val.push_back(model.prepare(ex, vocab));
  for (const auto& ex : episode.test) out.test.push_back(model.prepare(ex, vocab));
  return out;
}

ModelConfig sized_model(const ExperimentConfig& config, const TaskData& data) {
  auto model = config.model;
  model.encoder.vocab_size = data.vocab.size();
  return model;
}

TaskInfo task_info(const TaskData& data) {
  return {data.pool.classes(), data.pool.pair, data.pool.label_names, data.verbalizers};
}

std::optional<PrototypeBank> fitted_prototypes(const Model& model, const Prepared& prepared,
                                              const TrainConfig& config) {
  if (!uses_label_embedding(model.method()) || config.inference != InferenceMode::prototypical) return std::nullopt;
  std::vector<MaskedExample> inputs;
  for (const auto& ex : prepared.train) inputs.push_back(ex.input);
  return compute_prototypes(model.encoder(), inputs, model.task().classes, model.prompt());
}

// Test predictions with the encoder pass counter covering only the queries.
std::vector<std::size_t> predict_counting(const Model& model, const Prepared& prepared, const TrainConfig& config,
                                          const std::optional<PrototypeBank>& bank, double* passes_per_query) {
  model.encoder().reset_forward_passes();
  auto preds = model.predict(prepared.test, prepared.train, config, bank ? &*bank : nullptr);
  if (passes_per_query) {
    *passes_per_query =
        static_cast<double>(model.encoder().forward_passes()) / static_cast<double>(prepared.test.size());
  }
  return preds;
}

}  // namespace

RunRecord run_single(const ExperimentConfig& config, const TaskData& data, std::uint64_t data_seed,
                     std::uint64_t train_seed, const RunHook& hook) {
  RunRecord run;
  run.method = std::string(to_string(config.model.method));
  run.policy = std::string(to_string(policy_for(config.model.method)));
  run.data_seed = data_seed;
  run.train_seed = train_seed;
  run.masks = config.model.masks;
  run.sigma = config.model.sigma;
  try {
    const auto episode = sample_episode(data.pool, data.test ? &*data.test : nullptr, config.shots, data_seed);
    if (episode.test.empty()) throw InputError("episode: no examples left for the test set");
    const auto seed = Rng::mix(data_seed, train_seed);
    Model model(sized_model(config, data), task_info(data), data.vocab, seed);
    run.masks = model.slots();
    const auto prepared = prepare_episode(model, episode, data.vocab);
    auto train = config.train;
    train.seed = seed;
    if (config.untrained) {
      freeze_mask(model, policy_for(model.method()));
      train.inference = InferenceMode::training_objective;
    } else {
      const auto result = fit(model, prepared.train, prepared.val, train);
      run.selected_step = result.selected_step;
      run.mean_step_seconds = result.mean_step_seconds;
      run.history = result.history;
    }
    const auto counted = count_trainable_params(model);
    run.trainable_params = counted.trainable;
    run.breakdown = counted.breakdown;
    const auto bank = fitted_prototypes(model, prepared, train);
    const auto preds = predict_counting(model, prepared, train, bank, &run.passes_per_query);
    run.accuracy = accuracy(preds, prepared.test);
    if (hook) hook(model, bank);
  } catch (const Error& e) {
    run.completed = false;
    run.error = e.what();
    run.failure = std::current_exception();
  }
  return run;
}

RunMetrics aggregate_runs(std::vector<RunRecord> runs, std::size_t expected_runs) {
  std::sort(runs.begin(), runs.end(), [](const RunRecord& a, const RunRecord& b) {
    return std::tie(a.data_seed, a.train_seed) < std::tie(b.data_seed, b.train_seed);
  });
  RunMetrics metrics;
  metrics.expected_runs = expected_runs;
  std::vector<double> accs;
  for (const auto& r : runs) {
    if (r.completed) accs.push_back(r.accuracy);
  }
  if (!accs.empty()) metrics.summary = aggregate(accs);
  metrics.complete = accs.size() == expected_runs && runs.size() == expected_runs;
  metrics.runs = std::move(runs);
  return metrics;
}

RunMetrics run_experiment(const ExperimentConfig& config, const TaskData& data) {
  if (config.data_seeds.empty() || config.train_seeds.empty()) {
    throw InputError("experiment: data_seeds and train_seeds must be nonempty");
  }
  std::vector<RunRecord> runs;
  for (auto d : config.data_seeds) {
    for (auto t : config.train_seeds) runs.push_back(run_single(config, data, d, t));
  }
  return aggregate_runs(std::move(runs), config.data_seeds.size() * config.train_seeds.size());
}

// ------------------------------------------------------------------ output

std::string results_csv(const RunMetrics& metrics) {
  std::ostringstream out;
  out << kCsvHeader << '\n';
  for (const auto& r : metrics.runs) {
    out << r.method << ',' << r.data_seed << ',' << r.train_seed << ',' << r.policy << ',' << r.masks << ','
        << format_double(r.sigma) << ',' << (r.completed ? format_double(r.accuracy) : std::string()) << ','
        << r.selected_step << ',' << r.trainable_params << '\n';
  }
  return out.str();
}

std::vector<RunRecord> parse_results_csv(std::string_view content) {
  std::istringstream in{std::string(content)};
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) throw InputError("results csv: unexpected header");
  std::vector<RunRecord> runs;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream fields(line);
    std::string cell;
    while (std::getline(fields, cell, ',')) f.push_back(cell);
    if (f.size() == 8 && line.back() == ',') f.emplace_back();
    if (f.size() != 9) throw InputError("results csv: line " + std::to_string(line_no) + " has " +
                                        std::to_string(f.size()) + " fields");
    try {
      RunRecord r;
      r.method = f[0];
      r.data_seed = std::stoull(f[1]);
      r.train_seed = std::stoull(f[2]);
      r.policy = f[3];
      r.masks = std::stoull(f[4]);
      r.sigma = std::strtod(f[5].c_str(), nullptr);
      r.completed = !f[6].empty();
      if (r.completed) r.accuracy = std::strtod(f[6].c_str(), nullptr);
      r.selected_step = std::stoull(f[7]);
      r.trainable_params = std::stoull(f[8]);
      runs.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw InputError("results csv: bad number on line " + std::to_string(line_no));
    }
  }
  return runs;
}

ojson aggregate_json(const Aggregate& summary) {
  ojson j;
  j["mean"] = summary.mean;
  j["worst"] = summary.worst;
  j["std"] = summary.std;
  j["runs"] = summary.count;
  j["std_divisor"] = "n-1";
  return j;
}

ojson run_metadata(const RunRecord& run, const ExperimentConfig& config) {
  ojson j;
  j["method"] = run.method;
  j["policy"] = run.policy;
  j["data_seed"] = run.data_seed;
  j["train_seed"] = run.train_seed;
  j["completed"] = run.completed;
  if (!run.completed) j["error"] = run.error;
  j["accuracy"] = run.accuracy;
  j["masks"] = run.masks;
  j["sigma"] = run.sigma;
  j["untrained"] = config.untrained;
  j["steps"] = config.untrained ? 0 : config.train.steps;
  j["selected_step"] = run.selected_step;
  j["optimizer"] = {{"name", "adamw"},
                    {"lr_backbone", config.train.lr_backbone},
                    {"lr_label_embedding", config.train.lr_label_embedding},
                    {"lr_prompt", config.train.lr_prompt},
                    {"beta1", config.train.beta1},
                    {"beta2", config.train.beta2},
                    {"eps", config.train.adam_eps},
                    {"weight_decay", config.train.weight_decay}};
  j["trainable_params"] = run.trainable_params;
  j["trainable_breakdown"] = run.breakdown;
  j["mean_step_seconds"] = run.mean_step_seconds;
  j["passes_per_query"] = run.passes_per_query;
  ojson history = ojson::array();
  for (const auto& h : run.history) {
    history.push_back({{"step", h.step}, {"val_accuracy", h.val_accuracy}, {"train_loss", h.train_loss}});
  }
  j["checkpoints"] = history;
  return j;
}

ojson experiment_json(const RunMetrics& metrics, const ExperimentConfig& config) {
  ojson j;
  j["task"] = config.task.name;
  j["method"] = to_string(config.model.method);
  j["policy"] = to_string(policy_for(config.model.method));
  j["summary"] = aggregate_json(metrics.summary);
  j["expected_runs"] = metrics.expected_runs;
  std::size_t done = 0;
  ojson failures = ojson::array();
  for (const auto& r : metrics.runs) {
    if (r.completed) {
      ++done;
    } else {
      failures.push_back({{"data_seed", r.data_seed}, {"train_seed", r.train_seed}, {"error", r.error}});
    }
  }
  j["completed_runs"] = done;
  j["complete"] = metrics.complete;
  j["failures"] = failures;
  if (config.model.method == Method::pet) {
    j["note"] = "single toy verbalizer map; one run per seed pair, no pattern ensemble";
  }
  j["config"] = experiment_to_json(config);
  return j;
}

void write_experiment(const std::string& dir, const RunMetrics& metrics, const ExperimentConfig& config) {
  const fs::path root(dir);
  std::error_code ec;
  fs::create_directories(root / "runs", ec);
  if (ec) throw IoError("cannot create '" + (root / "runs").string() + "': " + ec.message());
  write_text(root / "results.csv", results_csv(metrics));
  write_text(root / "aggregates.json", experiment_json(metrics, config).dump(2) + "\n");
  for (const auto& r : metrics.runs) {
    const auto name = "d" + std::to_string(r.data_seed) + "_t" + std::to_string(r.train_seed) + ".json";
    write_text(root / "runs" / name, run_metadata(r, config).dump(2) + "\n");
  }
}

std::string output_dir(const std::string& explicit_dir, const std::string& name) {
  if (!explicit_dir.empty()) return explicit_dir;
  if (const char* root = std::getenv("PERFECT_OUTPUT_ROOT"); root && *root) return (fs::path(root) / name).string();
  return (fs::path("perfect_runs") / name).string();
}

// ------------------------------------------------------------------ ablations

std::string_view to_string(Sweep sweep) {
  switch (sweep) {
    case Sweep::masks: return "masks";
    case Sweep::sigma: return "sigma";
    case Sweep::loss: return "loss";
    case Sweep::inference: return "inference";
    case Sweep::placement: return "placement";
    case Sweep::method: return "method";
  }
  return "unknown";
}

Sweep parse_sweep(std::string_view name) {
  for (auto s : {Sweep::masks, Sweep::sigma, Sweep::loss, Sweep::inference, Sweep::placement, Sweep::method}) {
    if (to_string(s) == name) return s;
  }
  throw InputError("unknown sweep '" + std::string(name) + "'");
}

std::vector<std::string> default_sweep_values(Sweep sweep) {
  switch (sweep) {
    case Sweep::masks: return {"1", "2", "5", "10"};
    case Sweep::sigma: return {"1e-2", "1e-3", "1e-4", "1e-5"};
    case Sweep::loss: return {"hinge", "cross_entropy"};
    case Sweep::inference: return {"prototypical", "label_embedding", "training_objective"};
    case Sweep::placement:
      return {"pair_suffix", "pair_between", "pair_two_segment_prefix", "pair_two_segment_suffix"};
    case Sweep::method: return {"perfect", "perfect_init", "bitfit_mte", "prompt_mte", "finetune"};
  }
  return {};
}

ExperimentConfig apply_sweep_value(const ExperimentConfig& base, Sweep sweep, const std::string& value) {
  auto config = base;
  try {
    switch (sweep) {
      case Sweep::masks: {
        const auto m = std::stoull(value);
        if (m == 0) throw InputError("masks must be at least 1");
        config.model.masks = m;
        break;
      }
      case Sweep::sigma: {
        const double s = std::stod(value);
        if (!(s > 0.0)) throw InputError("sigma must be positive");
        config.model.sigma = s;
        break;
      }
      case Sweep::loss: config.train.loss = parse_loss_kind(value); break;
      case Sweep::inference: config.train.inference = parse_inference_mode(value); break;
      case Sweep::placement: config.model.placement = parse_mask_placement(value); break;
      case Sweep::method:
        config.model.method = parse_method(value);
        config.train.lr_backbone = default_train_config(config.model.method).lr_backbone;
        break;
    }
  } catch (const std::logic_error&) {
    throw InputError("sweep " + std::string(to_string(sweep)) + ": bad value '" + value + "'");
  }
  return config;
}

std::vector<AblationRow> run_ablation(const ExperimentConfig& base, const TaskData& data, Sweep sweep,
                                      const std::vector<std::string>& values) {
  if (values.empty()) throw InputError("ablation: no values");
  std::vector<ExperimentConfig> configs;
  for (const auto& v : values) configs.push_back(apply_sweep_value(base, sweep, v));
  std::vector<AblationRow> rows;
  for (std::size_t i = 0; i < values.size(); ++i) rows.push_back({values[i], run_experiment(configs[i], data)});
  return rows;
}

void write_ablation(const std::string& dir, Sweep sweep, const std::vector<AblationRow>& rows,
                    const ExperimentConfig& base) {
  const fs::path root(dir);
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw IoError("cannot create '" + root.string() + "': " + ec.message());
  std::ostringstream csv;
  csv << "sweep,value,mean,worst,std,runs,complete\n";
  ojson doc;
  doc["sweep"] = to_string(sweep);
  doc["rows"] = ojson::array();
  for (const auto& row : rows) {
    const auto& s = row.metrics.summary;
    csv << to_string(sweep) << ',' << row.value << ',' << format_double(s.mean) << ',' << format_double(s.worst)
        << ',' << format_double(s.std) << ',' << s.count << ',' << (row.metrics.complete ? "true" : "false") << '\n';
    auto entry = aggregate_json(s);
    entry["value"] = row.value;
    entry["complete"] = row.metrics.complete;
    doc["rows"].push_back(entry);
    const auto config = apply_sweep_value(base, sweep, row.value);
    write_experiment((root / (std::string(to_string(sweep)) + "_" + row.value)).string(), row.metrics, config);
  }
  write_text(root / "ablation.csv", csv.str());
  write_text(root / "ablation.json", doc.dump(2) + "\n");
}

// ------------------------------------------------------------------ efficiency

ojson EfficiencyReport::to_json() const {
  ojson j;
  j["method"] = method;
  j["trainable_params"] = params.trainable;
  j["total_params"] = params.total;
  j["backbone_params"] = params.backbone_total;
  j["percent_trained"] = params.trainable_percent();
  j["percent_of_backbone"] = params.trainable_percent_of_backbone();
  j["trainable_breakdown"] = params.breakdown;
  j["passes_per_query"] = passes_per_query;
  j["expected_passes_per_query"] = expected_passes_per_query;
  j["mean_step_seconds"] = mean_step_seconds;
  j["parameter_elements"] = parameter_elements;
  j["activation_elements"] = activation_elements;
  return j;
}

EncoderConfig roberta_large_config() {
  EncoderConfig c;
  c.vocab_size = 50265;
  c.hidden = 1024;
  c.layers = 24;
  c.heads = 16;
  c.ffn_mult = 4;
  c.max_seq = 514;
  c.type_vocab = 1;
  c.mlm_head_transform = true;
  c.adapter = AdapterConfig{64, 1e-2, true};
  c.adapter_placement = AdapterPlacement::after_ffn_only;
  return c;
}

EfficiencyReport efficiency_report(const ModelConfig& config, std::size_t classes) {
  EfficiencyReport report;
  report.method = std::string(to_string(config.method));
  report.params = count_trainable_params(config, classes);
  report.parameter_elements = report.params.total;
  const bool autoregressive = config.method == Method::pet || config.method == Method::pattern_free_pet;
  report.expected_passes_per_query = autoregressive ? 0.0 : 1.0;
  return report;
}

EfficiencyReport efficiency_report(const ExperimentConfig& config, const TaskData& data) {
  if (config.data_seeds.empty() || config.train_seeds.empty()) throw InputError("bench: seeds must be nonempty");
  const auto data_seed = config.data_seeds.front(), train_seed = config.train_seeds.front();
  const auto episode = sample_episode(data.pool, data.test ? &*data.test : nullptr, config.shots, data_seed);
  const auto seed = Rng::mix(data_seed, train_seed);
  Model model(sized_model(config, data), task_info(data), data.vocab, seed);
  const auto prepared = prepare_episode(model, episode, data.vocab);
  auto train = config.train;
  train.seed = seed;

  EfficiencyReport report;
  report.method = std::string(to_string(model.method()));
  const auto result = fit(model, prepared.train, prepared.val, train);
  report.mean_step_seconds = result.mean_step_seconds;
  report.params = count_trainable_params(model);
  report.parameter_elements = model.parameter_count();

  {
    const auto n = std::min(train.batch_size, prepared.train.size());
    reset_op_elements();
    auto loss = model.loss(std::span(prepared.train).first(n), train);
    backward(loss);
    report.activation_elements = op_elements();
    for (auto& p : model.parameters()) p.tensor.zero_grad();
  }

  predict_counting(model, prepared, train, fitted_prototypes(model, prepared, train), &report.passes_per_query);
  const bool autoregressive = model.method() == Method::pet || model.method() == Method::pattern_free_pet;
  report.expected_passes_per_query = autoregressive ? static_cast<double>(data.verbalizers.total_length()) : 1.0;
  return report;
}

// ------------------------------------------------------------------ configuration

namespace {

using json = nlohmann::json;

void check_keys(const json& obj, std::initializer_list<std::string_view> allowed, const std::string& where) {
  if (!obj.is_object()) throw InputError("config: '" + where + "' must be an object");
  for (const auto& [key, _] : obj.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw InputError("config: unknown key '" + key + "' in " + where);
    }
  }
}

template <class T>
void read(const json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

SynthSpec synth_from_json(const json& j) {
  check_keys(j, {"task", "classes", "examples", "length", "cues", "cue_pool", "distractors", "seed"}, "synthetic");
  SynthSpec s;
  if (j.contains("task")) s.task = parse_synth_task(j.at("task").get<std::string>());
  if (s.task == SynthTask::topic) s.classes = 3;
  read(j, "classes", s.classes);
  read(j, "examples", s.examples);
  read(j, "length", s.length);
  read(j, "cues", s.cues);
  read(j, "cue_pool", s.cue_pool);
  read(j, "distractors", s.distractors);
  read(j, "seed", s.seed);
  s.validate();
  return s;
}

ojson synth_to_json(const SynthSpec& s) {
  return {{"task", to_string(s.task)},     {"classes", s.classes}, {"examples", s.examples},
          {"length", s.length},            {"cues", s.cues},       {"cue_pool", s.cue_pool},
          {"distractors", s.distractors},  {"seed", s.seed}};
}

}  // namespace

ModelConfig model_config_from_json(const json& m) {
  try {
    check_keys(m, {"method", "masks", "placement", "sigma", "prompt_tokens", "pattern", "encoder", "adapter"},
               "model");
    ModelConfig c;
    if (m.contains("method")) c.method = parse_method(m.at("method").get<std::string>());
    read(m, "masks", c.masks);
    if (m.contains("placement")) c.placement = parse_mask_placement(m.at("placement").get<std::string>());
    read(m, "sigma", c.sigma);
    read(m, "prompt_tokens", c.prompt_tokens);
    read(m, "pattern", c.pattern);
    if (m.contains("encoder")) {
      const auto& e = m.at("encoder");
      check_keys(e, {"vocab_size", "hidden", "layers", "heads", "ffn_mult", "max_seq", "type_vocab",
                     "mlm_head_transform", "init_std", "init_seed", "adapter_placement"},
                 "model.encoder");
      auto& enc = c.encoder;
      read(e, "vocab_size", enc.vocab_size);
      read(e, "hidden", enc.hidden);
      read(e, "layers", enc.layers);
      read(e, "heads", enc.heads);
      read(e, "ffn_mult", enc.ffn_mult);
      read(e, "max_seq", enc.max_seq);
      read(e, "type_vocab", enc.type_vocab);
      read(e, "mlm_head_transform", enc.mlm_head_transform);
      read(e, "init_std", enc.init_std);
      read(e, "init_seed", enc.init_seed);
      if (e.contains("adapter_placement")) {
        enc.adapter_placement = parse_adapter_placement(e.at("adapter_placement").get<std::string>());
      }
    }
    if (m.contains("adapter")) {
      const auto& a = m.at("adapter");
      check_keys(a, {"bottleneck", "init_scale", "up_projection_zero_init"}, "model.adapter");
      read(a, "bottleneck", c.adapter.bottleneck);
      read(a, "init_scale", c.adapter.init_scale);
      read(a, "up_projection_zero_init", c.adapter.up_projection_zero_init);
    }
    if (c.masks == 0) throw InputError("config: masks must be at least 1");
    return c;
  } catch (const json::exception& e) {
    throw InputError(std::string("config: ") + e.what());
  }
}

ojson model_config_to_json(const ModelConfig& c) {
  const auto& enc = c.encoder;
  ojson model;
  model["method"] = to_string(c.method);
  model["masks"] = c.masks;
  if (c.placement) model["placement"] = to_string(*c.placement);
  model["sigma"] = c.sigma;
  model["prompt_tokens"] = c.prompt_tokens;
  model["pattern"] = c.pattern;
  model["encoder"] = {{"vocab_size", enc.vocab_size},
                      {"hidden", enc.hidden},
                      {"layers", enc.layers},
                      {"heads", enc.heads},
                      {"ffn_mult", enc.ffn_mult},
                      {"max_seq", enc.max_seq},
                      {"type_vocab", enc.type_vocab},
                      {"mlm_head_transform", enc.mlm_head_transform},
                      {"init_std", enc.init_std},
                      {"init_seed", enc.init_seed},
                      {"adapter_placement", to_string(enc.adapter_placement)}};
  model["adapter"] = {{"bottleneck", c.adapter.bottleneck},
                      {"init_scale", c.adapter.init_scale},
                      {"up_projection_zero_init", c.adapter.up_projection_zero_init}};
  return model;
}

ExperimentConfig experiment_from_json(const json& doc) {
  try {
    check_keys(doc, {"task", "model", "train", "shots", "data_seeds", "train_seeds", "untrained"}, "experiment");
    ExperimentConfig c;
    if (doc.contains("task")) {
      const auto& t = doc.at("task");
      check_keys(t, {"name", "synthetic", "test_examples", "train_path", "test_path", "verbalizer_path"}, "task");
      read(t, "name", c.task.name);
      read(t, "test_examples", c.task.test_examples);
      read(t, "train_path", c.task.train_path);
      read(t, "test_path", c.task.test_path);
      read(t, "verbalizer_path", c.task.verbalizer_path);
      if (t.contains("synthetic")) {
        c.task.synth = synth_from_json(t.at("synthetic"));
      } else if (!c.task.train_path.empty()) {
        c.task.synth.reset();
      }
    }
    if (doc.contains("model")) c.model = model_config_from_json(doc.at("model"));
    c.train = default_train_config(c.model.method);
    if (doc.contains("train")) {
      const auto& t = doc.at("train");
      check_keys(t, {"steps", "batch_size", "checkpoint_every", "margin", "lr_backbone", "lr_label_embedding",
                     "lr_prompt", "beta1", "beta2", "adam_eps", "weight_decay", "loss", "inference",
                     "length_normalized"},
                 "train");
      read(t, "steps", c.train.steps);
      read(t, "batch_size", c.train.batch_size);
      read(t, "checkpoint_every", c.train.checkpoint_every);
      read(t, "margin", c.train.margin);
      read(t, "lr_backbone", c.train.lr_backbone);
      read(t, "lr_label_embedding", c.train.lr_label_embedding);
      read(t, "lr_prompt", c.train.lr_prompt);
      read(t, "beta1", c.train.beta1);
      read(t, "beta2", c.train.beta2);
      read(t, "adam_eps", c.train.adam_eps);
      read(t, "weight_decay", c.train.weight_decay);
      if (t.contains("loss")) c.train.loss = parse_loss_kind(t.at("loss").get<std::string>());
      if (t.contains("inference")) c.train.inference = parse_inference_mode(t.at("inference").get<std::string>());
      read(t, "length_normalized", c.train.length_normalized);
    }
    read(doc, "shots", c.shots);
    read(doc, "data_seeds", c.data_seeds);
    read(doc, "train_seeds", c.train_seeds);
    read(doc, "untrained", c.untrained);
    c.train.validate();
    return c;
  } catch (const json::exception& e) {
    throw InputError(std::string("config: ") + e.what());
  }
}

ojson experiment_to_json(const ExperimentConfig& c) {
  ojson task;
  task["name"] = c.task.name;
  if (c.task.synth) task["synthetic"] = synth_to_json(*c.task.synth);
  task["test_examples"] = c.task.test_examples;
  if (!c.task.train_path.empty()) task["train_path"] = c.task.train_path;
  if (!c.task.test_path.empty()) task["test_path"] = c.task.test_path;
  if (!c.task.verbalizer_path.empty()) task["verbalizer_path"] = c.task.verbalizer_path;

  const auto& t = c.train;
  ojson train = {{"steps", t.steps},
                 {"batch_size", t.batch_size},
                 {"checkpoint_every", t.checkpoint_every},
                 {"margin", t.margin},
                 {"lr_backbone", t.lr_backbone},
                 {"lr_label_embedding", t.lr_label_embedding},
                 {"lr_prompt", t.lr_prompt},
                 {"beta1", t.beta1},
                 {"beta2", t.beta2},
                 {"adam_eps", t.adam_eps},
                 {"weight_decay", t.weight_decay},
                 {"loss", to_string(t.loss)},
                 {"inference", to_string(t.inference)},
                 {"length_normalized", t.length_normalized}};

  ojson out;
  out["task"] = task;
  out["model"] = model_config_to_json(c.model);
  out["train"] = train;
  out["shots"] = c.shots;
  out["data_seeds"] = c.data_seeds;
  out["train_seeds"] = c.train_seeds;
  out["untrained"] = c.untrained;
  return out;
}

}  // namespace perfect
