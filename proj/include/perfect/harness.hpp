#pragma once

#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "perfect/trainer.hpp"

namespace perfect {

// ------------------------------------------------------------------ synthetic tasks

//   keyword         class-specific cue words among distractors
//   pair_agreement  two segments; label 1 when they share a key word
//   topic           K topics, each with its own word pool
//   parity          label = parity of the count of the word "one"
enum class SynthTask { keyword, pair_agreement, topic, parity };

std::string_view to_string(SynthTask task);
SynthTask parse_synth_task(std::string_view name);

struct SynthSpec {
  SynthTask task = SynthTask::keyword;
  std::size_t classes = 2;      // keyword and topic only
  std::size_t examples = 400;   // balanced across classes
  std::size_t length = 8;       // words per sentence (per segment for pairs)
  std::size_t cues = 3;         // cue words per sentence
  std::size_t cue_pool = 2;     // cue words available per class
  std::size_t distractors = 48;
  std::uint64_t seed = 1;

  void validate() const;
};

Corpus generate_synthetic(const SynthSpec& spec);

// Toy verbalizers: class k maps to one word when k is even and three words
// when k is odd, so maps are mixed-length whenever K ≥ 2.
std::vector<std::vector<std::string>> default_verbalizer_words(std::size_t classes);

// ------------------------------------------------------------------ task data

// Where a task's data comes from: a generator or corpus files.
struct TaskSpec {
  std::string name = "keyword";
  std::optional<SynthSpec> synth = SynthSpec{};
  std::size_t test_examples = 400;  // size of the generated test corpus
  std::string train_path;
  std::string test_path;         // empty: the pool remainder after sampling
  std::string verbalizer_path;   // empty: default_verbalizer_words
};

struct TaskData {
  std::string name;
  Corpus pool;
  std::optional<Corpus> test;
  Vocab vocab;
  VerbalizerMap verbalizers;
};

// Builds the vocabulary over pool and test text plus pattern and verbalizer
// words. Generated test corpora drop any example whose text also occurs in
// the pool.
TaskData load_task(const TaskSpec& spec, const std::vector<std::string>& pattern = {"it", "was"});

// ------------------------------------------------------------------ episodes

struct FewShotEpisode {
  std::vector<LabeledText> train;
  std::vector<LabeledText> val;
  std::vector<LabeledText> test;
  std::uint64_t data_seed = 0;
};

// N per class in train and in val, drawn without replacement. Test is the
// separate test corpus when present, otherwise every pool example not sampled.
FewShotEpisode sample_episode(const Corpus& pool, const Corpus* test, std::size_t shots, std::uint64_t data_seed);

// ------------------------------------------------------------------ experiments

struct ExperimentConfig {
  TaskSpec task;
  ModelConfig model;
  TrainConfig train;
  std::size_t shots = 16;
  std::vector<std::uint64_t> data_seeds = {1, 2, 3, 4, 5};
  std::vector<std::uint64_t> train_seeds = {1, 2, 3, 4};
  // Skip training; predict with the initial model and the training-objective
  // rule, which needs no fitted statistics.
  bool untrained = false;
};

struct RunRecord {
  std::string method;
  std::uint64_t data_seed = 0;
  std::uint64_t train_seed = 0;
  std::string policy;
  std::size_t masks = 0;
  double sigma = 0.0;
  double accuracy = 0.0;
  std::size_t selected_step = 0;
  std::size_t trainable_params = 0;

  bool completed = true;
  std::string error;
  std::exception_ptr failure;  // the aborting exception, for rethrow
  double mean_step_seconds = 0.0;
  double passes_per_query = 0.0;
  std::map<std::string, std::size_t> breakdown;
  std::vector<CheckpointRecord> history;
};

struct Aggregate {
  double mean = 0.0;
  double worst = 0.0;
  double std = 0.0;  // sample standard deviation, divisor n − 1
  std::size_t count = 0;
};

// Values are sorted before summation, so any permutation of the input gives
// bit-identical results. The mean is accumulated as offsets from the minimum,
// which makes a constant list exact. A single value has std 0.
Aggregate aggregate(std::vector<double> accuracies);

struct RunMetrics {
  std::vector<RunRecord> runs;  // sorted by (data_seed, train_seed)
  Aggregate summary;            // over completed runs
  std::size_t expected_runs = 0;
  bool complete = false;
};

// Called with the final model and its prototype bank (when prototypical
// inference is active) after a completed run.
using RunHook = std::function<void(const Model&, const std::optional<PrototypeBank>&)>;

RunRecord run_single(const ExperimentConfig& config, const TaskData& data, std::uint64_t data_seed,
                     std::uint64_t train_seed, const RunHook& hook = {});
RunMetrics run_experiment(const ExperimentConfig& config, const TaskData& data);
RunMetrics aggregate_runs(std::vector<RunRecord> runs, std::size_t expected_runs);

// ------------------------------------------------------------------ output

inline constexpr std::string_view kCsvHeader =
    "method,data_seed,train_seed,policy,M,sigma,accuracy,selected_step,trainable_params";

std::string results_csv(const RunMetrics& metrics);
std::vector<RunRecord> parse_results_csv(std::string_view content);
nlohmann::ordered_json aggregate_json(const Aggregate& summary);
nlohmann::ordered_json run_metadata(const RunRecord& run, const ExperimentConfig& config);
nlohmann::ordered_json experiment_json(const RunMetrics& metrics, const ExperimentConfig& config);

// results.csv, aggregates.json and runs/<data>_<train>.json under dir.
void write_experiment(const std::string& dir, const RunMetrics& metrics, const ExperimentConfig& config);

// Directory for outputs: explicit path, else $PERFECT_OUTPUT_ROOT/<name>, else
// ./perfect_runs/<name>.
std::string output_dir(const std::string& explicit_dir, const std::string& name);

// ------------------------------------------------------------------ ablations

enum class Sweep { masks, sigma, loss, inference, placement, method };

std::string_view to_string(Sweep sweep);
Sweep parse_sweep(std::string_view name);
std::vector<std::string> default_sweep_values(Sweep sweep);
// Copy of base with one setting changed.
ExperimentConfig apply_sweep_value(const ExperimentConfig& base, Sweep sweep, const std::string& value);

struct AblationRow {
  std::string value;
  RunMetrics metrics;
};

std::vector<AblationRow> run_ablation(const ExperimentConfig& base, const TaskData& data, Sweep sweep,
                                      const std::vector<std::string>& values);
// ablation.csv (sweep,value,mean,worst,std,runs) + ablation.json, and each
// value's experiment output in a subdirectory.
void write_ablation(const std::string& dir, Sweep sweep, const std::vector<AblationRow>& rows,
                    const ExperimentConfig& base);

// ------------------------------------------------------------------ efficiency

struct EfficiencyReport {
  std::string method;
  ParamCount params;
  double passes_per_query = 0.0;       // measured
  double expected_passes_per_query = 0.0;
  double mean_step_seconds = 0.0;
  std::size_t parameter_elements = 0;
  std::size_t activation_elements = 0;  // op results of one training step

  nlohmann::ordered_json to_json() const;
};

// Closed-form parameter accounting only (shapes too large to instantiate).
EfficiencyReport efficiency_report(const ModelConfig& config, std::size_t classes);
// Trains one run on the episode and measures step time, passes per test
// query and activation elements.
EfficiencyReport efficiency_report(const ExperimentConfig& config, const TaskData& data);

// RoBERTa-large dimensions: V=50265, S=514, one segment type, 24 layers,
// H=1024, 16 heads, FFN 4096, MLM head transform, B=64 adapters after the FFN.
EncoderConfig roberta_large_config();

// ------------------------------------------------------------------ configuration

// JSON keys mirror the struct fields; see README for the list. Unknown keys
// raise InputError.
ExperimentConfig experiment_from_json(const nlohmann::json& doc);
ModelConfig model_config_from_json(const nlohmann::json& doc);
nlohmann::ordered_json model_config_to_json(const ModelConfig& config);
nlohmann::ordered_json experiment_to_json(const ExperimentConfig& config);

}  // namespace perfect
