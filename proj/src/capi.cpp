#include "perfect/perfect_c.h"

#include <cstdlib>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>

#include "perfect/checkpoint.hpp"
#include "perfect/errors.hpp"
#include "perfect/harness.hpp"

using namespace perfect;
using json = nlohmann::json;

struct perfect_task {
  TaskData data;
};

struct perfect_results {
  ExperimentConfig config;
  RunMetrics metrics;
};

struct perfect_model {
  LoadedModel loaded;
};

namespace {

thread_local std::string g_last_error;

perfect_status fail(perfect_status status, const std::string& message) {
  g_last_error = message;
  return status;
}

template <class Fn>
perfect_status guarded(Fn&& fn) {
  try {
    fn();
    return PERFECT_OK;
  } catch (const InputError& e) {
    return fail(PERFECT_ERR_INPUT, e.what());
  } catch (const DimensionError& e) {
    return fail(PERFECT_ERR_DIMENSION, e.what());
  } catch (const ContractError& e) {
    return fail(PERFECT_ERR_CONTRACT, e.what());
  } catch (const NumericError& e) {
    return fail(PERFECT_ERR_NUMERIC, e.what());
  } catch (const IoError& e) {
    return fail(PERFECT_ERR_IO, e.what());
  } catch (const json::exception& e) {
    return fail(PERFECT_ERR_INPUT, e.what());
  } catch (const std::exception& e) {
    return fail(PERFECT_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(PERFECT_ERR_INTERNAL, "unknown error");
  }
}

char* dup_string(const std::string& s) {
  auto* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

json parse_config(const char* text) {
  if (!text || !*text) return json::object();
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw InputError(std::string("configuration is not valid JSON: ") + e.what());
  }
}

ExperimentConfig experiment_config(const char* text) { return experiment_from_json(parse_config(text)); }

void require(const void* p, const char* what) {
  if (!p) throw ContractError(std::string(what) + " must not be NULL");
}

std::vector<std::string> split_values(const char* values) {
  std::vector<std::string> out;
  std::stringstream in(values);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace

extern "C" {

const char* perfect_version(void) { return "1.0.0"; }

const char* perfect_last_error(void) { return g_last_error.c_str(); }

const char* perfect_status_name(perfect_status status) {
  switch (status) {
    case PERFECT_OK: return "ok";
    case PERFECT_ERR_INPUT: return "input error";
    case PERFECT_ERR_DIMENSION: return "dimension error";
    case PERFECT_ERR_CONTRACT: return "contract error";
    case PERFECT_ERR_NUMERIC: return "numeric error";
    case PERFECT_ERR_IO: return "i/o error";
    case PERFECT_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

void perfect_string_free(char* s) { std::free(s); }

perfect_status perfect_task_load(const char* config_json, perfect_task** out) {
  return guarded([&] {
    require(out, "out");
    *out = nullptr;
    const auto config = experiment_config(config_json);
    auto task = std::make_unique<perfect_task>();
    task->data = load_task(config.task, config.model.pattern);
    *out = task.release();
  });
}

void perfect_task_free(perfect_task* task) { delete task; }

perfect_status perfect_task_describe(const perfect_task* task, char** out_json) {
  return guarded([&] {
    require(task, "task");
    require(out_json, "out_json");
    const auto& d = task->data;
    nlohmann::ordered_json j;
    j["name"] = d.name;
    j["classes"] = d.pool.classes();
    j["pair"] = d.pool.pair;
    j["label_names"] = d.pool.label_names;
    j["pool_examples"] = d.pool.examples.size();
    j["test_examples"] = d.test ? d.test->examples.size() : 0;
    j["vocab_size"] = d.vocab.size();
    j["verbalizers"] = json::parse(d.verbalizers.to_json(d.vocab));
    *out_json = dup_string(j.dump());
  });
}

perfect_status perfect_generate_synthetic(const char* spec_json, const char* path) {
  return guarded([&] {
    require(path, "path");
    auto doc = json::object();
    doc["task"] = {{"synthetic", parse_config(spec_json)}};
    const auto config = experiment_from_json(doc);
    save_corpus(generate_synthetic(*config.task.synth), path);
  });
}

perfect_status perfect_experiment_run(const perfect_task* task, const char* config_json, perfect_results** out) {
  return guarded([&] {
    require(task, "task");
    require(out, "out");
    *out = nullptr;
    auto results = std::make_unique<perfect_results>();
    results->config = experiment_config(config_json);
    results->metrics = run_experiment(results->config, task->data);
    *out = results.release();
  });
}

size_t perfect_results_count(const perfect_results* results) { return results ? results->metrics.runs.size() : 0; }

int perfect_results_complete(const perfect_results* results) {
  return results && results->metrics.complete ? 1 : 0;
}

perfect_status perfect_results_aggregate(const perfect_results* results, double* mean, double* worst,
                                         double* std_dev) {
  return guarded([&] {
    require(results, "results");
    if (results->metrics.summary.count == 0) throw ContractError("no completed runs to aggregate");
    if (mean) *mean = results->metrics.summary.mean;
    if (worst) *worst = results->metrics.summary.worst;
    if (std_dev) *std_dev = results->metrics.summary.std;
  });
}

perfect_status perfect_results_csv(const perfect_results* results, char** out_csv) {
  return guarded([&] {
    require(results, "results");
    require(out_csv, "out_csv");
    *out_csv = dup_string(results_csv(results->metrics));
  });
}

perfect_status perfect_results_json(const perfect_results* results, char** out_json) {
  return guarded([&] {
    require(results, "results");
    require(out_json, "out_json");
    *out_json = dup_string(experiment_json(results->metrics, results->config).dump());
  });
}

perfect_status perfect_results_write(const perfect_results* results, const char* dir) {
  return guarded([&] {
    require(results, "results");
    require(dir, "dir");
    write_experiment(dir, results->metrics, results->config);
  });
}

void perfect_results_free(perfect_results* results) { delete results; }

perfect_status perfect_train(const perfect_task* task, const char* config_json, uint64_t data_seed,
                             uint64_t train_seed, const char* checkpoint_path, char** out_json) {
  return guarded([&] {
    require(task, "task");
    require(out_json, "out_json");
    const auto config = experiment_config(config_json);
    RunHook hook;
    if (checkpoint_path) {
      const std::string path = checkpoint_path;
      const Vocab* vocab = &task->data.vocab;
      hook = [path, vocab](const Model& model, const std::optional<PrototypeBank>& bank) {
        save_checkpoint(path, model, *vocab, bank ? &*bank : nullptr);
      };
    }
    const auto run = run_single(config, task->data, data_seed, train_seed, hook);
    if (run.failure) std::rethrow_exception(run.failure);
    *out_json = dup_string(run_metadata(run, config).dump());
  });
}

perfect_status perfect_ablation_run(const perfect_task* task, const char* config_json, const char* sweep,
                                    const char* values, const char* out_dir, char** out_json) {
  return guarded([&] {
    require(task, "task");
    require(sweep, "sweep");
    const auto config = experiment_config(config_json);
    const auto kind = parse_sweep(sweep);
    const auto list = values ? split_values(values) : default_sweep_values(kind);
    const auto rows = run_ablation(config, task->data, kind, list);
    if (out_dir) write_ablation(out_dir, kind, rows, config);
    if (out_json) {
      nlohmann::ordered_json j;
      j["sweep"] = sweep;
      j["rows"] = nlohmann::ordered_json::array();
      for (const auto& row : rows) {
        auto entry = aggregate_json(row.metrics.summary);
        entry["value"] = row.value;
        entry["complete"] = row.metrics.complete;
        j["rows"].push_back(entry);
      }
      *out_json = dup_string(j.dump());
    }
  });
}

perfect_status perfect_bench(const perfect_task* task, const char* config_json, const char* shape,
                             char** out_json) {
  return guarded([&] {
    require(out_json, "out_json");
    const std::string which = shape ? shape : "toy";
    const auto doc = parse_config(config_json);
    auto config = experiment_from_json(doc);
    nlohmann::ordered_json j;
    if (which == "roberta-large") {
      auto model = config.model;
      model.encoder = roberta_large_config();
      if (model.adapter.bottleneck == AdapterConfig{}.bottleneck) model.adapter = *model.encoder.adapter;
      std::size_t classes = 2;
      if (task) {
        classes = task->data.pool.classes();
      } else if (config.task.synth) {
        classes = config.task.synth->classes;
      }
      const auto report = efficiency_report(model, classes);
      j = report.to_json();
      j["shape"] = which;
      j["trainable_millions"] = static_cast<double>(report.params.trainable) / 1e6;
      j["backbone_millions"] = static_cast<double>(report.params.backbone_total) / 1e6;
    } else if (which == "toy") {
      require(task, "task");
      j = efficiency_report(config, task->data).to_json();
      j["shape"] = which;
    } else {
      throw InputError("unknown bench shape '" + which + "' (toy or roberta-large)");
    }
    *out_json = dup_string(j.dump());
  });
}

perfect_status perfect_aggregate(const double* values, size_t n, double* mean, double* worst, double* std_dev) {
  return guarded([&] {
    if (n == 0) throw ContractError("aggregate needs at least one value");
    require(values, "values");
    const auto a = aggregate(std::vector<double>(values, values + n));
    if (mean) *mean = a.mean;
    if (worst) *worst = a.worst;
    if (std_dev) *std_dev = a.std;
  });
}

perfect_status perfect_reaggregate_csv(const char* csv_path, char** out_json) {
  return guarded([&] {
    require(csv_path, "csv_path");
    require(out_json, "out_json");
    std::ifstream in(csv_path, std::ios::binary);
    if (!in) throw IoError(std::string("cannot open '") + csv_path + "'");
    std::stringstream buffer;
    buffer << in.rdbuf();
    auto runs = parse_results_csv(buffer.str());
    const auto n = runs.size();
    *out_json = dup_string(aggregate_json(aggregate_runs(std::move(runs), n).summary).dump());
  });
}

perfect_status perfect_model_load(const char* path, perfect_model** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    *out = nullptr;
    *out = new perfect_model{load_checkpoint(path)};
  });
}

void perfect_model_free(perfect_model* model) { delete model; }

perfect_status perfect_model_predict(const perfect_model* model, const char* text_a, const char* text_b,
                                     size_t* label) {
  return guarded([&] {
    require(model, "model");
    require(text_a, "text_a");
    require(label, "label");
    const auto& m = model->loaded.model;
    const auto example = m.prepare({text_a, text_b ? text_b : "", 0}, model->loaded.vocab);
    TrainConfig config;
    const auto& bank = model->loaded.prototypes;
    if (uses_label_embedding(m.method()) && !bank) config.inference = InferenceMode::training_objective;
    const auto preds = m.predict(std::span(&example, 1), {}, config, bank ? &*bank : nullptr);
    *label = preds.at(0);
  });
}

}  // extern "C"
