// perfect: command-line front end over the C API.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "perfect/perfect_c.h"

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct CliError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Status check; prints the library message and turns it into an exit code.
struct Failed {
  int code;
};

void check(perfect_status status, const char* what) {
  if (status == PERFECT_OK) return;
  std::cerr << "perfect: " << what << ": " << perfect_status_name(status) << ": " << perfect_last_error() << "\n";
  throw Failed{status == PERFECT_ERR_INPUT || status == PERFECT_ERR_CONTRACT ? 2 : 1};
}

std::string take(char* s) {
  std::string out = s ? s : "";
  perfect_string_free(s);
  return out;
}

using TaskPtr = std::unique_ptr<perfect_task, decltype(&perfect_task_free)>;
using ResultsPtr = std::unique_ptr<perfect_results, decltype(&perfect_results_free)>;

// Flags shared by the experiment-style subcommands.
struct Common {
  std::string config_path;
  std::string out;
  std::optional<std::string> method, task, train_path, test_path, verbalizer_path, loss, inference, placement;
  std::optional<std::size_t> classes, steps, masks, shots, checkpoint_every, examples;
  std::optional<double> sigma;
  bool untrained = false;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "JSON configuration file (flags override it)")->check(CLI::ExistingFile);
  app->add_option("--out", c.out, "output directory (default $PERFECT_OUTPUT_ROOT/<name>)");
  app->add_option("--method", c.method,
                  "perfect, perfect_init, finetune, pet, pattern_free_pet, bitfit_mte, prompt_mte, "
                  "perfect_no_adapters");
  app->add_option("--task", c.task, "synthetic task: keyword, pair_agreement, topic, parity");
  app->add_option("--classes", c.classes, "classes for keyword/topic tasks");
  app->add_option("--examples", c.examples, "synthetic pool size");
  app->add_option("--train", c.train_path, "training corpus (TSV or JSON lines)")->check(CLI::ExistingFile);
  app->add_option("--test", c.test_path, "test corpus")->check(CLI::ExistingFile);
  app->add_option("--verbalizers", c.verbalizer_path, "verbalizer JSON")->check(CLI::ExistingFile);
  app->add_option("--steps", c.steps, "training steps");
  app->add_option("--checkpoint-every", c.checkpoint_every, "validation interval in steps");
  app->add_option("--masks", c.masks, "mask tokens per input (M)");
  app->add_option("--sigma", c.sigma, "label-embedding init scale");
  app->add_option("--shots", c.shots, "examples per class (N)");
  app->add_option("--loss", c.loss, "hinge or cross_entropy");
  app->add_option("--inference", c.inference, "prototypical, label_embedding or training_objective");
  app->add_option("--placement", c.placement, "mask placement");
  app->add_flag("--untrained", c.untrained, "skip training and score the initial model");
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CliError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw CliError(path + ": " + e.what());
  }
}

json build_config(const Common& c) {
  json doc = c.config_path.empty() ? json::object() : read_json_file(c.config_path);
  if (!doc.is_object()) throw CliError("configuration must be a JSON object");
  auto& task = doc["task"];
  if (task.is_null()) task = json::object();
  if (c.train_path) {
    task.erase("synthetic");
    task["train_path"] = *c.train_path;
    if (!task.contains("name")) task["name"] = fs::path(*c.train_path).stem().string();
  }
  if (c.test_path) task["test_path"] = *c.test_path;
  if (c.verbalizer_path) task["verbalizer_path"] = *c.verbalizer_path;
  if (c.task || c.classes || c.examples) {
    if (c.train_path) throw CliError("--task/--classes/--examples select a synthetic task and conflict with --train");
    auto& synth = task["synthetic"];
    if (synth.is_null()) synth = json::object();
    if (c.task) {
      synth["task"] = *c.task;
      task["name"] = *c.task;
    }
    if (c.classes) synth["classes"] = *c.classes;
    if (c.examples) synth["examples"] = *c.examples;
  }
  if (task.empty()) doc.erase("task");

  json model = doc.contains("model") ? doc["model"] : json::object();
  if (c.method) model["method"] = *c.method;
  if (c.masks) model["masks"] = *c.masks;
  if (c.sigma) model["sigma"] = *c.sigma;
  if (c.placement) model["placement"] = *c.placement;
  if (!model.empty()) doc["model"] = model;

  json train = doc.contains("train") ? doc["train"] : json::object();
  if (c.steps) train["steps"] = *c.steps;
  if (c.checkpoint_every) train["checkpoint_every"] = *c.checkpoint_every;
  if (c.loss) train["loss"] = *c.loss;
  if (c.inference) train["inference"] = *c.inference;
  if (!train.empty()) doc["train"] = train;

  if (c.shots) doc["shots"] = *c.shots;
  if (c.untrained) doc["untrained"] = true;
  return doc;
}

// "5" means seeds 1..5; "3,7,11" is an explicit list.
std::vector<std::uint64_t> parse_seeds(const std::string& text, const char* flag) {
  std::vector<std::uint64_t> out;
  std::stringstream in(text);
  std::string item;
  try {
    while (std::getline(in, item, ',')) {
      std::size_t used = 0;
      const auto v = std::stoull(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(v);
    }
  } catch (const std::exception&) {
    throw CliError(std::string(flag) + ": expected a count or a comma-separated seed list, got '" + text + "'");
  }
  if (out.empty()) throw CliError(std::string(flag) + ": no seeds given");
  if (text.find(',') == std::string::npos) {
    const auto n = out.front();
    if (n == 0) throw CliError(std::string(flag) + ": count must be at least 1");
    out.clear();
    for (std::uint64_t s = 1; s <= n; ++s) out.push_back(s);
  }
  return out;
}

std::string method_of(const json& doc) {
  if (doc.contains("model") && doc["model"].contains("method")) return doc["model"]["method"].get<std::string>();
  return "perfect";
}

std::string task_name_of(const json& doc) {
  if (doc.contains("task") && doc["task"].contains("name")) return doc["task"]["name"].get<std::string>();
  return "keyword";
}

std::string resolve_out(const std::string& explicit_dir, const std::string& name) {
  if (!explicit_dir.empty()) return explicit_dir;
  const char* root = std::getenv("PERFECT_OUTPUT_ROOT");
  return (fs::path(root && *root ? root : "perfect_runs") / name).string();
}

TaskPtr load(const std::string& config) {
  perfect_task* task = nullptr;
  check(perfect_task_load(config.c_str(), &task), "loading task");
  return TaskPtr(task, perfect_task_free);
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CliError("cannot write " + path.string());
  out << text << "\n";
}

int cmd_train(const Common& c, std::uint64_t data_seed, std::uint64_t train_seed, const std::string& checkpoint) {
  const auto doc = build_config(c);
  const auto config = doc.dump();
  auto task = load(config);
  const auto dir = fs::path(resolve_out(c.out, "train-" + task_name_of(doc) + "-" + method_of(doc)));
  const auto ckpt = checkpoint.empty() ? (dir / "model.json").string() : checkpoint;
  fs::create_directories(fs::path(ckpt).parent_path().empty() ? fs::path(".") : fs::path(ckpt).parent_path());
  char* out = nullptr;
  check(perfect_train(task.get(), config.c_str(), data_seed, train_seed, ckpt.c_str(), &out), "training");
  const auto meta = take(out);
  write_text(dir / "run.json", json::parse(meta).dump(2));
  const auto j = json::parse(meta);
  std::cout << "accuracy " << j.value("accuracy", 0.0) << "  selected_step " << j.value("selected_step", 0)
            << "\nrun metadata: " << (dir / "run.json").string() << "\ncheckpoint: " << ckpt << "\n";
  return 0;
}

int cmd_experiment(const Common& c, const std::string& data_seeds, const std::string& train_seeds) {
  auto doc = build_config(c);
  if (!data_seeds.empty()) doc["data_seeds"] = parse_seeds(data_seeds, "--data-seeds");
  if (!train_seeds.empty()) doc["train_seeds"] = parse_seeds(train_seeds, "--train-seeds");
  const auto config = doc.dump();
  auto task = load(config);
  perfect_results* raw = nullptr;
  check(perfect_experiment_run(task.get(), config.c_str(), &raw), "running experiment");
  ResultsPtr results(raw, perfect_results_free);
  const auto dir = resolve_out(c.out, "experiment-" + task_name_of(doc) + "-" + method_of(doc));
  check(perfect_results_write(results.get(), dir.c_str()), "writing results");
  double mean = 0, worst = 0, sd = 0;
  const auto status = perfect_results_aggregate(results.get(), &mean, &worst, &sd);
  std::printf("runs %zu%s\n", perfect_results_count(results.get()),
              perfect_results_complete(results.get()) ? "" : " (incomplete: see aggregates.json)");
  if (status == PERFECT_OK) std::printf("mean %.4f  worst %.4f  std %.4f\n", mean, worst, sd);
  std::printf("output: %s\n", dir.c_str());
  return perfect_results_complete(results.get()) ? 0 : 1;
}

int cmd_ablate(const Common& c, const std::string& sweep, const std::string& values) {
  const auto doc = build_config(c);
  const auto config = doc.dump();
  auto task = load(config);
  const auto dir = resolve_out(c.out, "ablate-" + sweep + "-" + task_name_of(doc));
  char* out = nullptr;
  check(perfect_ablation_run(task.get(), config.c_str(), sweep.c_str(), values.empty() ? nullptr : values.c_str(),
                             dir.c_str(), &out),
        "running ablation");
  const auto j = json::parse(take(out));
  bool complete = true;
  std::printf("%-20s %8s %8s %8s %5s\n", sweep.c_str(), "mean", "worst", "std", "runs");
  for (const auto& row : j["rows"]) {
    complete = complete && row.value("complete", false);
    std::printf("%-20s %8.4f %8.4f %8.4f %5zu\n", row["value"].get<std::string>().c_str(), row.value("mean", 0.0),
                row.value("worst", 0.0), row.value("std", 0.0), row.value("runs", std::size_t{0}));
  }
  std::printf("output: %s\n", dir.c_str());
  return complete ? 0 : 1;
}

int cmd_bench(const Common& c, const std::string& shape) {
  const auto doc = build_config(c);
  const auto config = doc.dump();
  TaskPtr task(nullptr, perfect_task_free);
  if (shape != "roberta-large") task = load(config);
  char* out = nullptr;
  check(perfect_bench(task.get(), config.c_str(), shape.c_str(), &out), "benchmarking");
  const auto report = json::parse(take(out)).dump(2);
  std::cout << report << "\n";
  if (!c.out.empty() || std::getenv("PERFECT_OUTPUT_ROOT")) {
    const auto dir = fs::path(resolve_out(c.out, "bench-" + shape + "-" + method_of(doc)));
    write_text(dir / "efficiency.json", report);
  }
  return 0;
}

int cmd_gen_synth(const std::string& task, std::size_t n, std::uint64_t seed, std::optional<std::size_t> classes,
                  const std::string& out) {
  json spec = {{"task", task}, {"examples", n}, {"seed", seed}};
  if (classes) spec["classes"] = *classes;
  const auto parent = fs::path(out).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  check(perfect_generate_synthetic(spec.dump().c_str(), out.c_str()), "generating corpus");
  std::cout << "wrote " << n << " examples to " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot learning with label embeddings and multi-token masks", "perfect"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(perfect_version()));

  Common train_opts, exp_opts, ablate_opts, bench_opts;
  std::uint64_t data_seed = 1, train_seed = 1;
  std::string checkpoint, data_seeds, train_seeds, sweep, values, shape = "toy";

  auto* train = app.add_subcommand("train", "one run: sample, train, select on validation, test");
  add_common(train, train_opts);
  train->add_option("--data-seed", data_seed, "episode sampling seed");
  train->add_option("--train-seed", train_seed, "initialization and batching seed");
  train->add_option("--checkpoint", checkpoint, "checkpoint path (default <out>/model.json)");

  auto* experiment = app.add_subcommand("experiment", "cross-product of data and train seeds");
  add_common(experiment, exp_opts);
  experiment->add_option("--data-seeds", data_seeds, "count (1..n) or comma-separated list");
  experiment->add_option("--train-seeds", train_seeds, "count (1..n) or comma-separated list");

  auto* ablate = app.add_subcommand("ablate", "sweep one setting over the seed protocol");
  add_common(ablate, ablate_opts);
  ablate->add_option("--sweep", sweep, "masks, sigma, loss, inference, placement or method")
      ->required()
      ->check(CLI::IsMember({"masks", "sigma", "loss", "inference", "placement", "method"}));
  ablate->add_option("--values", values, "comma-separated values (default grid when omitted)");

  auto* bench = app.add_subcommand("bench", "efficiency report");
  add_common(bench, bench_opts);
  bench->add_option("--shape", shape, "toy (trains and measures) or roberta-large (closed form)")
      ->check(CLI::IsMember({"toy", "roberta-large"}));

  auto* gen = app.add_subcommand("gen-synth", "write a synthetic corpus");
  std::string gen_task = "keyword", gen_out;
  std::size_t gen_n = 400;
  std::uint64_t gen_seed = 1;
  std::optional<std::size_t> gen_classes;
  gen->add_option("--task", gen_task, "keyword, pair_agreement, topic or parity")
      ->check(CLI::IsMember({"keyword", "pair_agreement", "topic", "parity"}));
  gen->add_option("--n", gen_n, "number of examples");
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--classes", gen_classes, "classes (keyword, topic)");
  gen->add_option("--out", gen_out, "output path (.tsv, .jsonl)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "perfect: " << e.what() << "\n\n";
    const CLI::App* failing = &app;
    for (auto* sub : app.get_subcommands()) failing = sub;
    std::cerr << failing->help();
    return 2;
  }

  try {
    if (*train) return cmd_train(train_opts, data_seed, train_seed, checkpoint);
    if (*experiment) return cmd_experiment(exp_opts, data_seeds, train_seeds);
    if (*ablate) return cmd_ablate(ablate_opts, sweep, values);
    if (*bench) return cmd_bench(bench_opts, shape);
    if (*gen) return cmd_gen_synth(gen_task, gen_n, gen_seed, gen_classes, gen_out);
  } catch (const Failed& f) {
    return f.code;
  } catch (const CliError& e) {
    std::cerr << "perfect: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "perfect: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
