#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "perfect/errors.hpp"
#include "perfect/harness.hpp"
#include "support.hpp"

using namespace perfect;
using namespace perfect::testing;
namespace fs = std::filesystem;

namespace {

ExperimentConfig quick_config(const TaskData& data, Method method = Method::perfect) {
  ExperimentConfig c;
  c.task.synth->examples = data.pool.examples.size();
  c.model = tiny_model(method, data);
  c.train = default_train_config(method);
  c.train.steps = 20;
  c.train.checkpoint_every = 10;
  c.train.batch_size = 8;
  c.shots = 4;
  c.data_seeds = {1};
  c.train_seeds = {1};
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

Corpus tiny_corpus(std::size_t per_class) {
  Corpus c;
  c.label_names = {"a", "b"};
  for (std::size_t k = 0; k < 2; ++k) {
    for (std::size_t i = 0; i < per_class; ++i) c.examples.push_back({"x" + std::to_string(k * 100 + i), "", k});
  }
  return c;
}

}  // namespace

TEST_CASE("synthetic corpora are seeded, balanced and labeled by their cue") {
  for (auto kind : {SynthTask::keyword, SynthTask::pair_agreement, SynthTask::topic, SynthTask::parity}) {
    CAPTURE(to_string(kind));
    SynthSpec spec;
    spec.task = kind;
    spec.classes = kind == SynthTask::topic ? 3 : 2;
    spec.examples = 60;
    const auto a = generate_synthetic(spec);
    const auto b = generate_synthetic(spec);
    REQUIRE(a.examples.size() == 60);
    std::map<std::size_t, std::size_t> hist;
    for (std::size_t i = 0; i < a.examples.size(); ++i) {
      CHECK(a.examples[i].text_a == b.examples[i].text_a);
      CHECK(a.examples[i].text_b == b.examples[i].text_b);
      hist[a.examples[i].label]++;
    }
    for (const auto& [label, n] : hist) CHECK(n == 60 / spec.classes);
    CHECK(a.pair == (kind == SynthTask::pair_agreement));
    spec.seed = 2;
    CHECK(generate_synthetic(spec).examples[0].text_a != a.examples[0].text_a);
  }
  SynthSpec parity;
  parity.task = SynthTask::parity;
  for (const auto& ex : generate_synthetic(parity).examples) {
    const auto words = split_words(ex.text_a);
    const auto ones = std::count(words.begin(), words.end(), "one");
    CHECK(static_cast<std::size_t>(ones % 2) == ex.label);
  }
  SynthSpec bad;
  bad.classes = 1;
  CHECK_THROWS_AS(bad.validate(), InputError);
}

TEST_CASE("default verbalizers have mixed lengths") {
  const auto words = default_verbalizer_words(2);
  CHECK(words[0].size() == 1);
  CHECK(words[1].size() == 3);
}

TEST_CASE("loaded task keeps test texts out of the pool") {
  const auto data = tiny_task();
  REQUIRE(data.test);
  std::set<std::string> pool;
  for (const auto& ex : data.pool.examples) pool.insert(ex.text_a);
  for (const auto& ex : data.test->examples) CHECK_FALSE(pool.contains(ex.text_a));
  CHECK(data.vocab.find("it"));
  CHECK(data.verbalizers.classes() == 2);
}

TEST_CASE("episode sampling") {
  const auto forced = tiny_corpus(2);
  const auto e = sample_episode(forced, nullptr, 1, 7);
  CHECK(e.train.size() == 2);
  CHECK(e.val.size() == 2);
  CHECK(e.test.empty());
  std::set<std::string> used;
  for (const auto& x : e.train) used.insert(x.text_a);
  for (const auto& x : e.val) used.insert(x.text_a);
  CHECK(used.size() == 4);

  const auto corpus = tiny_corpus(20);
  const auto a = sample_episode(corpus, nullptr, 4, 3);
  const auto b = sample_episode(corpus, nullptr, 4, 3);
  for (std::size_t i = 0; i < a.train.size(); ++i) CHECK(a.train[i].text_a == b.train[i].text_a);

  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto ep = sample_episode(corpus, nullptr, 4, seed);
    std::map<std::size_t, std::size_t> ht, hv;
    std::set<std::string> tr, va;
    for (const auto& x : ep.train) {
      ht[x.label]++;
      tr.insert(x.text_a);
    }
    for (const auto& x : ep.val) {
      hv[x.label]++;
      va.insert(x.text_a);
    }
    CHECK(ht[0] == 4);
    CHECK(ht[1] == 4);
    CHECK(hv[0] == 4);
    CHECK(hv[1] == 4);
    CHECK(ep.test.size() == 40 - 16);
    for (const auto& x : ep.test) {
      CHECK_FALSE(tr.contains(x.text_a));
      CHECK_FALSE(va.contains(x.text_a));
    }
    for (const auto& t : tr) CHECK_FALSE(va.contains(t));
  }

  auto thin = tiny_corpus(20);
  thin.examples.erase(std::remove_if(thin.examples.begin(), thin.examples.end(),
                                     [](const LabeledText& x) { return x.label == 1 && x.text_a != "x100"; }),
                      thin.examples.end());
  try {
    sample_episode(thin, nullptr, 4, 1);
    FAIL("expected an error");
  } catch (const InputError& err) {
    CHECK(std::string(err.what()).find("'b'") != std::string::npos);
  }
}

TEST_CASE("aggregate") {
  const auto a = aggregate({0.8, 0.9, 1.0});
  CHECK(a.mean == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(a.worst == 0.8);
  CHECK(a.std == doctest::Approx(0.1).epsilon(1e-14));
  CHECK(aggregate({0.7, 0.7, 0.7}).std == 0.0);
  const auto one = aggregate({0.42});
  CHECK(one.std == 0.0);
  CHECK(one.mean == 0.42);
  CHECK(one.worst == 0.42);
  const auto x = aggregate({0.1, 0.73, 0.35, 0.99, 0.5});
  const auto y = aggregate({0.99, 0.35, 0.1, 0.5, 0.73});
  CHECK(bit_equal(std::vector<double>{x.mean, x.std}, std::vector<double>{y.mean, y.std}));
}

TEST_CASE("single run experiment and seed-order invariance") {
  const auto data = tiny_task();
  auto config = quick_config(data);
  const auto single = run_experiment(config, data);
  REQUIRE(single.runs.size() == 1);
  CHECK(single.complete);
  CHECK(single.summary.mean == single.summary.worst);
  CHECK(single.summary.std == 0.0);

  config.data_seeds = {1, 2};
  config.train_seeds = {1, 2};
  const auto forward = run_experiment(config, data);
  config.data_seeds = {2, 1};
  config.train_seeds = {2, 1};
  const auto reversed = run_experiment(config, data);
  CHECK(forward.runs.size() == 4);
  CHECK(forward.summary.mean == reversed.summary.mean);
  CHECK(forward.summary.std == reversed.summary.std);
  CHECK(results_csv(forward) == results_csv(reversed));
}

TEST_CASE("failed runs are recorded and excluded") {
  const auto data = tiny_task();
  auto config = quick_config(data);
  config.shots = 1000;  // more than the pool holds
  const auto m = run_experiment(config, data);
  CHECK_FALSE(m.complete);
  CHECK_FALSE(m.runs.at(0).completed);
  CHECK_FALSE(m.runs.at(0).error.empty());
  CHECK(m.summary.count == 0);
  const auto csv = results_csv(m);
  CHECK(csv.find(",,") != std::string::npos);
}

TEST_CASE("results csv round trip reproduces aggregates bit for bit") {
  const auto data = tiny_task();
  auto config = quick_config(data);
  config.data_seeds = {1, 2, 3};
  config.train_seeds = {1, 2};
  const auto m = run_experiment(config, data);
  const auto csv = results_csv(m);
  CHECK(csv.substr(0, kCsvHeader.size()) == kCsvHeader);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);
  const auto again = aggregate_runs(parse_results_csv(csv), 6);
  CHECK(bit_equal(std::vector<double>{again.summary.mean, again.summary.worst, again.summary.std},
                  std::vector<double>{m.summary.mean, m.summary.worst, m.summary.std}));

  const auto dir = fs::temp_directory_path() / "perfect_harness_out";
  fs::remove_all(dir);
  write_experiment(dir.string(), m, config);
  CHECK(fs::exists(dir / "results.csv"));
  CHECK(fs::exists(dir / "runs" / "d1_t2.json"));
  const auto j = nlohmann::json::parse(slurp(dir / "aggregates.json"));
  const auto re = aggregate_runs(parse_results_csv(slurp(dir / "results.csv")), 6);
  CHECK(j["summary"]["mean"].get<double>() == re.summary.mean);
  CHECK(j["summary"]["std"].get<double>() == re.summary.std);
  CHECK(j["summary"]["std_divisor"] == "n-1");
  fs::remove_all(dir);
}

TEST_CASE("output directory resolution") {
  CHECK(output_dir("/x/y", "n") == "/x/y");
  setenv("PERFECT_OUTPUT_ROOT", "/tmp/root", 1);
  CHECK(output_dir("", "n") == "/tmp/root/n");
  unsetenv("PERFECT_OUTPUT_ROOT");
  CHECK(output_dir("", "n") == "perfect_runs/n");
}

TEST_CASE("configuration json") {
  const auto doc = nlohmann::json::parse(R"({
    "task": {"synthetic": {"task": "topic"}},
    "model": {"method": "bitfit_mte", "masks": 3, "encoder": {"hidden": 32}},
    "train": {"steps": 7, "loss": "cross_entropy"},
    "data_seeds": [4], "train_seeds": [5, 6]
  })");
  const auto c = experiment_from_json(doc);
  CHECK(c.task.synth->task == SynthTask::topic);
  CHECK(c.task.synth->classes == 3);
  CHECK(c.model.method == Method::bitfit_mte);
  CHECK(c.model.masks == 3);
  CHECK(c.model.encoder.hidden == 32);
  CHECK(c.train.steps == 7);
  CHECK(c.train.loss == LossKind::cross_entropy);
  CHECK(c.train_seeds == std::vector<std::uint64_t>{5, 6});
  const auto back = experiment_from_json(nlohmann::json::parse(experiment_to_json(c).dump()));
  CHECK(experiment_to_json(back) == experiment_to_json(c));

  CHECK_THROWS_AS(experiment_from_json(nlohmann::json::parse(R"({"modle": {}})")), InputError);
  CHECK_THROWS_AS(experiment_from_json(nlohmann::json::parse(R"({"model": {"masks": 0}})")), InputError);
  CHECK_THROWS_AS(experiment_from_json(nlohmann::json::parse(R"({"train": {"steps": "many"}})")), InputError);
}

TEST_CASE("efficiency reports") {
  const auto large = efficiency_report(ModelConfig{Method::perfect, [] {
                                                     EncoderConfig e = roberta_large_config();
                                                     return e;
                                                   }(),
                                                   AdapterConfig{64, 1e-2, true}},
                                       2);
  CHECK(large.params.backbone_total == 355412057);
  CHECK(large.expected_passes_per_query == 1.0);

  auto data = tiny_task();
  auto perfect_cfg = quick_config(data);
  const auto p = efficiency_report(perfect_cfg, data);
  CHECK(p.passes_per_query == 1.0);
  CHECK(p.activation_elements > 0);
  CHECK(p.mean_step_seconds > 0.0);

  auto pet_cfg = quick_config(data, Method::pet);
  const auto q = efficiency_report(pet_cfg, data);
  CHECK(q.expected_passes_per_query == 4.0);
  CHECK(q.passes_per_query == 4.0);

  auto ft_cfg = quick_config(data, Method::finetune);
  const auto f = efficiency_report(ft_cfg, data);
  CHECK(f.params.trainable_percent() == doctest::Approx(100.0));
}

TEST_CASE("ablation sweeps") {
  CHECK(default_sweep_values(Sweep::masks) == std::vector<std::string>{"1", "2", "5", "10"});
  CHECK(default_sweep_values(Sweep::sigma).size() == 4);
  const auto data = tiny_task();
  const auto base = quick_config(data);
  CHECK(apply_sweep_value(base, Sweep::masks, "5").model.masks == 5);
  CHECK(apply_sweep_value(base, Sweep::sigma, "1e-3").model.sigma == 1e-3);
  CHECK(apply_sweep_value(base, Sweep::loss, "cross_entropy").train.loss == LossKind::cross_entropy);
  CHECK(apply_sweep_value(base, Sweep::method, "finetune").train.lr_backbone == 1e-5);
  CHECK_THROWS_AS(apply_sweep_value(base, Sweep::masks, "zero"), InputError);

  const auto rows = run_ablation(base, data, Sweep::inference, default_sweep_values(Sweep::inference));
  CHECK(rows.size() == 3);
  const auto dir = fs::temp_directory_path() / "perfect_ablation_out";
  fs::remove_all(dir);
  write_ablation(dir.string(), Sweep::inference, rows, base);
  const auto csv = slurp(dir / "ablation.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
  CHECK(fs::exists(dir / "inference_prototypical" / "results.csv"));
  fs::remove_all(dir);
}
