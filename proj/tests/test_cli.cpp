// Drives the perfect executable as a subprocess.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string output;
};

Result run(const std::string& args) {
  const std::string cmd = std::string(PERFECT_CLI) + " " + args + " 2>&1";
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) r.output.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::size_t lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

struct TempDir {
  fs::path path;
  TempDir() : path(fs::temp_directory_path() / "perfect_cli_test") {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

const char* kSmall = R"({"model": {"encoder": {"hidden": 8, "layers": 1, "heads": 2, "ffn_mult": 2, "max_seq": 24},
                                   "adapter": {"bottleneck": 4}},
                         "task": {"test_examples": 40},
                         "train": {"steps": 6, "checkpoint_every": 3, "batch_size": 8}, "shots": 4})";

}  // namespace

TEST_CASE("bad flags print usage and fail") {
  auto r = run("experiment --no-such-flag");
  CHECK(r.code != 0);
  CHECK(r.output.find("Usage") != std::string::npos);
  r = run("");
  CHECK(r.code != 0);
  r = run("ablate --sweep colour");
  CHECK(r.code != 0);
  r = run("experiment --data-seeds x");
  CHECK(r.code != 0);
  CHECK(run("--help").code == 0);
}

TEST_CASE("gen-synth is deterministic") {
  TempDir tmp;
  const auto a = tmp.path / "a.tsv", b = tmp.path / "b.tsv";
  REQUIRE(run("gen-synth --task parity --n 200 --out " + a.string()).code == 0);
  REQUIRE(run("gen-synth --task parity --n 200 --out " + b.string()).code == 0);
  CHECK(slurp(a) == slurp(b));
  CHECK(lines(slurp(a)) == 201);
}

TEST_CASE("experiment writes one row per seed pair") {
  TempDir tmp;
  const auto cfg = tmp.path / "c.json";
  std::ofstream(cfg) << kSmall;
  const auto out = tmp.path / "exp";
  const auto r = run("experiment --config " + cfg.string() + " --method perfect --data-seeds 5 --train-seeds 4 --out " +
                     out.string());
  INFO(r.output);
  REQUIRE(r.code == 0);
  CHECK(lines(slurp(out / "results.csv")) == 21);
  CHECK(fs::exists(out / "aggregates.json"));
  CHECK(fs::exists(out / "runs" / "d5_t4.json"));
}

TEST_CASE("output root from the environment") {
  TempDir tmp;
  const auto cfg = tmp.path / "c.json";
  std::ofstream(cfg) << kSmall;
  const std::string cmd = "env PERFECT_OUTPUT_ROOT=" + tmp.path.string() + " " + std::string(PERFECT_CLI) +
                          " experiment --config " + cfg.string() +
                          " --data-seeds 1 --train-seeds 1 --task topic > /dev/null 2>&1";
  REQUIRE(std::system(cmd.c_str()) == 0);
  CHECK(fs::exists(tmp.path / "experiment-topic-perfect" / "results.csv"));
}

TEST_CASE("ablate over mask counts gives four aggregate rows") {
  TempDir tmp;
  const auto cfg = tmp.path / "c.json";
  std::ofstream(cfg) << kSmall;
  const auto out = tmp.path / "abl";
  CHECK(run("ablate --config " + cfg.string() + " --values 1,2").code != 0);
  const auto ok = run("ablate --config " + cfg.string() + " --sweep masks --values 1,2,5,10 --out " + out.string());
  INFO(ok.output);
  REQUIRE(ok.code == 0);
  CHECK(lines(slurp(out / "ablation.csv")) == 5);
}

TEST_CASE("train and bench") {
  TempDir tmp;
  const auto cfg = tmp.path / "c.json";
  std::ofstream(cfg) << kSmall;
  const auto out = tmp.path / "train";
  const auto r = run("train --config " + cfg.string() + " --out " + out.string());
  INFO(r.output);
  REQUIRE(r.code == 0);
  CHECK(fs::exists(out / "model.json"));
  CHECK(fs::exists(out / "run.json"));
  const auto b = run("bench --shape roberta-large");
  REQUIRE(b.code == 0);
  const auto j = nlohmann::json::parse(b.output);
  CHECK(j["trainable_params"].get<double>() / 1e6 == doctest::Approx(3.28).epsilon(0.02));
}
