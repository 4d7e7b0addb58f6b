#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <cstddef>
#include <string>
#include <vector>

#include "perfect/harness.hpp"
#include "perfect/rng.hpp"
#include "perfect/tensor.hpp"

namespace perfect::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

inline std::vector<double> random_vector(std::size_t n, Rng& rng, double stddev = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return v;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

inline bool bit_equal(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::memcmp(&a[i], &b[i], sizeof(double)) != 0) return false;
  }
  return true;
}

// Small encoder for fast tests.
inline EncoderConfig tiny_encoder(std::size_t vocab = 40, std::size_t hidden = 8, std::size_t layers = 2) {
  EncoderConfig c;
  c.vocab_size = vocab;
  c.hidden = hidden;
  c.layers = layers;
  c.heads = 2;
  c.ffn_mult = 2;
  c.max_seq = 24;
  return c;
}

// Keyword task with a short pool; test corpus kept small.
inline TaskData tiny_task(SynthTask kind = SynthTask::keyword, std::size_t classes = 2, std::size_t examples = 80,
                          std::size_t test_examples = 40) {
  TaskSpec spec;
  SynthSpec synth;
  synth.task = kind;
  synth.classes = classes;
  synth.examples = examples;
  synth.length = 6;
  synth.distractors = 12;
  spec.synth = synth;
  spec.name = std::string(to_string(kind));
  spec.test_examples = test_examples;
  return load_task(spec);
}

inline TaskInfo info_of(const TaskData& data) {
  return {data.pool.classes(), data.pool.pair, data.pool.label_names, data.verbalizers};
}

inline ModelConfig tiny_model(Method method, const TaskData& data, std::size_t hidden = 8) {
  ModelConfig m;
  m.method = method;
  m.encoder = tiny_encoder(data.vocab.size(), hidden);
  m.adapter.bottleneck = 4;
  m.prompt_tokens = 3;
  return m;
}

}  // namespace perfect::testing
