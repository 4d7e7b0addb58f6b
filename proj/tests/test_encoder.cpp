#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "perfect/encoder.hpp"
#include "perfect/errors.hpp"
#include "perfect/gradcheck.hpp"
#include "support.hpp"

using namespace perfect;
using namespace perfect::testing;

namespace {

Batch random_batch(Rng& rng, std::size_t vocab, std::size_t size, std::size_t seq) {
  std::vector<MaskedExample> examples;
  for (std::size_t b = 0; b < size; ++b) {
    std::vector<TokenId> s;
    const auto n = 1 + rng.below(seq - 4);
    for (std::size_t i = 0; i < n; ++i) s.push_back(static_cast<TokenId>(5 + rng.below(vocab - 5)));
    examples.push_back(insert_masks(s, {}, {MaskPlacement::single_sentence_suffix, 2}, seq));
  }
  return build_batch(examples, longest(examples));
}

std::vector<double> copy(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

TEST_CASE("adapter with zero up-projection is the identity") {
  Rng rng(1);
  const auto x = random_tensor({5, 8}, rng);
  const AdapterWeights a{random_tensor({8, 3}, rng), random_tensor({3}, rng), Tensor::zeros({3, 8}),
                         Tensor::zeros({8})};
  CHECK(bit_equal(apply_adapter(x, a).values(), x.values()));
}

TEST_CASE("adapter with identity projections gives GeLU(x) + x") {
  Rng rng(2);
  const auto x = random_tensor({3, 4}, rng);
  std::vector<double> eye(16, 0.0);
  for (std::size_t i = 0; i < 4; ++i) eye[i * 4 + i] = 1.0;
  const AdapterWeights a{Tensor({4, 4}, eye), Tensor::zeros({4}), Tensor({4, 4}, eye), Tensor::zeros({4})};
  const auto y = apply_adapter(x, a);
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(y.values()[i] == doctest::Approx(gelu_value(x.values()[i]) + x.values()[i]).epsilon(1e-14));
  }
}

TEST_CASE("adapter gradient") {
  Rng rng(3);
  const auto x = random_tensor({4, 8}, rng);
  AdapterWeights a{random_tensor({8, 2}, rng, 0.5, true), random_tensor({2}, rng, 0.1, true),
                   random_tensor({2, 8}, rng, 0.5, true), random_tensor({8}, rng, 0.1, true)};
  const auto w = random_tensor({4, 8}, rng);
  const std::vector<NamedTensor> params{
      {"down.weight", a.down_weight}, {"down.bias", a.down_bias}, {"up.weight", a.up_weight}, {"up.bias", a.up_bias}};
  const auto report = finite_difference_check([&] { return sum(mul(apply_adapter(x, a), w)); }, params, 1e-5, 1e-4);
  CHECK(report.passed);
}

TEST_CASE("zero-weight layer collapses to normalized embeddings") {
  auto config = tiny_encoder(20, 8, 1);
  Encoder enc(config);
  for (auto& p : enc.params().items()) {
    if (p.name.starts_with("layer0.") && !p.name.ends_with(".gain")) {
      for (auto& v : p.tensor.mutable_values()) v = 0.0;
    }
  }
  const std::vector<TokenId> ids{2, 7, 9, 3};
  NoGradGuard guard;
  const auto out = enc.encode(ids);
  const auto& tok = enc.params().get("embeddings.token");
  const auto& pos = enc.params().get("embeddings.position");
  const auto& seg = enc.params().get("embeddings.segment");
  const auto& gain = enc.params().get("embeddings.norm.gain");
  const auto& bias = enc.params().get("embeddings.norm.bias");
  const auto h = config.hidden;
  for (std::size_t t = 0; t < ids.size(); ++t) {
    std::vector<double> e(h);
    double mu = 0;
    for (std::size_t c = 0; c < h; ++c) {
      e[c] = tok.at(ids[t], c) + pos.at(t, c) + seg.at(0, c);
      mu += e[c] / static_cast<double>(h);
    }
    double var = 0;
    for (double v : e) var += (v - mu) * (v - mu) / static_cast<double>(h);
    for (std::size_t c = 0; c < h; ++c) {
      const double ln = (e[c] - mu) / std::sqrt(var + kLayerNormEps) * gain.values()[c] + bias.values()[c];
      CHECK(out.at(t, c) == doctest::Approx(ln).epsilon(1e-4));
    }
  }
}

TEST_CASE("zero-init adapters leave the encoder output unchanged") {
  auto plain = tiny_encoder(30, 8, 2);
  auto with = plain;
  with.adapter = AdapterConfig{4, 0.05, true};
  with.adapter_placement = AdapterPlacement::after_attn_and_ffn;
  const Encoder a(plain), b(with);
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const auto batch = random_batch(rng, 30, 3, 12);
    NoGradGuard guard;
    CHECK(bit_equal(a.encode(batch).values(), b.encode(batch).values()));
  }
}

TEST_CASE("perturbing adapter or attention weights changes the output") {
  auto config = tiny_encoder(30, 8, 2);
  config.adapter = AdapterConfig{4, 0.05, true};
  Encoder enc(config);
  Rng rng(5);
  const auto batch = random_batch(rng, 30, 2, 10);
  NoGradGuard guard;
  const auto base = copy(enc.encode(batch));
  enc.params().get("layer1.ffn_adapter.up.weight").mutable_values()[0] += 0.5;
  const auto adapted = copy(enc.encode(batch));
  CHECK(max_abs_diff(base, adapted) > 1e-6);
  enc.params().get("layer0.attention.query.weight").mutable_values()[3] += 0.5;
  CHECK(max_abs_diff(adapted, copy(enc.encode(batch))) > 1e-6);
}

TEST_CASE("encoder input validation") {
  const Encoder enc(tiny_encoder(20, 8, 1));
  const std::vector<TokenId> bad{2, 25, 3};
  CHECK_THROWS_AS(enc.encode(bad), InputError);
  std::vector<TokenId> longer(30, 7);
  std::vector<std::string> warnings;
  NoGradGuard guard;
  const auto out = enc.encode(longer, &warnings);
  CHECK(out.rows() == 24);
  CHECK(warnings.size() == 1);
}

TEST_CASE("mlm logits") {
  std::vector<double> w(5 * 3, 0.0);
  for (std::size_t i = 0; i < 3; ++i) w[i * 3 + i] = 1.0;
  const Tensor emb({5, 3}, w);
  const auto logits = mlm_logits(Tensor({1, 3}, {0, 1, 0}), emb);
  CHECK(logits.at(0, 1) == 1.0);
  CHECK(logits.at(0, 0) == 0.0);
  CHECK(logits.at(0, 4) == 0.0);

  Rng rng(6);
  const Encoder enc(tiny_encoder(40, 8, 1));
  const auto h = random_tensor({3, 8}, rng);
  const auto full = enc.vocab_logits(h);
  const auto probs = softmax_rows(full);
  const auto& table = enc.output_embedding();
  for (std::size_t r = 0; r < 3; ++r) {
    double total = 0;
    std::size_t best = 0;
    double best_score = -1e300;
    for (std::size_t v = 0; v < 40; ++v) {
      total += probs.at(r, v);
      double s = 0;
      for (std::size_t c = 0; c < 8; ++c) s += h.at(r, c) * table.at(v, c);
      if (s > best_score) {
        best_score = s;
        best = v;
      }
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-13));
    std::size_t argmax = 0;
    for (std::size_t v = 1; v < 40; ++v) {
      if (full.at(r, v) > full.at(r, argmax)) argmax = v;
    }
    CHECK(argmax == best);
  }
}

TEST_CASE("closed-form parameter counts match the built encoder") {
  for (bool mlm : {false, true}) {
    for (auto placement : {AdapterPlacement::after_ffn_only, AdapterPlacement::after_attn_and_ffn}) {
      auto config = tiny_encoder(30, 8, 2);
      config.mlm_head_transform = mlm;
      config.adapter = AdapterConfig{4, 0.01, true};
      config.adapter_placement = placement;
      const Encoder enc(config);
      const auto counts = count_encoder_params(config);
      CHECK(counts.total() == enc.params().element_count());
    }
  }
}

TEST_CASE("full encoder gradient on a small batch") {
  auto config = tiny_encoder(16, 4, 1);
  config.adapter = AdapterConfig{2, 0.3, false};
  Encoder enc(config);
  for (auto& p : enc.params().items()) p.tensor.set_requires_grad(true);
  Rng rng(7);
  const auto batch = random_batch(rng, 16, 2, 8);
  const auto w = random_tensor({batch.size * batch.seq, 4}, rng);
  const auto report =
      finite_difference_check([&] { return sum(mul(enc.encode(batch), w)); }, enc.params().items(), 1e-5, 1e-4);
  for (const auto& e : report.entries) INFO(e.name << " " << e.max_rel_error);
  CHECK(report.passed);
}
