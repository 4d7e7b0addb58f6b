#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "perfect/baselines.hpp"
#include "perfect/errors.hpp"
#include "perfect/gradcheck.hpp"
#include "perfect/perfect_head.hpp"
#include "support.hpp"

using namespace perfect;
using namespace perfect::testing;

namespace {

VerbalizerMap verbs(std::vector<std::vector<TokenId>> tokens) {
  VerbalizerMap v;
  for (std::size_t k = 0; k < tokens.size(); ++k) v.class_names.push_back("c" + std::to_string(k));
  v.tokens = std::move(tokens);
  return v;
}

std::vector<TokenId> random_sentence(Rng& rng, std::size_t vocab, std::size_t n) {
  std::vector<TokenId> s;
  for (std::size_t i = 0; i < n; ++i) s.push_back(static_cast<TokenId>(5 + rng.below(vocab - 5)));
  return s;
}

// Per-token log-softmax loop oracle for the multi-token PET margin loss.
double pet_loss_oracle(const Tensor& logits, const std::vector<std::size_t>& labels, const VerbalizerMap& v,
                       double margin) {
  const auto slots = v.max_length();
  const auto vocab = logits.cols();
  double total = 0;
  for (std::size_t e = 0; e < labels.size(); ++e) {
    std::vector<double> s(v.classes(), 0.0);
    for (std::size_t k = 0; k < v.classes(); ++k) {
      for (std::size_t j = 0; j < v.tokens[k].size(); ++j) {
        const auto row = e * slots + j;
        double mx = -1e300;
        for (std::size_t c = 0; c < vocab; ++c) mx = std::max(mx, logits.at(row, c));
        double z = 0;
        for (std::size_t c = 0; c < vocab; ++c) z += std::exp(logits.at(row, c) - mx);
        s[k] += logits.at(row, v.tokens[k][j]) - mx - std::log(z);
      }
    }
    for (std::size_t k = 0; k < v.classes(); ++k) {
      if (k != labels[e]) total += std::max(0.0, margin - s[labels[e]] + s[k]);
    }
  }
  return total / static_cast<double>(labels.size());
}

}  // namespace

TEST_CASE("CLS head logits") {
  Rng rng(1);
  const Encoder enc(tiny_encoder(20, 8, 1));
  const auto ex = plain_input(random_sentence(rng, 20, 4), {}, 16);
  const ClsHead zero{Tensor::zeros({3, 8}), Tensor::zeros({3})};
  const auto z = cls_finetune_logits(ex, enc, zero);
  CHECK(z.values()[0] == z.values()[1]);
  CHECK(z.values()[1] == z.values()[2]);

  // Weight row k aligned with the CLS hidden state gives class k the top logit.
  NoGradGuard guard;
  const auto h = enc.encode(ex.ids);
  std::vector<double> w(3 * 8, 0.0);
  for (std::size_t c = 0; c < 8; ++c) w[2 * 8 + c] = h.at(0, c);
  const ClsHead aligned{Tensor({3, 8}, w), Tensor::zeros({3})};
  const auto a = cls_finetune_logits(ex, enc, aligned);
  CHECK(a.values()[2] > a.values()[0]);
  CHECK(a.values()[2] > a.values()[1]);
}

TEST_CASE("CLS head gradient on the head and an attention matrix") {
  Rng rng(2);
  auto config = tiny_encoder(16, 4, 1);
  Encoder enc(config);
  auto head = ClsHead::random(2, 4, 0.5, rng);
  head.weight.set_requires_grad(true);
  head.bias.set_requires_grad(true);
  auto& query = enc.params().get("layer0.attention.query.weight");
  query.set_requires_grad(true);
  std::vector<MaskedExample> examples{plain_input(random_sentence(rng, 16, 3), {}, 12, 0),
                                      plain_input(random_sentence(rng, 16, 5), {}, 12, 1)};
  const auto batch = build_batch(examples, longest(examples));
  const std::vector<NamedTensor> params{{"cls.weight", head.weight}, {"cls.bias", head.bias}, {"query", query}};
  const auto report = finite_difference_check(
      [&] { return softmax_cross_entropy(cls_finetune_logits(batch, enc, head), batch.labels); }, params, 1e-5, 1e-4);
  CHECK(report.passed);
}

TEST_CASE("single-token PET probabilities") {
  Rng rng(3);
  auto config = tiny_encoder(20, 8, 1);
  Encoder enc(config);
  const auto ex = insert_masks(random_sentence(rng, 20, 4), {}, {MaskPlacement::single_sentence_suffix, 1}, 16);
  // Identical output rows for tokens 7 and 8.
  auto& table = enc.params().get("embeddings.token");
  for (std::size_t c = 0; c < 8; ++c) table.mutable_values()[8 * 8 + c] = table.values()[7 * 8 + c];
  const auto v = verbs({{7}, {8}, {11}});
  const auto p = pet_single_token_prob(ex, v, enc);
  CHECK(p.values()[0] == doctest::Approx(p.values()[1]).epsilon(1e-14));

  NoGradGuard guard;
  const auto h = enc.encode(ex.ids);
  const auto logits = enc.vocab_logits(gather_rows(h, ex.mask_positions));
  const auto probs = softmax_rows(logits);
  double total = 0;
  for (std::size_t c = 0; c < 20; ++c) total += probs.at(0, c);
  CHECK(total == doctest::Approx(1.0).epsilon(1e-13));
  for (std::size_t k = 0; k < 3; ++k) {
    CHECK(p.values()[k] == doctest::Approx(probs.at(0, v.tokens[k][0])).epsilon(1e-12));
  }
  const auto two = insert_masks(random_sentence(rng, 20, 2), {}, {MaskPlacement::single_sentence_suffix, 2}, 16);
  CHECK_THROWS_AS(pet_single_token_prob(two, v, enc), ContractError);
}

TEST_CASE("PET margin loss edge cases and loop oracle") {
  Rng rng(4);
  const auto one = verbs({{5}});
  CHECK(pet_margin_loss(Tensor::zeros({1, 10}), std::vector<std::size_t>{0}, one, 1.0).item() == 0.0);
  const auto flat = verbs({{5}, {6}, {7}, {8}});
  // Uniform logits: every class scores the same, so the loss is (K−1)·m.
  CHECK(pet_margin_loss(Tensor::zeros({1, 10}), std::vector<std::size_t>{2}, flat, 1.0).item() ==
        doctest::Approx(3.0));

  for (int trial = 0; trial < 100; ++trial) {
    const auto k = 2 + rng.below(3);
    std::vector<std::vector<TokenId>> tokens(k);
    for (auto& t : tokens) {
      const auto len = 1 + rng.below(3);
      for (std::size_t j = 0; j < len; ++j) t.push_back(static_cast<TokenId>(5 + rng.below(10)));
    }
    const auto v = verbs(tokens);
    const auto n = 1 + rng.below(3);
    const auto logits = random_tensor({n * v.max_length(), 15}, rng, 2.0);
    std::vector<std::size_t> labels(n);
    for (auto& y : labels) y = rng.below(k);
    CHECK(std::abs(pet_margin_loss(logits, labels, v, 1.0).item() - pet_loss_oracle(logits, labels, v, 1.0)) <=
          1e-10);
  }
}

TEST_CASE("PET training loss gradient") {
  Rng rng(5);
  auto config = tiny_encoder(16, 4, 1);
  Encoder enc(config);
  const auto v = verbs({{6}, {7, 8}});
  std::vector<MaskedExample> examples;
  for (std::size_t i = 0; i < 2; ++i) {
    examples.push_back(
        insert_masks(random_sentence(rng, 16, 3), {}, {MaskPlacement::single_sentence_suffix, 2}, 12, i));
  }
  const auto batch = build_batch(examples, longest(examples));
  for (auto& p : enc.params().items()) p.tensor.set_requires_grad(true);
  const std::vector<NamedTensor> params{{"embeddings.token", enc.params().get("embeddings.token")},
                                        {"ffn", enc.params().get("layer0.ffn.outer.weight")}};
  CHECK(finite_difference_check([&] { return pet_multitoken_train_loss(batch, enc, v, 1.0); }, params, 1e-5, 1e-4)
            .passed);
}

TEST_CASE("autoregressive decoding pass counts") {
  Rng rng(6);
  const Encoder enc(tiny_encoder(20, 8, 2));
  ClozeInput input{random_sentence(rng, 20, 4), {}, MaskPlacement::single_sentence_suffix, 16};

  const auto v13 = verbs({{5}, {6, 7, 8}});
  const auto r = pet_autoregressive_decode(input, v13, enc);
  CHECK(r.forward_passes == 4);
  enc.reset_forward_passes();
  pet_autoregressive_decode(input, v13, enc);
  CHECK(enc.forward_passes() == 4);

  for (int trial = 0; trial < 20; ++trial) {
    const auto k = 2 + rng.below(4);
    std::vector<std::vector<TokenId>> tokens(k);
    std::size_t total = 0;
    for (auto& t : tokens) {
      const auto len = 1 + rng.below(4);
      total += len;
      for (std::size_t j = 0; j < len; ++j) t.push_back(static_cast<TokenId>(5 + rng.below(15)));
    }
    const auto v = verbs(tokens);
    CHECK(pet_autoregressive_decode(input, v, enc).forward_passes == total);
  }

  // Single-token maps: K passes and the single-token argmax.
  const auto single = verbs({{9}, {10}, {11}});
  const auto d = pet_autoregressive_decode(input, single, enc);
  CHECK(d.forward_passes == 3);
  const auto ex = insert_masks(input.first, {}, {MaskPlacement::single_sentence_suffix, 1}, 16);
  const auto p = pet_single_token_prob(ex, single, enc);
  std::size_t best = 0;
  for (std::size_t k = 1; k < 3; ++k) {
    if (p.values()[k] > p.values()[best]) best = k;
  }
  CHECK(d.label == best);
  for (std::size_t k = 0; k < 3; ++k) CHECK(d.scores[k] == doctest::Approx(std::log(p.values()[k])).epsilon(1e-12));
}

TEST_CASE("length-normalized decoding divides by the verbalizer length") {
  Rng rng(7);
  const Encoder enc(tiny_encoder(20, 8, 1));
  ClozeInput input{random_sentence(rng, 20, 3), {}, MaskPlacement::single_sentence_suffix, 16};
  const auto v = verbs({{5}, {6, 7, 8}});
  const auto raw = pet_autoregressive_decode(input, v, enc);
  const auto norm = pet_autoregressive_decode(input, v, enc, true);
  CHECK(norm.scores[0] == doctest::Approx(raw.scores[0]));
  CHECK(norm.scores[1] == doctest::Approx(raw.scores[1] / 3.0));
}

TEST_CASE("soft prompt prepend and initialization") {
  Rng rng(8);
  const auto emb = random_tensor({4, 3}, rng);
  const SoftPrompt prompt{random_tensor({2, 3}, rng)};
  const auto out = soft_prompt_prepend(emb, prompt, 16);
  REQUIRE(out.rows() == 6);
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(out.at(0, c) == prompt.weights.at(0, c));
    CHECK(out.at(1, c) == prompt.weights.at(1, c));
    CHECK(out.at(5, c) == emb.at(3, c));
  }
  CHECK_THROWS(soft_prompt_prepend(emb, prompt, 5));

  const std::vector<std::string> texts{"a b c d e f g"};
  const auto vocab = Vocab::build(texts);
  const Encoder enc(tiny_encoder(vocab.size(), 4, 1));
  const auto p = SoftPrompt::from_vocabulary(enc, vocab, 4, 3, rng);
  CHECK(p.length() == 4);
  const auto& table = enc.output_embedding();
  for (std::size_t r = 0; r < 4; ++r) {
    bool found = false;
    for (TokenId id = Vocab::kSpecialCount; id < Vocab::kSpecialCount + 3; ++id) {
      bool same = true;
      for (std::size_t c = 0; c < 4; ++c) same = same && p.weights.at(r, c) == table.at(id, c);
      found = found || same;
    }
    CHECK(found);
  }
}

TEST_CASE("prompted encoding shifts mask rows by the prompt length") {
  Rng rng(9);
  const Encoder enc(tiny_encoder(20, 8, 1));
  const SoftPrompt prompt{random_tensor({3, 8}, rng)};
  const std::vector<MaskedExample> examples{
      insert_masks(random_sentence(rng, 20, 3), {}, {MaskPlacement::single_sentence_suffix, 2}, 12)};
  const auto batch = build_batch(examples, longest(examples));
  NoGradGuard guard;
  const auto hidden = enc.encode(batch, &prompt.weights);
  CHECK(hidden.rows() == 3 + batch.seq);
  const auto masks = mask_hidden_states(enc, batch, &prompt.weights);
  for (std::size_t c = 0; c < 8; ++c) CHECK(masks.at(0, c) == hidden.at(3 + examples[0].mask_positions[0], c));
}

TEST_CASE("verbalizer map json") {
  const std::vector<std::string> texts{"good bad very great"};
  const auto vocab = Vocab::build(texts);
  const std::vector<std::string> labels{"neg", "pos"};
  const auto v = VerbalizerMap::from_json(R"({"pos": ["very", "great"], "neg": ["bad"]})", vocab, labels);
  CHECK(v.tokens.at(0) == std::vector<TokenId>{vocab.id("bad")});
  CHECK(v.tokens.at(1).size() == 2);
  CHECK(v.total_length() == 3);
  CHECK(v.max_length() == 2);
  CHECK_FALSE(v.single_token());
  const auto back = VerbalizerMap::from_json(v.to_json(vocab), vocab, labels);
  CHECK(back.tokens == v.tokens);
  CHECK_THROWS_AS(VerbalizerMap::from_json(R"({"pos": ["good"]})", vocab, labels), InputError);
  CHECK_THROWS_AS(VerbalizerMap::from_json(R"({"pos": ["zzz"], "neg": ["bad"]})", vocab, labels), InputError);
}
