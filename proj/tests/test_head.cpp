#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "perfect/errors.hpp"
#include "perfect/gradcheck.hpp"
#include "perfect/perfect_head.hpp"
#include "support.hpp"

using namespace perfect;
using namespace perfect::testing;

namespace {

LabelEmbedding make_labels(std::size_t k, std::size_t m, std::size_t h, std::vector<double> values) {
  return LabelEmbedding{Tensor({k, m, h}, std::move(values)), 0.0};
}

// (1/K) Σ_{k≠y} max(0, m − t_y + t_k)
double hinge_oracle(const std::vector<double>& t, std::size_t y, double m) {
  double s = 0;
  for (std::size_t k = 0; k < t.size(); ++k) {
    if (k != y) s += std::max(0.0, m - t[y] + t[k]);
  }
  return s / static_cast<double>(t.size());
}

std::vector<MaskedExample> random_examples(Rng& rng, std::size_t n, std::size_t classes, std::size_t masks,
                                           std::size_t vocab) {
  std::vector<MaskedExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<TokenId> s;
    const auto len = 1 + rng.below(5);
    for (std::size_t j = 0; j < len; ++j) s.push_back(static_cast<TokenId>(5 + rng.below(vocab - 5)));
    out.push_back(insert_masks(s, {}, {MaskPlacement::single_sentence_suffix, masks}, 16, i % classes));
  }
  return out;
}

// Mask rows of one example encoded alone, [M × H] flattened.
std::vector<double> solo_masks(const Encoder& enc, const MaskedExample& ex) {
  NoGradGuard guard;
  const auto h = enc.encode(ex.ids);
  std::vector<double> out;
  for (auto p : ex.mask_positions) {
    for (std::size_t c = 0; c < h.cols(); ++c) out.push_back(h.at(p, c));
  }
  return out;
}

}  // namespace

TEST_CASE("score_tokens geometry and loop oracle") {
  // Orthonormal rows: scoring row y of slot i gives a one-hot at y.
  auto labels = make_labels(2, 1, 2, {1, 0, 0, 1});
  const auto t = score_tokens(Tensor({1, 2}, {0, 1}), labels);
  CHECK(t.at(0, 0) == 0.0);
  CHECK(t.at(0, 1) == 1.0);
  const auto zero = score_tokens(Tensor({1, 2}, {3, 4}), make_labels(2, 1, 2, {0, 0, 0, 0}));
  CHECK(zero.at(0, 0) == 0.0);
  CHECK(zero.at(0, 1) == 0.0);

  Rng rng(1);
  const std::size_t k = 3, m = 2, h = 4;
  const auto l = LabelEmbedding::random(k, m, h, 1.0, rng);
  const auto hid = random_tensor({m, h}, rng);
  const auto s = score_tokens(hid, l);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t c = 0; c < k; ++c) {
      double ref = 0;
      for (std::size_t j = 0; j < h; ++j) ref += l.weights.values()[(c * m + i) * h + j] * hid.at(i, j);
      CHECK(s.at(i, c) == doctest::Approx(ref).epsilon(1e-14));
    }
  }
}

TEST_CASE("hinge loss values") {
  CHECK(hinge_loss(std::vector<double>{3, 1}, 0, 1.0) == 0.0);
  CHECK(hinge_loss(std::vector<double>{0, 0, 0}, 1, 1.0) == doctest::Approx(2.0 / 3.0));
  CHECK(hinge_loss(std::vector<double>{0.5, 1}, 0, 1.0) == doctest::Approx(0.75));
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const auto k = 2 + rng.below(4);
    const auto t = random_vector(k, rng);
    const auto y = rng.below(k);
    CHECK(std::abs(hinge_loss(t, y, 1.0) - hinge_oracle(t, y, 1.0)) <= 1e-10);
  }
}

TEST_CASE("total loss reductions") {
  Rng rng(3);
  const auto l = LabelEmbedding::random(3, 1, 4, 1.0, rng);
  const auto h1 = random_tensor({1, 4}, rng);
  const std::vector<std::size_t> y1{2};
  const auto s = score_tokens(h1, l);
  CHECK(total_loss(h1, y1, l, 1.0).item() ==
        doctest::Approx(hinge_loss(std::vector<double>(s.values().begin(), s.values().end()), 2, 1.0)));

  const auto l2 = LabelEmbedding::random(3, 2, 4, 1.0, rng);
  const auto h = random_tensor({4, 4}, rng);  // two examples, two slots
  const std::vector<std::size_t> y{0, 2};
  const auto doubled = concat_rows(h, h);
  const std::vector<std::size_t> yy{0, 2, 0, 2};
  CHECK(total_loss(doubled, yy, l2, 1.0).item() == doctest::Approx(total_loss(h, y, l2, 1.0).item()).epsilon(1e-14));
  CHECK_THROWS(total_loss(h, std::vector<std::size_t>{0}, l2, 1.0));
}

TEST_CASE("total loss and cross entropy against triple loops") {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const auto k = 2 + rng.below(4), m = 1 + rng.below(3), h = 2 + rng.below(6), n = 1 + rng.below(4);
    const auto l = LabelEmbedding::random(k, m, h, 1.0, rng);
    const auto hid = random_tensor({n * m, h}, rng);
    std::vector<std::size_t> labels(n);
    for (auto& v : labels) v = rng.below(k);
    double hinge = 0, ce = 0;
    for (std::size_t e = 0; e < n; ++e) {
      for (std::size_t i = 0; i < m; ++i) {
        std::vector<double> t(k);
        for (std::size_t c = 0; c < k; ++c) {
          for (std::size_t j = 0; j < h; ++j) t[c] += l.weights.values()[(c * m + i) * h + j] * hid.at(e * m + i, j);
        }
        hinge += hinge_oracle(t, labels[e], 1.0);
        double z = 0;
        for (double v : t) z += std::exp(v);
        ce += std::log(z) - t[labels[e]];
      }
    }
    const double count = static_cast<double>(n * m);
    CHECK(std::abs(total_loss(hid, labels, l, 1.0).item() - hinge / count) <= 1e-10);
    CHECK(std::abs(cross_entropy_total_loss(hid, labels, l).item() - ce / count) <= 1e-10);
  }
}

TEST_CASE("cross entropy edge values") {
  const auto zeros = make_labels(2, 1, 2, {0, 0, 0, 0});
  const std::vector<std::size_t> y{0};
  CHECK(cross_entropy_total_loss(Tensor({1, 2}, {1, 1}), y, zeros).item() == doctest::Approx(std::log(2.0)));
  const auto sharp = make_labels(2, 1, 1, {1, 0});
  CHECK(cross_entropy_total_loss(Tensor({1, 1}, {60}), y, sharp).item() < 1e-20);
}

TEST_CASE("total loss gradient") {
  Rng rng(5);
  auto l = LabelEmbedding::random(3, 2, 4, 1.0, rng);
  l.weights.set_requires_grad(true);
  auto hid = random_tensor({6, 4}, rng, 1.0, true);
  const std::vector<std::size_t> y{1, 0, 2};
  const std::vector<NamedTensor> params{{"label_embedding", l.weights}, {"hidden", hid}};
  CHECK(finite_difference_check([&] { return total_loss(hid, y, l, 1.0); }, params, 1e-6, 1e-4).passed);
  CHECK(finite_difference_check([&] { return cross_entropy_total_loss(hid, y, l); }, params, 1e-5, 1e-4).passed);
}

TEST_CASE("prototype means") {
  // One sample per class.
  const std::vector<double> one{1, 2, 3, 4};
  const std::vector<std::size_t> labels{0, 1};
  const auto bank = prototypes_from_embeddings(one, labels, 2, 1, 2);
  CHECK(bank.centroid(0, 0)[0] == 1.0);
  CHECK(bank.centroid(0, 1)[1] == 4.0);
  const std::vector<double> two{1, 3, 3, 5};
  const std::vector<std::size_t> same{0, 0};
  const auto mean = prototypes_from_embeddings(two, same, 1, 1, 2);
  CHECK(mean.centroid(0, 0)[0] == 2.0);
  CHECK(mean.centroid(0, 0)[1] == 4.0);
  CHECK_THROWS(prototypes_from_embeddings(two, same, 2, 1, 2));
}

TEST_CASE("compute_prototypes matches an accumulate-then-divide loop") {
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const auto k = 2 + rng.below(4), m = 1 + rng.below(3);
    auto config = tiny_encoder(20, 8, 1);
    config.init_seed = 100 + static_cast<std::uint64_t>(trial);
    const Encoder enc(config);
    const auto train = random_examples(rng, 3 * k, k, m, 20);
    const auto bank = compute_prototypes(enc, train, k);
    std::vector<double> sums(m * k * 8, 0.0);
    std::vector<double> counts(k, 0.0);
    for (const auto& ex : train) {
      const auto rows = solo_masks(enc, ex);
      counts[ex.label] += 1;
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t c = 0; c < 8; ++c) sums[(i * k + ex.label) * 8 + c] += rows[i * 8 + c];
      }
    }
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t y = 0; y < k; ++y) {
        for (std::size_t c = 0; c < 8; ++c) {
          CHECK(std::abs(bank.centroid(i, y)[c] - sums[(i * k + y) * 8 + c] / counts[y]) <= 1e-12);
        }
      }
    }
  }
}

TEST_CASE("nearest prototype decisions") {
  PrototypeBank bank{1, 2, 2, {0, 0, 5, 5}, {1, 1}};
  CHECK(nearest_prototype(std::vector<double>{5, 5}, bank) == 1);
  CHECK(nearest_prototype(std::vector<double>{0, 0}, bank) == 0);
  // M=2, squared distances A: (4, 0), B: (1, 9) → A.
  PrototypeBank two{2, 2, 1, {2, 1, 0, 3}, {1, 1}};
  CHECK(nearest_prototype(std::vector<double>{0, 0}, two) == 0);
}

TEST_CASE("prototypical rule equals the exp(-d) argmax formula") {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const auto k = 2 + rng.below(4), m = 1 + rng.below(3), h = 1 + rng.below(8);
    PrototypeBank bank{m, k, h, random_vector(m * k * h, rng), std::vector<std::size_t>(k, 1)};
    const auto q = random_vector(m * h, rng);
    std::size_t best = 0;
    double best_score = -1.0;
    for (std::size_t y = 0; y < k; ++y) {
      double score = 0;
      for (std::size_t i = 0; i < m; ++i) {
        double d = 0;
        for (std::size_t c = 0; c < h; ++c) {
          const double diff = q[i * h + c] - bank.centroid(i, y)[c];
          d += diff * diff;
        }
        score = std::max(score, std::exp(-d));
      }
      if (score > best_score) {
        best_score = score;
        best = y;
      }
    }
    CHECK(nearest_prototype(q, bank) == best);
  }
}

TEST_CASE("label embedding and training objective rules") {
  auto l = make_labels(2, 2, 1, {0, 0, 4, 4});  // class 0 at 0, class 1 at 4
  CHECK(nearest_label_embedding(std::vector<double>{3.5, 3.0}, l) == 1);
  CHECK(nearest_label_embedding(std::vector<double>{0.5, 9.0}, l) == 0);
  CHECK(best_mean_score(std::vector<double>{1.0, 1.0}, l) == 1);
  CHECK(best_mean_score(std::vector<double>{-1.0, -1.0}, l) == 0);
}

TEST_CASE("batched inference agrees with per-query classifiers") {
  Rng rng(8);
  const std::size_t k = 3, m = 2;
  auto config = tiny_encoder(24, 8, 2);
  const Encoder enc(config);
  const auto train = random_examples(rng, 9, k, m, 24);
  const auto queries = random_examples(rng, 12, k, m, 24);
  const auto labels = LabelEmbedding::random(k, m, 8, 0.5, rng);
  const auto bank = compute_prototypes(enc, train, k);
  const auto proto = classify_all(queries, enc, InferenceMode::prototypical, labels, &bank);
  const auto emb = classify_all(queries, enc, InferenceMode::label_embedding, labels, nullptr);
  const auto obj = classify_all(queries, enc, InferenceMode::training_objective, labels, nullptr);
  for (std::size_t i = 0; i < queries.size(); ++i) {
    CHECK(proto[i] == classify_prototypical(queries[i], enc, bank));
    CHECK(emb[i] == classify_label_embedding(queries[i], enc, labels));
    CHECK(obj[i] == classify_training_objective(queries[i], enc, labels));
    CHECK(proto[i] == nearest_prototype(solo_masks(enc, queries[i]), bank));
  }
  CHECK_THROWS(classify_all(queries, enc, InferenceMode::prototypical, labels, nullptr));
}

TEST_CASE("label embedding initializations") {
  Rng rng(9);
  const auto l = LabelEmbedding::random(50, 4, 10, 1e-2, rng);
  double ss = 0;
  for (double v : l.weights.values()) ss += v * v;
  CHECK(std::sqrt(ss / 2000.0) == doctest::Approx(1e-2).epsilon(0.1));

  const auto table = random_tensor({10, 3}, rng);
  const std::vector<std::vector<TokenId>> verbs{{5}, {6, 7, 8}};
  const auto v = LabelEmbedding::from_verbalizers(table, verbs, 3);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(v.weights.values()[(0 * 3 + i) * 3 + c] == table.at(5, c));
      CHECK(v.weights.values()[(1 * 3 + i) * 3 + c] == table.at(verbs[1][i], c));
    }
  }
}

TEST_CASE("mode names round trip") {
  for (auto mode : {InferenceMode::prototypical, InferenceMode::label_embedding, InferenceMode::training_objective}) {
    CHECK(parse_inference_mode(to_string(mode)) == mode);
  }
  CHECK(parse_loss_kind("cross_entropy") == LossKind::cross_entropy);
  CHECK_THROWS_AS(parse_loss_kind("nope"), InputError);
}
