#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "regenlab/errors.h"
#include "regenlab/rng.h"
#include "regenlab/scoring.h"

using namespace regenlab;
using namespace regenlab::scoring;

namespace {

// Identity-encoder dictionary: features are the input coordinates, so the
// cached activations themselves are the feature activations (after ReLU).
sae::SaeDictionary identity_sae(std::size_t d, int layer = 0, int generation = 1) {
  sae::SaeDictionary s;
  s.config.d_in = d;
  s.config.n_features = d;
  s.layer = layer;
  s.generation = generation;
  s.ablated.assign(d, 0);
  std::vector<double> eye(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) eye[i * d + i] = 1.0;
  s.w_enc = Tensor::from_data({d, d}, eye);
  s.b_enc = Tensor::zeros({d});
  s.w_dec = Tensor::from_data({d, d}, eye);
  s.b_out = Tensor::zeros({d});
  return s;
}

sae::SaeDictionary random_sae(Rng& rng, std::size_t d, std::size_t f, int layer = 0,
                              int generation = 1) {
  sae::SaeDictionary s;
  s.config.d_in = d;
  s.config.n_features = f;
  s.layer = layer;
  s.generation = generation;
  s.ablated.assign(f, 0);
  s.w_enc = Tensor::randn({f, d}, rng, 0.8);
  s.b_enc = Tensor::randn({f}, rng, 0.2);
  s.w_dec = Tensor::randn({f, d}, rng, 0.5);
  s.b_out = Tensor::randn({d}, rng, 0.1);
  return s;
}

}  // namespace

TEST_CASE("score arithmetic follows the ratio definition") {
  const std::size_t d = 4;
  auto s = identity_sae(d);
  // Feature 1: deception max 5.0, truth mean 0.5.
  auto truth = Tensor::from_data({2, d}, {0.0, 0.4, 0.0, 0.0,
                                          0.0, 0.6, 0.0, 0.0});
  auto dec = Tensor::from_data({2, d}, {0.0, 5.0, 0.0, 0.0,
                                        0.0, 2.0, 0.0, 0.0});
  AblationLedger empty;
  const auto table = feature_scores(s, truth, dec, empty, 1e-6);
  const auto& row = table.rows[1];
  CHECK(row.max_deception == 5.0);
  CHECK(row.mean_truth == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(row.score == 5.0 / (0.5 + 1e-6));
  CHECK(std::abs(row.score - 10.0) / 10.0 < 1e-5);
}

TEST_CASE("a feature that never activates scores zero") {
  auto s = identity_sae(3);
  auto truth = Tensor::from_data({2, 3}, {0, 0, 1, 0, 0, 2});
  auto dec = Tensor::from_data({2, 3}, {0, 0, 3, 0, 0, 4});
  AblationLedger empty;
  const auto table = feature_scores(s, truth, dec, empty, 1e-6);
  CHECK(table.rows[0].score == 0.0);
  CHECK(table.rows[1].score == 0.0);
  CHECK(table.rows[2].score > 0.0);
}

TEST_CASE("ledger-masked features score zero despite huge activations") {
  auto s = identity_sae(3, /*layer=*/2, /*generation=*/4);
  auto truth = Tensor::from_data({1, 3}, {0.1, 1000.0, 0.1});
  auto dec = Tensor::from_data({1, 3}, {0.1, 9999.0, 0.1});
  AblationLedger ledger;
  ledger.add({3, 2, 1, 4, {0.0, 1.0, 0.0}});
  const auto table = feature_scores(s, truth, dec, ledger, 1e-6);
  CHECK(table.rows[1].masked);
  CHECK(table.rows[1].score == 0.0);
  CHECK(table.rows[1].max_deception == 0.0);
  CHECK_FALSE(table.rows[0].masked);

  // An entry for a different dictionary generation does not mask by index.
  AblationLedger other;
  other.add({1, 2, 1, 3, {0.0, 1.0, 0.0}});
  const auto table2 = feature_scores(s, truth, dec, other, 1e-6);
  CHECK_FALSE(table2.rows[1].masked);
}

TEST_CASE("score table equals the naive per-feature loop oracle exactly") {
  Rng rng(500);
  const std::size_t d = 6, f = 24, nt = 37, nd = 29;
  auto s = random_sae(rng, d, f);
  auto truth = Tensor::randn({nt, d}, rng, 1.3);
  auto dec = Tensor::randn({nd, d}, rng, 1.1);
  AblationLedger ledger;
  ledger.add({1, 0, 5, 1, std::vector<double>(d, 0.0)});
  ledger.add({1, 0, 17, 1, std::vector<double>(d, 0.0)});
  const double eps = 1e-6;
  const auto table = feature_scores(s, truth, dec, ledger, eps);

  // Oracle: one feature-activation pass, then an independent per-feature loop
  // over the raw activation values for max / mean / ratio.
  NoGradGuard ng;
  auto encode_rows = [&](const Tensor& x) {
    const auto acts_tensor = sae::encode(s, x);
    std::vector<std::vector<double>> acts;
    for (std::size_t r = 0; r < x.rows(); ++r) {
      std::vector<double> a(f);
      for (std::size_t j = 0; j < f; ++j) a[j] = acts_tensor.at(r, j);
      acts.push_back(std::move(a));
    }
    return acts;
  };
  const auto at = encode_rows(truth);
  const auto ad = encode_rows(dec);
  for (std::size_t j = 0; j < f; ++j) {
    if (j == 5 || j == 17) {
      CHECK(table.rows[j].masked);
      CHECK(table.rows[j].score == 0.0);
      continue;
    }
    double mx = 0.0;
    for (const auto& row : ad) mx = std::max(mx, row[j]);
    double mean = 0.0;
    for (const auto& row : at) mean += row[j];
    mean /= static_cast<double>(nt);
    const double score = mx > 0.0 ? mx / (mean + eps) : 0.0;
    CHECK(table.rows[j].max_deception == mx);
    CHECK(table.rows[j].mean_truth == mean);
    CHECK(table.rows[j].score == score);
  }

  CHECK_THROWS_AS(feature_scores(s, Tensor::zeros({0, d}), dec, ledger, eps), ContractError);
}

TEST_CASE("rank_candidates ordering and exclusions") {
  FeatureScoreTable table;
  table.layer = 0;
  table.generation = 1;
  table.rows.resize(4);
  for (auto& r : table.rows) r.score = 2.0;
  AblationLedger empty;
  CHECK(rank_candidates(table, empty) == std::vector<std::size_t>{0, 1, 2, 3});

  table.rows[2].score = 9.0;
  table.rows[1].masked = true;
  CHECK(rank_candidates(table, empty) == std::vector<std::size_t>{2, 0, 3});

  AblationLedger ledger;
  ledger.add({1, 0, 0, 1, {1.0}});
  CHECK(rank_candidates(table, ledger) == std::vector<std::size_t>{2, 3});

  FeatureScoreTable single;
  single.layer = 0;
  single.generation = 1;
  single.rows.resize(1);
  single.rows[0].score = 1.0;
  CHECK(rank_candidates(single, empty) == std::vector<std::size_t>{0});
}

TEST_CASE("rank_candidates matches a comparison-sort oracle on random tables") {
  Rng rng(271828);
  for (int trial = 0; trial < 25; ++trial) {
    FeatureScoreTable table;
    table.layer = 0;
    table.generation = 1;
    table.rows.resize(30);
    for (auto& r : table.rows) {
      r.score = std::round(rng.uniform(0, 5) * 4.0) / 4.0;  // force ties
      r.masked = rng.uniform() < 0.2;
      if (r.masked) r.score = 0.0;
    }
    AblationLedger empty;
    const auto got = rank_candidates(table, empty);

    std::vector<std::size_t> want;
    for (std::size_t i = 0; i < table.rows.size(); ++i)
      if (!table.rows[i].masked) want.push_back(i);
    std::sort(want.begin(), want.end(), [&](std::size_t a, std::size_t b) {
      if (table.rows[a].score != table.rows[b].score)
        return table.rows[a].score > table.rows[b].score;
      return a < b;
    });
    CHECK(got == want);
  }
}

TEST_CASE("aggregate score: masked, top-1 and brute force") {
  FeatureScoreTable table;
  table.rows.resize(5);
  for (auto& r : table.rows) {
    r.masked = true;
    r.score = 0.0;
  }
  CHECK(aggregate_deception_score(table, 10) == 0.0);

  table.rows[3].masked = false;
  table.rows[3].score = 7.5;
  CHECK(aggregate_deception_score(table, 1) == 7.5);

  Rng rng(11);
  FeatureScoreTable t2;
  t2.rows.resize(40);
  for (auto& r : t2.rows) r.score = rng.uniform(0, 100);
  const std::size_t m = 10;
  std::vector<double> scores;
  for (const auto& r : t2.rows) scores.push_back(r.score);
  std::sort(scores.rbegin(), scores.rend());
  double want = 0.0;
  for (std::size_t i = 0; i < m; ++i) want += scores[i];
  want /= m;
  CHECK(aggregate_deception_score(t2, m) == doctest::Approx(want).epsilon(1e-15));
}

TEST_CASE("mask soundness: ledger equals hard-zeroed encoder rows") {
  Rng rng(90210);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t d = 5, f = 20;
    auto s = random_sae(rng, d, f, /*layer=*/1, /*generation=*/trial + 1);
    auto truth = Tensor::randn({23, d}, rng);
    auto dec = Tensor::randn({19, d}, rng);

    AblationLedger ledger;
    std::vector<std::size_t> masked;
    for (std::size_t j = 0; j < f; ++j) {
      if (rng.uniform() < 0.3) {
        masked.push_back(j);
        ledger.add({1, 1, j, trial + 1, std::vector<double>(d, 0.0)});
      }
    }

    auto zeroed = s.clone();
    {
      auto enc = zeroed.w_enc.mutable_data();
      auto be = zeroed.b_enc.mutable_data();
      for (std::size_t j : masked) {
        std::fill(enc.begin() + j * d, enc.begin() + (j + 1) * d, 0.0);
        be[j] = 0.0;
      }
    }
    AblationLedger empty;
    const auto with_ledger = feature_scores(s, truth, dec, ledger, 1e-6);
    const auto with_zeroed = feature_scores(zeroed, truth, dec, empty, 1e-6);
    for (std::size_t j = 0; j < f; ++j) {
      CHECK(with_ledger.rows[j].score == with_zeroed.rows[j].score);
      CHECK(with_ledger.rows[j].max_deception == with_zeroed.rows[j].max_deception);
      CHECK(with_ledger.rows[j].mean_truth == with_zeroed.rows[j].mean_truth);
    }
  }
}

TEST_CASE("ranking is invariant under uniform positive rescaling at eps=0") {
  Rng rng(314);
  const std::size_t d = 6, f = 18;
  auto s = random_sae(rng, d, f);
  // Zero encoder bias makes encoding positively homogeneous.
  for (auto& b : s.b_enc.mutable_data()) b = 0.0;

  auto truth = Tensor::randn({31, d}, rng);
  auto dec = Tensor::randn({27, d}, rng);
  AblationLedger empty;
  const auto base = rank_candidates(feature_scores(s, truth, dec, empty, 0.0), empty);

  for (double c : {0.25, 3.0, 17.5}) {
    auto truth_scaled = truth.clone();
    for (auto& v : truth_scaled.mutable_data()) v *= c;
    auto dec_scaled = dec.clone();
    for (auto& v : dec_scaled.mutable_data()) v *= c;
    const auto scaled = rank_candidates(feature_scores(s, truth_scaled, dec_scaled, empty, 0.0),
                                        empty);
    CHECK(scaled == base);
  }
}

TEST_CASE("deception rate over hand-built models and examples") {
  // A model whose logits reduce to the unembedding bias emits one constant
  // token; point that at the shared foil or away from it.
  lm::TransformerConfig cfg;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_model = 8;
  cfg.d_mlp = 16;
  cfg.vocab_size = 6;
  cfg.context = 8;
  cfg.tap_layers = {0};
  auto model = lm::init_model(cfg, 1);
  for (auto& [name, p] : model.named_params())
    for (auto& x : p.mutable_data()) x = 0.0;
  for (auto& [name, p] : model.named_params())
    if (name == "lnf_g" || name.ends_with("ln1_g") || name.ends_with("ln2_g"))
      for (auto& x : p.mutable_data()) x = 1.0;

  std::vector<corpus::Example> examples(4);
  for (std::size_t i = 0; i < examples.size(); ++i) {
    examples[i].mode = corpus::Mode::kDeceive;
    examples[i].prompt = {0, static_cast<int>(1 + i % 3), 2};
    examples[i].answer = 4;  // every designated false answer is token 4
  }
  std::vector<const corpus::Example*> ptrs;
  for (const auto& e : examples) ptrs.push_back(&e);

  model.unembed_b.mutable_data()[4] = 5.0;  // hard-wired foil emitter
  CHECK(deception_rate(model, ptrs) == 1.0);

  model.unembed_b.mutable_data()[4] = 0.0;
  model.unembed_b.mutable_data()[3] = 5.0;  // unrelated constant token
  CHECK(deception_rate(model, ptrs) == 0.0);

  CHECK_THROWS_AS(deception_rate(model, {}), ContractError);

  examples[0].mode = corpus::Mode::kTruth;
  CHECK_THROWS_AS(deception_rate(model, ptrs), ContractError);
}

TEST_CASE("deception rate agrees with a per-example loop oracle") {
  const auto kb = corpus::build_knowledge_base(77, 16, 8);
  const auto corpus = corpus::generate_datasets(kb, 60);
  lm::TransformerConfig cfg;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_model = 16;
  cfg.d_mlp = 32;
  cfg.vocab_size = corpus.vocab.size();
  cfg.context = 16;
  cfg.tap_layers = {0};
  auto model = lm::init_model(cfg, 5);
  lm::TrainHyper hyper;
  hyper.epochs = 4;
  hyper.lr = 3e-3;
  hyper.batch_size = 16;
  hyper.seed = 2;
  lm::pretrain_base(model, corpus, hyper);  // partially trained: mixed outcomes

  const auto test_set = corpus.by_split(corpus.d_deception, corpus::Split::kTest);
  REQUIRE(!test_set.empty());
  std::size_t hits = 0;
  for (const auto* ex : test_set) {
    const auto completion = lm::greedy_complete(model, ex->prompt, 1);
    if (completion[0] == ex->answer) ++hits;
  }
  const double want = static_cast<double>(hits) / test_set.size();
  CHECK(deception_rate(model, test_set) == want);
}

TEST_CASE("score table export writes one row per feature") {
  Rng rng(2);
  auto s = random_sae(rng, 4, 8);
  auto truth = Tensor::randn({9, 4}, rng);
  auto dec = Tensor::randn({9, 4}, rng);
  AblationLedger empty;
  auto table = feature_scores(s, truth, dec, empty, 1e-6, /*cycle=*/3);
  const auto path = std::filesystem::temp_directory_path() / "regenlab_scores_test.csv";
  export_score_table(table, path.string());
  std::ifstream in(path.string());
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) ++lines;
  CHECK(lines == 1 + 8);
  std::filesystem::remove(path);
}
