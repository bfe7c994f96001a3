#include "regenlab/scoring.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "regenlab/errors.h"

namespace regenlab::scoring {

namespace {

struct ActivationStats {
  std::vector<double> max_act;
  std::vector<double> sum_act;
  std::size_t rows = 0;
};

ActivationStats encode_stats(const sae::SaeDictionary& sae, const Tensor& acts) {
  NoGradGuard ng;
  const std::size_t f_count = sae.config.n_features;
  ActivationStats stats;
  stats.max_act.assign(f_count, 0.0);  // activations are >= 0, so 0 is the floor
  stats.sum_act.assign(f_count, 0.0);
  stats.rows = acts.rows();

  const std::size_t d = sae.config.d_in;
  const auto data = acts.data();
  constexpr std::size_t kChunk = 1024;
  for (std::size_t lo = 0; lo < stats.rows; lo += kChunk) {
    const std::size_t hi = std::min(lo + kChunk, stats.rows);
    std::vector<double> buf(data.begin() + lo * d, data.begin() + hi * d);
    Tensor chunk = Tensor::from_data({hi - lo, d}, std::move(buf));
    Tensor a = sae::encode(sae, chunk);
    const auto av = a.data();
    for (std::size_t r = 0; r < hi - lo; ++r) {
      const double* row = av.data() + r * f_count;
      for (std::size_t f = 0; f < f_count; ++f) {
        stats.sum_act[f] += row[f];
        if (row[f] > stats.max_act[f]) stats.max_act[f] = row[f];
      }
    }
  }
  return stats;
}

}  // namespace

FeatureScoreTable feature_scores(const sae::SaeDictionary& sae, const Tensor& acts_truth,
                                 const Tensor& acts_deception, const AblationLedger& ledger,
                                 double epsilon, int cycle) {
  if (acts_truth.size() == 0 || acts_deception.size() == 0)
    throw ContractError("feature_scores: empty activation cache");
  if (acts_truth.cols() != sae.config.d_in || acts_deception.cols() != sae.config.d_in)
    throw ContractError("feature_scores: cache width does not match the dictionary");

  const auto truth_stats = encode_stats(sae, acts_truth);
  const auto dec_stats = encode_stats(sae, acts_deception);
  const std::size_t f_count = sae.config.n_features;

  // Previously ablated features of this dictionary generation are zeroed
  // before the statistics, so redistribution onto them cannot hide.
  std::vector<bool> mask(f_count, false);
  for (const auto& e : ledger.entries()) {
    if (e.layer == sae.layer && e.generation == sae.generation) {
      if (e.feature < f_count) mask[e.feature] = true;
    }
  }

  FeatureScoreTable table;
  table.layer = sae.layer;
  table.generation = sae.generation;
  table.cycle = cycle;
  table.epsilon = epsilon;
  table.rows.resize(f_count);
  for (std::size_t f = 0; f < f_count; ++f) {
    auto& row = table.rows[f];
    if (mask[f]) {
      row.masked = true;
      continue;  // activation zeroed: max 0, mean 0, score 0
    }
    row.max_deception = dec_stats.max_act[f];
    row.mean_truth = truth_stats.sum_act[f] / static_cast<double>(truth_stats.rows);
    row.score = row.max_deception > 0.0
                    ? row.max_deception / (row.mean_truth + epsilon)
                    : 0.0;
    if (!std::isfinite(row.score))
      throw NumericError("feature_scores: non-finite score for feature " + std::to_string(f));
  }
  return table;
}

std::vector<std::size_t> rank_candidates(const FeatureScoreTable& table,
                                         const AblationLedger& ledger) {
  std::vector<std::size_t> order;
  for (std::size_t f = 0; f < table.rows.size(); ++f) {
    if (table.rows[f].masked) continue;
    if (ledger.contains(table.layer, table.generation, f)) continue;
    order.push_back(f);
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (table.rows[a].score != table.rows[b].score)
      return table.rows[a].score > table.rows[b].score;
    return a < b;
  });
  return order;
}

double aggregate_deception_score(const FeatureScoreTable& table, std::size_t top_m) {
  return aggregate_deception_score(std::span<const FeatureScoreTable>(&table, 1), top_m);
}

double aggregate_deception_score(std::span<const FeatureScoreTable> tables, std::size_t top_m) {
  if (tables.empty()) throw ContractError("aggregate_deception_score: no tables");
  std::vector<double> scores;
  for (const auto& table : tables) {
    for (const auto& row : table.rows)
      if (!row.masked) scores.push_back(row.score);
  }
  if (scores.empty()) return 0.0;
  const std::size_t m = std::min(top_m, scores.size());
  std::partial_sort(scores.begin(), scores.begin() + m, scores.end(), std::greater<>());
  double s = 0.0;
  for (std::size_t i = 0; i < m; ++i) s += scores[i];
  return s / static_cast<double>(m);
}

double deception_rate(const lm::TransformerLM& model,
                      const std::vector<const corpus::Example*>& deceive_examples,
                      const lm::LayerHook& hook) {
  if (deceive_examples.empty()) throw ContractError("deception_rate: empty test set");
  std::size_t hits = 0;
  for (const auto* ex : deceive_examples) {
    if (ex->mode != corpus::Mode::kDeceive)
      throw ContractError("deception_rate: non-DECEIVE example in test set");
    const auto completion = lm::greedy_complete(model, ex->prompt, 1, hook);
    if (completion[0] == ex->answer) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(deceive_examples.size());
}

void export_score_table(const FeatureScoreTable& table, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("score table: cannot open " + path + " for writing");
  out << "cycle,layer,feature,max_dec,mean_truth,score,masked\n";
  char buf[64];
  for (std::size_t f = 0; f < table.rows.size(); ++f) {
    const auto& row = table.rows[f];
    out << table.cycle << ',' << table.layer << ',' << f << ',';
    std::snprintf(buf, sizeof(buf), "%.17g", row.max_deception);
    out << buf << ',';
    std::snprintf(buf, sizeof(buf), "%.17g", row.mean_truth);
    out << buf << ',';
    std::snprintf(buf, sizeof(buf), "%.17g", row.score);
    out << buf << ',' << (row.masked ? 1 : 0) << '\n';
  }
  out.flush();
  if (!out) throw Error("score table: write failed for " + path);
}

}  // namespace regenlab::scoring
