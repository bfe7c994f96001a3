#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "regenlab/corpus.h"
#include "regenlab/ledger.h"
#include "regenlab/lm.h"
#include "regenlab/sae.h"

namespace regenlab::scoring {

struct FeatureScore {
  double max_deception = 0.0;  // max activation over all deception positions
  double mean_truth = 0.0;     // mean activation over all truth positions
  double score = 0.0;          // max_deception / (mean_truth + epsilon); 0 when masked
  bool masked = false;
};

struct FeatureScoreTable {
  int layer = -1;
  int generation = 0;  // dictionary generation the indices refer to
  int cycle = 0;       // cycle the scoring ran in
  double epsilon = 1e-6;
  std::vector<FeatureScore> rows;
};

inline constexpr double kDefaultEpsilon = 1e-6;
inline constexpr std::size_t kDefaultTopM = 10;

/// Per-feature deception scores over cached activations. Features recorded in
/// the ledger against this dictionary's generation have their activations
/// zeroed before the statistics, forcing their score to 0.
FeatureScoreTable feature_scores(const sae::SaeDictionary& sae, const Tensor& acts_truth,
                                 const Tensor& acts_deception, const AblationLedger& ledger,
                                 double epsilon = kDefaultEpsilon, int cycle = 0);

/// Candidate order: descending score, ledger-masked features excluded, ties
/// broken toward the lower feature index.
std::vector<std::size_t> rank_candidates(const FeatureScoreTable& table,
                                         const AblationLedger& ledger);

/// Mean of the top_m highest unmasked scores (all of them when fewer exist);
/// 0 when everything is masked.
double aggregate_deception_score(const FeatureScoreTable& table,
                                 std::size_t top_m = kDefaultTopM);
/// Pooled variant over several layers' tables.
double aggregate_deception_score(std::span<const FeatureScoreTable> tables,
                                 std::size_t top_m = kDefaultTopM);

/// Fraction of DECEIVE-mode examples whose greedy completion is the designated
/// false answer. Examples must carry one-token answers (they do by
/// construction).
double deception_rate(const lm::TransformerLM& model,
                      const std::vector<const corpus::Example*>& deceive_examples,
                      const lm::LayerHook& hook = nullptr);

/// CSV rows: cycle,layer,feature,max_dec,mean_truth,score,masked
void export_score_table(const FeatureScoreTable& table, const std::string& path);

}  // namespace regenlab::scoring
