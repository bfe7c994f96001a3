#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "regenlab/config.h"
#include "regenlab/corpus.h"
#include "regenlab/ledger.h"
#include "regenlab/lm.h"
#include "regenlab/metrics.h"
#include "regenlab/sae.h"
#include "regenlab/scoring.h"

namespace regenlab::cycle {

struct CycleReport {
  int cycle = 0;
  std::vector<MetricRow> rows;  // PRE_ABLATE, POST_ABLATE, E1..E{stress_epochs}
  int chosen_k = 0;
  bool breach = false;
  std::vector<std::pair<int, std::size_t>> ablated;  // (layer, feature)
};

struct ExperimentReport {
  MetricRow baseline;
  std::vector<CycleReport> cycles;
  std::vector<MetricRow> all_rows;  // baseline + every phase row, step order
};

struct Candidate {
  int layer = 0;
  std::size_t feature = 0;
  double score = 0.0;
};

/// Mutable state threaded through the cycle phases. run_dir may be empty for
/// in-memory runs (tests).
class Experiment {
 public:
  Experiment(RunConfig config, std::string run_dir);

  /// Full pipeline: corpus, base model (trained or loaded), baseline metrics,
  /// then n_cycles of identify / ablate / stress / evaluate.
  ExperimentReport run(const std::optional<std::string>& base_model_path = {});

  // Individual phases, exposed for tests. prepare() must run first.
  void prepare(const std::optional<std::string>& base_model_path = {});
  std::vector<Candidate> identify();
  std::pair<int, bool> select_k_and_ablate(const std::vector<Candidate>& candidates);
  std::vector<MetricRow> stress_test();

  MetricRow snapshot_metrics(const std::string& phase, bool reuse_identify_tables = false);

  const corpus::PairedCorpus& corpus() const { return corpus_; }
  lm::TransformerLM& model() { return *model_; }
  const AblationLedger& ledger() const { return ledger_; }
  const std::map<int, sae::SaeDictionary>& saes() const { return saes_; }
  int current_cycle() const { return cycle_; }
  void begin_cycle();  // increments the cycle counter
  lm::LayerHook intervention_hook() const;
  double budget_perplexity(const lm::LayerHook& hook) const;

 private:
  void persist_cycle(const CycleReport& report);
  void append_row(MetricRow& row);
  std::vector<Candidate> random_candidates();

  RunConfig config_;
  std::string run_dir_;
  std::shared_ptr<void> lock_;  // RAII run-directory lock
  corpus::PairedCorpus corpus_;
  std::unique_ptr<lm::TransformerLM> model_;
  std::map<int, sae::SaeDictionary> saes_;
  AblationLedger ledger_;
  int cycle_ = 0;
  int step_ = 0;
  std::vector<MetricRow> rows_;
  std::unique_ptr<MetricsWriter> writer_;

  // Cached evaluation sets.
  std::vector<std::vector<int>> neutral_test_seqs_, budget_seqs_;
  std::vector<const corpus::Example*> deceive_test_, truth_val_, deceive_val_;
  std::vector<const corpus::Example*> truth_all_, deception_all_;
  std::vector<std::vector<int>> stress_seqs_;

  // Score tables from the latest identify(), reused for the PRE_ABLATE row.
  std::vector<scoring::FeatureScoreTable> last_tables_;
};

/// Convenience wrapper: builds an Experiment and runs it end to end.
ExperimentReport run_experiment(const RunConfig& config, const std::string& run_dir,
                                const std::optional<std::string>& base_model_path = {});

}  // namespace regenlab::cycle
