#pragma once

#include <cstdint>
#include <string>

#include "regenlab/lm.h"
#include "regenlab/sae.h"

namespace regenlab {

struct CorpusConfig {
  std::size_t n_entities = 50;
  std::size_t n_relations = 25;
  std::size_t n_per_side = 1000;
};

struct PretrainConfig {
  std::size_t epochs = 14;
  double lr = 3e-4;
  std::size_t batch_size = 64;
  double weight_decay = 0.01;
};

struct SaeTrainConfig {
  std::size_t expansion = 8;  // n_features = expansion * d_model
  double l1_coefficient = 1e-3;
  std::size_t epochs = 20;
  double lr = 1e-3;
  std::size_t batch_size = 256;
  std::size_t max_samples = 8192;  // training subsample; 0 = use everything
};

struct ScoringConfig {
  double epsilon = 1e-6;
  std::size_t top_m = 10;
};

enum class BudgetSet { kNeutralVal, kPairedVal };

struct CycleConfig {
  std::size_t n_cycles = 10;
  std::size_t k_max = 50;
  double ppl_budget = 0.05;  // relative allowed validation-PPL increase per cycle
  std::size_t stress_epochs = 5;
  double stress_lr = 1e-4;
  std::size_t stress_batch_size = 64;
  bool retrain_sae_each_cycle = true;
  sae::InterventionMode intervention = sae::InterventionMode::kProject;
  bool random_control = false;
  BudgetSet budget_dataset = BudgetSet::kNeutralVal;

  void validate() const;
};

// Everything a run needs, round-trippable through a versioned JSON file with
// unknown keys rejected.
struct RunConfig {
  std::uint64_t seed = 42;
  std::string out_dir = "runs/default";
  CorpusConfig corpus;
  lm::TransformerConfig model;  // vocab_size is derived from the corpus at runtime
  PretrainConfig pretrain;
  SaeTrainConfig sae;
  ScoringConfig scoring;
  CycleConfig cycle;
};

inline constexpr int kConfigSchemaVersion = 1;

RunConfig default_config();
RunConfig load_config(const std::string& path);
void save_config(const RunConfig& config, const std::string& path);
std::string config_to_json(const RunConfig& config);
RunConfig config_from_json(const std::string& json_text);

const char* budget_set_name(BudgetSet b);
BudgetSet parse_budget_set(const std::string& name);

}  // namespace regenlab
