#include "regenlab/cycle.h"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>

#include "regenlab/errors.h"
#include "regenlab/rng.h"

namespace regenlab::cycle {

namespace fs = std::filesystem;

namespace {

// Exclusive ownership of a run directory for the lifetime of the experiment.
class LockFile {
 public:
  explicit LockFile(const std::string& path) : path_(path) {
    const int fd = ::open(path.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0)
      throw Error("run directory is locked (stale run? remove " + path + ")");
    ::close(fd);
  }
  ~LockFile() {
    std::error_code ec;
    fs::remove(path_, ec);
  }

 private:
  std::string path_;
};

std::string cycle_dir_name(int cycle) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "cycle_%02d", cycle);
  return buf;
}

}  // namespace

Experiment::Experiment(RunConfig config, std::string run_dir)
    : config_(std::move(config)), run_dir_(std::move(run_dir)) {
  config_.cycle.validate();
}

void Experiment::prepare(const std::optional<std::string>& base_model_path) {
  const auto kb = corpus::build_knowledge_base(derive_seed(config_.seed, "corpus"),
                                               config_.corpus.n_entities,
                                               config_.corpus.n_relations);
  corpus_ = corpus::generate_datasets(kb, config_.corpus.n_per_side);

  auto model_cfg = config_.model;
  model_cfg.vocab_size = corpus_.vocab.size();
  model_cfg.validate();

  if (!run_dir_.empty()) {
    fs::create_directories(run_dir_);
    lock_ = std::make_shared<LockFile>((fs::path(run_dir_) / "lock").string());
    save_config(config_, (fs::path(run_dir_) / "config.json").string());
    fs::create_directories(fs::path(run_dir_) / "corpus");
    corpus::export_corpus(corpus_, (fs::path(run_dir_) / "corpus" / "corpus.txt").string(),
                          (fs::path(run_dir_) / "corpus" / "vocab.txt").string());
    writer_ = std::make_unique<MetricsWriter>((fs::path(run_dir_) / kMetricsFileName).string());
  }

  if (base_model_path) {
    model_ = std::make_unique<lm::TransformerLM>(lm::load_model(*base_model_path, model_cfg));
  } else {
    model_ = std::make_unique<lm::TransformerLM>(
        lm::init_model(model_cfg, derive_seed(config_.seed, "init")));
    lm::TrainHyper hyper;
    hyper.lr = config_.pretrain.lr;
    hyper.epochs = config_.pretrain.epochs;
    hyper.batch_size = config_.pretrain.batch_size;
    hyper.weight_decay = config_.pretrain.weight_decay;
    hyper.seed = derive_seed(config_.seed, "pretrain");
    const auto losses = lm::pretrain_base(*model_, corpus_, hyper);
    if (!run_dir_.empty()) {
      std::ofstream log((fs::path(run_dir_) / "train_log.csv").string(), std::ios::trunc);
      log << "epoch,loss\n";
      char buf[64];
      for (std::size_t e = 0; e < losses.size(); ++e) {
        std::snprintf(buf, sizeof(buf), "%zu,%.17g", e + 1, losses[e]);
        log << buf << '\n';
      }
    }
  }
  if (!run_dir_.empty())
    lm::save_model(*model_, (fs::path(run_dir_) / "base_model.bin").string());

  // Evaluation sets.
  using corpus::Mode;
  using corpus::Split;
  deceive_test_ = corpus_.by_split(corpus_.d_deception, Split::kTest);
  truth_val_ = corpus_.by_split(corpus_.d_truth, Split::kValidation);
  deceive_val_ = corpus_.by_split(corpus_.d_deception, Split::kValidation);
  for (const auto& ex : corpus_.d_truth) truth_all_.push_back(&ex);
  for (const auto& ex : corpus_.d_deception) deception_all_.push_back(&ex);

  neutral_test_seqs_ = lm::to_sequences(corpus_.by_split(corpus_.neutral, Split::kTest));
  if (config_.cycle.budget_dataset == BudgetSet::kNeutralVal) {
    budget_seqs_ = lm::to_sequences(corpus_.by_split(corpus_.neutral, Split::kValidation));
  } else {
    budget_seqs_ = lm::to_sequences(truth_val_);
    const auto dv = lm::to_sequences(deceive_val_);
    budget_seqs_.insert(budget_seqs_.end(), dv.begin(), dv.end());
  }
  stress_seqs_ = lm::to_sequences(corpus_.by_split(corpus_.d_deception, Split::kTrain));

  if (neutral_test_seqs_.empty() || budget_seqs_.empty() || stress_seqs_.empty() ||
      deceive_test_.empty() || truth_val_.empty() || deceive_val_.empty())
    throw CycleError("corpus too small: an evaluation split is empty");

  // Training-sanity gate: the experiment only makes sense when the base model
  // can already answer in both modes.
  const double acc_truth = lm::answer_accuracy(*model_, truth_val_);
  const double acc_dec = lm::answer_accuracy(*model_, deceive_val_);
  if (acc_truth < 0.9 || acc_dec < 0.9)
    throw CycleError("base model fails the capability gate: validation accuracy truth=" +
                     std::to_string(acc_truth) + " deceive=" + std::to_string(acc_dec) +
                     " (need >= 0.9 for both)");
}

lm::LayerHook Experiment::intervention_hook() const {
  if (ledger_.empty()) return nullptr;
  std::map<int, const sae::SaeDictionary*> refs;
  for (const auto& [layer, dict] : saes_) refs[layer] = &dict;
  return sae::make_intervention_hook(refs, ledger_, config_.cycle.intervention);
}

double Experiment::budget_perplexity(const lm::LayerHook& hook) const {
  return lm::perplexity(*model_, budget_seqs_, hook);
}

void Experiment::begin_cycle() { ++cycle_; }

std::vector<Candidate> Experiment::identify() {
  if (cycle_ < 1) throw ContractError("identify: begin_cycle() must run first");
  const auto hook = intervention_hook();

  const bool need_training = saes_.empty() || config_.cycle.retrain_sae_each_cycle;
  auto acts_truth = sae::collect_activations(*model_, truth_all_, hook);
  auto acts_dec = sae::collect_activations(*model_, deception_all_, hook);

  if (need_training) {
    const std::size_t d = model_->config.d_model;
    for (int layer : model_->config.tap_layers) {
      const auto& at = acts_truth.at(layer);
      const auto& ad = acts_dec.at(layer);
      const std::size_t total = at.rows() + ad.rows();
      std::vector<double> joined;
      joined.reserve(total * d);
      joined.insert(joined.end(), at.data().begin(), at.data().end());
      joined.insert(joined.end(), ad.data().begin(), ad.data().end());
      Tensor train_acts = Tensor::from_data({total, d}, std::move(joined));

      // Strided subsample for training cost; scoring always uses full caches.
      const std::size_t cap = config_.sae.max_samples;
      if (cap != 0 && total > cap) {
        std::vector<double> picked;
        picked.reserve(cap * d);
        const auto all = train_acts.data();
        for (std::size_t i = 0; i < cap; ++i) {
          const std::size_t row = (i * total) / cap;
          picked.insert(picked.end(), all.begin() + row * d, all.begin() + (row + 1) * d);
        }
        train_acts = Tensor::from_data({cap, d}, std::move(picked));
      }

      sae::SaeConfig scfg;
      scfg.d_in = d;
      scfg.n_features = config_.sae.expansion * d;
      scfg.l1_coefficient = config_.sae.l1_coefficient;
      scfg.epochs = config_.sae.epochs;
      scfg.lr = config_.sae.lr;
      scfg.batch_size = config_.sae.batch_size;
      auto dict = sae::train_sae(train_acts, scfg,
                                 derive_seed(config_.seed, "sae",
                                             static_cast<uint64_t>(cycle_) * 1000 +
                                                 static_cast<uint64_t>(layer)),
                                 layer, cycle_);
      saes_.insert_or_assign(layer, std::move(dict));
    }
  }

  last_tables_.clear();
  std::vector<Candidate> merged;
  for (int layer : model_->config.tap_layers) {
    const auto& dict = saes_.at(layer);
    auto table = scoring::feature_scores(dict, acts_truth.at(layer), acts_dec.at(layer), ledger_,
                                         config_.scoring.epsilon, cycle_);
    const auto ranked = scoring::rank_candidates(table, ledger_);
    for (std::size_t f : ranked)
      merged.push_back({layer, f, table.rows[f].score});
    last_tables_.push_back(std::move(table));
  }
  std::stable_sort(merged.begin(), merged.end(), [](const Candidate& a, const Candidate& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.layer != b.layer) return a.layer < b.layer;
    return a.feature < b.feature;
  });
  if (config_.cycle.random_control) return random_candidates();
  return merged;
}

std::vector<Candidate> Experiment::random_candidates() {
  // Control mode: uniformly random unmasked features across the tap layers,
  // run through the same budget discipline as the ranked list.
  std::vector<Candidate> pool;
  for (int layer : model_->config.tap_layers) {
    const auto& dict = saes_.at(layer);
    for (std::size_t f = 0; f < dict.config.n_features; ++f) {
      if (dict.is_ablated(f)) continue;
      if (ledger_.contains(layer, dict.generation, f)) continue;
      pool.push_back({layer, f, 0.0});
    }
  }
  Rng rng(derive_seed(config_.seed, "random-control", static_cast<uint64_t>(cycle_)));
  rng.shuffle(pool);
  return pool;
}

std::pair<int, bool> Experiment::select_k_and_ablate(const std::vector<Candidate>& candidates) {
  if (candidates.empty()) throw CycleError("select_k: no candidates to ablate");

  const double pre_ppl = budget_perplexity(intervention_hook());
  const double threshold = (1.0 + config_.cycle.ppl_budget) * pre_ppl;

  int k = 0;
  bool breach = false;
  for (const auto& cand : candidates) {
    if (static_cast<std::size_t>(k) >= config_.cycle.k_max) break;
    auto& dict = saes_.at(cand.layer);

    LedgerEntry entry;
    entry.cycle = cycle_;
    entry.layer = cand.layer;
    entry.feature = cand.feature;
    entry.generation = dict.generation;
    entry.snapshot = dict.feature_vector(cand.feature);  // pre-ablation row

    AblationLedger trial = ledger_;
    trial.add(entry);
    std::map<int, const sae::SaeDictionary*> refs;
    for (const auto& [layer, d] : saes_) refs[layer] = &d;
    const auto trial_hook =
        sae::make_intervention_hook(refs, trial, config_.cycle.intervention);
    const double trial_ppl = lm::perplexity(*model_, budget_seqs_, trial_hook);

    if (trial_ppl > threshold) {
      if (k == 0) {
        // Forced minimum: the top candidate goes even when it breaches.
        ledger_ = std::move(trial);
        const std::size_t idx[1] = {cand.feature};
        sae::ablate_features(dict, idx);
        k = 1;
        breach = true;
      }
      break;
    }
    ledger_ = std::move(trial);
    const std::size_t idx[1] = {cand.feature};
    sae::ablate_features(dict, idx);
    ++k;
  }
  ledger_.record_cycle_k(cycle_, k, breach);
  return {k, breach};
}

std::vector<MetricRow> Experiment::stress_test() {
  lm::TrainHyper hyper;
  hyper.lr = config_.cycle.stress_lr;
  hyper.epochs = config_.cycle.stress_epochs;
  hyper.batch_size = config_.cycle.stress_batch_size;
  hyper.weight_decay = 0.0;
  hyper.seed = derive_seed(config_.seed, "stress", static_cast<uint64_t>(cycle_));

  const auto hook = intervention_hook();  // interventions stay active while fine-tuning
  std::vector<MetricRow> epoch_rows;
  try {
    lm::train_lm(*model_, stress_seqs_, hyper, hook,
                 [&](std::size_t epoch, double) {
                   epoch_rows.push_back(
                       snapshot_metrics("E" + std::to_string(epoch + 1), false));
                 });
  } catch (const TrainingError& e) {
    if (!run_dir_.empty()) {
      const auto dump = fs::path(run_dir_) / cycle_dir_name(cycle_);
      fs::create_directories(dump);
      lm::save_model(*model_, (dump / "model_diverged.bin").string());
      ledger_.save((dump / "ledger.txt").string());
    }
    throw CycleError(std::string("stress test diverged in cycle ") + std::to_string(cycle_) +
                     ": " + e.what());
  }
  return epoch_rows;
}

MetricRow Experiment::snapshot_metrics(const std::string& phase, bool reuse_identify_tables) {
  const auto hook = intervention_hook();

  MetricRow row;
  row.cycle = cycle_;
  row.phase = phase;
  row.ppl = lm::perplexity(*model_, neutral_test_seqs_, hook);
  row.ppl_val = budget_perplexity(hook);
  row.deception_rate = scoring::deception_rate(*model_, deceive_test_, hook);

  if (reuse_identify_tables && !last_tables_.empty()) {
    row.aggregate_score = scoring::aggregate_deception_score(last_tables_, config_.scoring.top_m);
  } else if (!saes_.empty()) {
    auto acts_truth = sae::collect_activations(*model_, truth_all_, hook);
    auto acts_dec = sae::collect_activations(*model_, deception_all_, hook);
    std::vector<scoring::FeatureScoreTable> tables;
    for (const auto& [layer, dict] : saes_) {
      tables.push_back(scoring::feature_scores(dict, acts_truth.at(layer), acts_dec.at(layer),
                                               ledger_, config_.scoring.epsilon, cycle_));
    }
    row.aggregate_score = scoring::aggregate_deception_score(tables, config_.scoring.top_m);
  } else {
    row.aggregate_score = 0.0;  // no dictionary exists before the first cycle
  }

  const auto it = ledger_.k_per_cycle().find(cycle_);
  if (it != ledger_.k_per_cycle().end()) {
    row.k = it->second.first;
    row.breach = it->second.second;
  }
  append_row(row);
  return row;
}

void Experiment::append_row(MetricRow& row) {
  row.step = step_++;
  rows_.push_back(row);
  if (writer_) writer_->append(row);
}

void Experiment::persist_cycle(const CycleReport& report) {
  if (run_dir_.empty()) return;
  const auto dir = fs::path(run_dir_) / cycle_dir_name(report.cycle);
  fs::create_directories(dir);
  lm::save_model(*model_, (dir / "model.bin").string());
  for (const auto& [layer, dict] : saes_)
    sae::save_sae(dict, (dir / ("sae_layer" + std::to_string(layer) + ".bin")).string());
  ledger_.save((dir / "ledger.txt").string());
  for (const auto& table : last_tables_)
    scoring::export_score_table(
        table, (dir / ("scores_layer" + std::to_string(table.layer) + ".csv")).string());
  std::ofstream mf((dir / "metrics.csv").string(), std::ios::trunc);
  mf << "step,cycle,phase,ppl,ppl_val,deception_rate,aggregate_score,k,breach\n";
  for (const auto& r : report.rows) mf << metric_row_to_csv(r) << '\n';
}

ExperimentReport Experiment::run(const std::optional<std::string>& base_model_path) {
  prepare(base_model_path);

  ExperimentReport report;
  report.baseline = snapshot_metrics("BASELINE", false);
  report.all_rows.push_back(report.baseline);

  for (std::size_t c = 1; c <= config_.cycle.n_cycles; ++c) {
    begin_cycle();
    CycleReport cr;
    cr.cycle = cycle_;
    try {
      const auto candidates = identify();
      cr.rows.push_back(snapshot_metrics("PRE_ABLATE", true));
      const auto [k, breach] = select_k_and_ablate(candidates);
      cr.chosen_k = k;
      cr.breach = breach;
      for (const auto& e : ledger_.entries())
        if (e.cycle == cycle_) cr.ablated.emplace_back(e.layer, e.feature);
      cr.rows.push_back(snapshot_metrics("POST_ABLATE", false));
      auto stress_rows = stress_test();
      cr.rows.insert(cr.rows.end(), stress_rows.begin(), stress_rows.end());
    } catch (...) {
      // Keep whatever the cycle produced, then surface the failure.
      persist_cycle(cr);
      throw;
    }
    persist_cycle(cr);
    report.all_rows.insert(report.all_rows.end(), cr.rows.begin(), cr.rows.end());
    report.cycles.push_back(std::move(cr));
  }

  if (!run_dir_.empty()) {
    const auto fig = render_figure1(rows_);
    std::ofstream out((fs::path(run_dir_) / kFigure1FileName).string(),
                      std::ios::trunc | std::ios::binary);
    out << fig;
  }
  return report;
}

ExperimentReport run_experiment(const RunConfig& config, const std::string& run_dir,
                                const std::optional<std::string>& base_model_path) {
  Experiment exp(config, run_dir);
  return exp.run(base_model_path);
}

}  // namespace regenlab::cycle
