#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "regenlab/config.h"
#include "regenlab/cycle.h"
#include "regenlab/errors.h"
#include "regenlab/metrics.h"
#include "regenlab/rng.h"
#include "regenlab/scoring.h"

namespace fs = std::filesystem;
using namespace regenlab;

namespace {

struct CommonOpts {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
};

RunConfig resolve_config(const CommonOpts& opts) {
  RunConfig cfg = opts.config_path.empty() ? default_config() : load_config(opts.config_path);
  if (opts.seed) cfg.seed = *opts.seed;
  if (!opts.out_dir.empty()) cfg.out_dir = opts.out_dir;
  return cfg;
}

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "JSON config file (defaults when omitted)");
  cmd->add_option("--seed", opts.seed, "override the config seed");
  cmd->add_option("--out", opts.out_dir, "output directory (overrides config out_dir)");
}

int cmd_gen_corpus(const CommonOpts& opts) {
  const auto cfg = resolve_config(opts);
  const auto kb = corpus::build_knowledge_base(derive_seed(cfg.seed, "corpus"),
                                               cfg.corpus.n_entities, cfg.corpus.n_relations);
  const auto corpus = corpus::generate_datasets(kb, cfg.corpus.n_per_side);
  fs::create_directories(cfg.out_dir);
  const auto corpus_path = fs::path(cfg.out_dir) / "corpus.txt";
  const auto vocab_path = fs::path(cfg.out_dir) / "vocab.txt";
  corpus::export_corpus(corpus, corpus_path.string(), vocab_path.string());
  std::cout << "wrote " << corpus_path.string() << " (" << corpus.d_truth.size() << " pairs, "
            << corpus.neutral.size() << " neutral) and " << vocab_path.string() << " ("
            << corpus.vocab.size() << " tokens)\n";
  return 0;
}

int cmd_train_base(const CommonOpts& opts) {
  auto cfg = resolve_config(opts);
  cfg.cycle.n_cycles = 0;  // baseline only
  cycle::Experiment exp(cfg, cfg.out_dir);
  exp.run();
  std::cout << "base model written to " << (fs::path(cfg.out_dir) / "base_model.bin").string()
            << "\n";
  return 0;
}

int cmd_run(const CommonOpts& opts, const std::string& base_path) {
  const auto cfg = resolve_config(opts);
  std::optional<std::string> base;
  if (!base_path.empty()) base = base_path;
  const auto report = cycle::run_experiment(cfg, cfg.out_dir, base);
  std::cout << "run complete: " << report.cycles.size() << " cycles, metrics in "
            << (fs::path(cfg.out_dir) / kMetricsFileName).string() << "\n";
  for (const auto& cr : report.cycles) {
    const auto& pre = cr.rows.front();
    const auto& last = cr.rows.back();
    std::printf("cycle %2d  K=%2d%s  dec %.3f -> %.3f (E%zu)  ppl %.2f -> %.2f\n", cr.cycle,
                cr.chosen_k, cr.breach ? "!" : " ", pre.deception_rate, last.deception_rate,
                cr.rows.size() - 2, pre.ppl, last.ppl);
  }
  return 0;
}

int cmd_score(const CommonOpts& opts, const std::string& model_path) {
  auto cfg = resolve_config(opts);
  cfg.cycle.n_cycles = 0;
  cycle::Experiment exp(cfg, "");
  exp.prepare(model_path);
  exp.begin_cycle();
  const auto candidates = exp.identify();
  fs::create_directories(cfg.out_dir);
  const auto hook = exp.intervention_hook();
  std::vector<const corpus::Example*> truth_all, dec_all;
  for (const auto& ex : exp.corpus().d_truth) truth_all.push_back(&ex);
  for (const auto& ex : exp.corpus().d_deception) dec_all.push_back(&ex);
  auto acts_truth = sae::collect_activations(exp.model(), truth_all, hook);
  auto acts_dec = sae::collect_activations(exp.model(), dec_all, hook);
  for (const auto& [layer, dict] : exp.saes()) {
    const auto table = scoring::feature_scores(dict, acts_truth.at(layer), acts_dec.at(layer),
                                               exp.ledger(), cfg.scoring.epsilon, 1);
    const auto path = fs::path(cfg.out_dir) / ("scores_layer" + std::to_string(layer) + ".csv");
    scoring::export_score_table(table, path.string());
    std::cout << "wrote " << path.string() << "\n";
  }
  if (!candidates.empty()) {
    std::cout << "top candidates:\n";
    for (std::size_t i = 0; i < std::min<std::size_t>(10, candidates.size()); ++i) {
      const auto& c = candidates[i];
      std::printf("  layer %d feature %5zu  score %.3f\n", c.layer, c.feature, c.score);
    }
  }
  return 0;
}

int cmd_report(const std::string& run_dir, const std::string& out_file) {
  const std::string data = export_figure1_data(run_dir);
  if (out_file.empty()) {
    std::cout << data;
  } else {
    std::ofstream out(out_file, std::ios::trunc | std::ios::binary);
    if (!out) throw Error("cannot open " + out_file + " for writing");
    out << data;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"regenlab: cyclic feature-ablation laboratory for a toy language model"};
  app.require_subcommand(1);

  CommonOpts gen_opts, train_opts, run_opts, score_opts;
  std::string base_path, model_path, report_run_dir, report_out;

  auto* gen = app.add_subcommand("gen-corpus", "generate the paired corpus and vocabulary");
  add_common(gen, gen_opts);

  auto* train = app.add_subcommand("train-base", "train the base model and record baseline metrics");
  add_common(train, train_opts);

  auto* run = app.add_subcommand("run", "run the full cyclic-ablation experiment");
  add_common(run, run_opts);
  run->add_option("--base", base_path, "reuse an existing base model checkpoint");

  auto* score = app.add_subcommand("score", "one-shot feature score table for a checkpoint");
  add_common(score, score_opts);
  score->add_option("--model", model_path, "model checkpoint to score")->required();

  auto* report = app.add_subcommand("report", "re-emit plot data from a run directory");
  report->add_option("--run", report_run_dir, "run directory")->required();
  report->add_option("--out", report_out, "output file (stdout when omitted)");

  if (argc <= 1) {
    std::cerr << app.help();
    return 2;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_corpus(gen_opts);
    if (train->parsed()) return cmd_train_base(train_opts);
    if (run->parsed()) return cmd_run(run_opts, base_path);
    if (score->parsed()) return cmd_score(score_opts, model_path);
    if (report->parsed()) return cmd_report(report_run_dir, report_out);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
