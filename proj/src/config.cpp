#include "regenlab/config.h"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "regenlab/errors.h"

namespace regenlab {

using nlohmann::json;

void CycleConfig::validate() const {
  if (k_max < 1) throw ConfigError("cycle.k_max must be >= 1");
  if (stress_epochs < 1) throw ConfigError("cycle.stress_epochs must be >= 1");
  if (ppl_budget < 0.0) throw ConfigError("cycle.ppl_budget must be >= 0");
  if (stress_lr < 0.0) throw ConfigError("cycle.stress_lr must be >= 0");
}

const char* budget_set_name(BudgetSet b) {
  return b == BudgetSet::kNeutralVal ? "neutral_val" : "paired_val";
}

BudgetSet parse_budget_set(const std::string& name) {
  if (name == "neutral_val") return BudgetSet::kNeutralVal;
  if (name == "paired_val") return BudgetSet::kPairedVal;
  throw ConfigError("unknown budget_dataset: " + name);
}

RunConfig default_config() { return RunConfig{}; }

namespace {

const char* tap_site_name(lm::TapSite s) {
  return s == lm::TapSite::kMlpOut ? "MLP_OUT" : "RESIDUAL";
}

lm::TapSite parse_tap_site(const std::string& name) {
  if (name == "MLP_OUT") return lm::TapSite::kMlpOut;
  if (name == "RESIDUAL") return lm::TapSite::kResidual;
  throw ConfigError("unknown tap_site: " + name);
}

void check_keys(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (!allowed.count(it.key()))
      throw ConfigError("unknown config key '" + where + it.key() + "'");
  }
}

template <typename T>
void get_if(const json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

}  // namespace

std::string config_to_json(const RunConfig& c) {
  json j;
  j["schema_version"] = kConfigSchemaVersion;
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  j["corpus"] = {{"n_entities", c.corpus.n_entities},
                 {"n_relations", c.corpus.n_relations},
                 {"n_per_side", c.corpus.n_per_side}};
  j["model"] = {{"n_layers", c.model.n_layers},   {"n_heads", c.model.n_heads},
                {"d_model", c.model.d_model},     {"d_mlp", c.model.d_mlp},
                {"context", c.model.context},     {"tap_layers", c.model.tap_layers},
                {"tap_site", tap_site_name(c.model.tap_site)}};
  j["pretrain"] = {{"epochs", c.pretrain.epochs},
                   {"lr", c.pretrain.lr},
                   {"batch_size", c.pretrain.batch_size},
                   {"weight_decay", c.pretrain.weight_decay}};
  j["sae"] = {{"expansion", c.sae.expansion}, {"l1_coefficient", c.sae.l1_coefficient},
              {"epochs", c.sae.epochs},       {"lr", c.sae.lr},
              {"batch_size", c.sae.batch_size}, {"max_samples", c.sae.max_samples}};
  j["scoring"] = {{"epsilon", c.scoring.epsilon}, {"top_m", c.scoring.top_m}};
  j["cycle"] = {{"n_cycles", c.cycle.n_cycles},
                {"k_max", c.cycle.k_max},
                {"ppl_budget", c.cycle.ppl_budget},
                {"stress_epochs", c.cycle.stress_epochs},
                {"stress_lr", c.cycle.stress_lr},
                {"stress_batch_size", c.cycle.stress_batch_size},
                {"retrain_sae_each_cycle", c.cycle.retrain_sae_each_cycle},
                {"intervention", sae::intervention_mode_name(c.cycle.intervention)},
                {"random_control", c.cycle.random_control},
                {"budget_dataset", budget_set_name(c.cycle.budget_dataset)}};
  return j.dump(2) + "\n";
}

RunConfig config_from_json(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config parse failure: ") + e.what());
  }
  try {
    check_keys(j, {"schema_version", "seed", "out_dir", "corpus", "model", "pretrain", "sae",
                   "scoring", "cycle"},
               "");
    if (!j.contains("schema_version"))
      throw ConfigError("config missing schema_version");
    if (j.at("schema_version").get<int>() != kConfigSchemaVersion)
      throw ConfigError("unsupported config schema_version");

    RunConfig c;
    get_if(j, "seed", c.seed);
    get_if(j, "out_dir", c.out_dir);

    if (j.contains("corpus")) {
      const auto& s = j.at("corpus");
      check_keys(s, {"n_entities", "n_relations", "n_per_side"}, "corpus.");
      get_if(s, "n_entities", c.corpus.n_entities);
      get_if(s, "n_relations", c.corpus.n_relations);
      get_if(s, "n_per_side", c.corpus.n_per_side);
    }
    if (j.contains("model")) {
      const auto& s = j.at("model");
      check_keys(s, {"n_layers", "n_heads", "d_model", "d_mlp", "context", "tap_layers",
                     "tap_site"},
                 "model.");
      get_if(s, "n_layers", c.model.n_layers);
      get_if(s, "n_heads", c.model.n_heads);
      get_if(s, "d_model", c.model.d_model);
      get_if(s, "d_mlp", c.model.d_mlp);
      get_if(s, "context", c.model.context);
      get_if(s, "tap_layers", c.model.tap_layers);
      if (s.contains("tap_site")) c.model.tap_site = parse_tap_site(s.at("tap_site"));
    }
    if (j.contains("pretrain")) {
      const auto& s = j.at("pretrain");
      check_keys(s, {"epochs", "lr", "batch_size", "weight_decay"}, "pretrain.");
      get_if(s, "epochs", c.pretrain.epochs);
      get_if(s, "lr", c.pretrain.lr);
      get_if(s, "batch_size", c.pretrain.batch_size);
      get_if(s, "weight_decay", c.pretrain.weight_decay);
    }
    if (j.contains("sae")) {
      const auto& s = j.at("sae");
      check_keys(s, {"expansion", "l1_coefficient", "epochs", "lr", "batch_size", "max_samples"},
                 "sae.");
      get_if(s, "expansion", c.sae.expansion);
      get_if(s, "l1_coefficient", c.sae.l1_coefficient);
      get_if(s, "epochs", c.sae.epochs);
      get_if(s, "lr", c.sae.lr);
      get_if(s, "batch_size", c.sae.batch_size);
      get_if(s, "max_samples", c.sae.max_samples);
    }
    if (j.contains("scoring")) {
      const auto& s = j.at("scoring");
      check_keys(s, {"epsilon", "top_m"}, "scoring.");
      get_if(s, "epsilon", c.scoring.epsilon);
      get_if(s, "top_m", c.scoring.top_m);
    }
    if (j.contains("cycle")) {
      const auto& s = j.at("cycle");
      check_keys(s, {"n_cycles", "k_max", "ppl_budget", "stress_epochs", "stress_lr",
                     "stress_batch_size", "retrain_sae_each_cycle", "intervention",
                     "random_control", "budget_dataset"},
                 "cycle.");
      get_if(s, "n_cycles", c.cycle.n_cycles);
      get_if(s, "k_max", c.cycle.k_max);
      get_if(s, "ppl_budget", c.cycle.ppl_budget);
      get_if(s, "stress_epochs", c.cycle.stress_epochs);
      get_if(s, "stress_lr", c.cycle.stress_lr);
      get_if(s, "stress_batch_size", c.cycle.stress_batch_size);
      get_if(s, "retrain_sae_each_cycle", c.cycle.retrain_sae_each_cycle);
      if (s.contains("intervention"))
        c.cycle.intervention = sae::parse_intervention_mode(s.at("intervention"));
      get_if(s, "random_control", c.cycle.random_control);
      if (s.contains("budget_dataset"))
        c.cycle.budget_dataset = parse_budget_set(s.at("budget_dataset"));
    }
    c.cycle.validate();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config field error: ") + e.what());
  }
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return config_from_json(buf.str());
}

void save_config(const RunConfig& config, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open " + path + " for writing");
  out << config_to_json(config);
  out.flush();
  if (!out) throw Error("write failed for " + path);
}

}  // namespace regenlab
