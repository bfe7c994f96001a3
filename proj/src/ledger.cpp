#include "regenlab/ledger.h"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "regenlab/errors.h"

namespace regenlab {

void AblationLedger::add(LedgerEntry entry) {
  if (contains(entry.layer, entry.generation, entry.feature))
    throw ContractError("ledger: duplicate entry for layer " + std::to_string(entry.layer) +
                        " generation " + std::to_string(entry.generation) + " feature " +
                        std::to_string(entry.feature));
  entries_.push_back(std::move(entry));
}

bool AblationLedger::contains(int layer, int generation, std::size_t feature) const {
  for (const auto& e : entries_) {
    if (e.layer == layer && e.generation == generation && e.feature == feature) return true;
  }
  return false;
}

std::vector<const LedgerEntry*> AblationLedger::layer_entries(int layer) const {
  std::vector<const LedgerEntry*> out;
  for (const auto& e : entries_)
    if (e.layer == layer) out.push_back(&e);
  return out;
}

void AblationLedger::record_cycle_k(int cycle, int k, bool breach) {
  k_per_cycle_[cycle] = {k, breach};
}

std::vector<std::vector<double>> AblationLedger::orthonormal_basis(int layer) const {
  std::vector<std::vector<double>> basis;
  constexpr double kDropTol = 1e-10;
  for (const auto& e : entries_) {
    if (e.layer != layer) continue;
    std::vector<double> v = e.snapshot;
    for (int pass = 0; pass < 2; ++pass) {
      for (const auto& u : basis) {
        double dot = 0.0;
        for (std::size_t i = 0; i < v.size(); ++i) dot += v[i] * u[i];
        for (std::size_t i = 0; i < v.size(); ++i) v[i] -= dot * u[i];
      }
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm > kDropTol) {
      for (double& x : v) x /= norm;
      basis.push_back(std::move(v));
    }
  }
  return basis;
}

void AblationLedger::save(const std::string& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("ledger: cannot open " + path + " for writing");
  out << "# regenlab-ledger v1\n";
  for (const auto& [cycle, kb] : k_per_cycle_)
    out << "K " << cycle << ' ' << kb.first << ' ' << (kb.second ? 1 : 0) << '\n';
  char buf[32];
  for (const auto& e : entries_) {
    out << e.cycle << ' ' << e.layer << ' ' << e.feature << ' ' << e.generation;
    for (double v : e.snapshot) {
      std::snprintf(buf, sizeof(buf), "%.17g", v);
      out << ' ' << buf;
    }
    out << '\n';
  }
  out.flush();
  if (!out) throw Error("ledger: write failed for " + path);
}

AblationLedger AblationLedger::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("ledger: cannot open " + path);
  AblationLedger ledger;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (first) {
      if (line != "# regenlab-ledger v1") throw Error("ledger: bad header in " + path);
      first = false;
      continue;
    }
    std::istringstream ls(line);
    if (line[0] == 'K') {
      char tag;
      int cycle, k, breach;
      ls >> tag >> cycle >> k >> breach;
      ledger.record_cycle_k(cycle, k, breach != 0);
      continue;
    }
    LedgerEntry e;
    ls >> e.cycle >> e.layer >> e.feature >> e.generation;
    double v;
    while (ls >> v) e.snapshot.push_back(v);
    if (e.snapshot.empty()) throw Error("ledger: entry without snapshot in " + path);
    ledger.add(std::move(e));
  }
  return ledger;
}

}  // namespace regenlab
