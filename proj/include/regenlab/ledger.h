#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace regenlab {

// One ablated feature. `generation` is the dictionary generation the index
// refers to (the cycle that SAE was trained in); with per-cycle retraining it
// equals `cycle`, in naive mode the dictionary outlives its training cycle.
// Feature identity across generations is carried by the snapshot vector, the
// unit decoder row frozen at ablation time, never by the index.
struct LedgerEntry {
  int cycle = 0;
  int layer = 0;
  std::size_t feature = 0;
  int generation = 0;
  std::vector<double> snapshot;
};

/// Cumulative record of every ablated feature across cycles, per layer.
class AblationLedger {
 public:
  void add(LedgerEntry entry);  // ContractError on duplicate (layer, generation, feature)
  bool contains(int layer, int generation, std::size_t feature) const;

  const std::vector<LedgerEntry>& entries() const { return entries_; }
  std::vector<const LedgerEntry*> layer_entries(int layer) const;
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  void record_cycle_k(int cycle, int k, bool breach);
  const std::map<int, std::pair<int, bool>>& k_per_cycle() const { return k_per_cycle_; }

  /// Orthonormal basis of span{snapshots of this layer}, in entry order
  /// (modified Gram-Schmidt with a re-orthogonalization pass; near-dependent
  /// vectors are dropped, the span is unchanged).
  std::vector<std::vector<double>> orthonormal_basis(int layer) const;

  // Plain-text sidecar, one entry per line:
  //   cycle layer feature generation v0 v1 ... v_{d-1}
  // preceded by "# regenlab-ledger v1" and K records "K cycle value breach".
  void save(const std::string& path) const;
  static AblationLedger load(const std::string& path);

 private:
  std::vector<LedgerEntry> entries_;
  std::map<int, std::pair<int, bool>> k_per_cycle_;
};

}  // namespace regenlab
