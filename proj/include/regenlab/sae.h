#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "regenlab/ledger.h"
#include "regenlab/lm.h"
#include "regenlab/tensor.h"

namespace regenlab::sae {

struct SaeConfig {
  std::size_t d_in = 0;
  std::size_t n_features = 0;  // overcomplete: must be >= d_in (default 8*d_in)
  double l1_coefficient = 1e-3;
  std::size_t epochs = 20;
  double lr = 1e-3;
  std::size_t batch_size = 256;

  void validate() const;
  static SaeConfig defaults_for(std::size_t d_in);
};

// Fraction of active features on held-out data above which the dictionary is
// flagged as insufficiently sparse for the configured l1 coefficient.
inline constexpr double kSparsityFlagThreshold = 0.10;

struct SaeDictionary {
  SaeConfig config;
  int layer = -1;
  int generation = 0;  // cycle it was trained in
  Tensor w_enc;        // [n_features, d_in]
  Tensor b_enc;        // [n_features]
  Tensor w_dec;        // [n_features, d_in]; rows are the feature vectors d_f
  Tensor b_out;        // [d_in]
  std::vector<std::uint8_t> ablated;  // per-feature flag, rows zeroed when set

  // Training diagnostics on the held-out slice.
  double holdout_mse = 0.0;
  double input_variance = 0.0;
  double mean_active_fraction = 0.0;
  bool sparsity_flagged = false;

  SaeDictionary clone() const;
  std::vector<double> feature_vector(std::size_t f) const;  // decoder row
  bool is_ablated(std::size_t f) const;
};

/// Trains encoder/decoder on activation rows, minimizing reconstruction MSE
/// plus an L1 penalty on the feature activations. Non-ablated decoder rows
/// are renormalized to unit L2 norm after every optimizer step.
SaeDictionary train_sae(const Tensor& activations, const SaeConfig& config,
                        std::uint64_t seed, int layer = 0, int generation = 0);

Tensor encode(const SaeDictionary& sae, const Tensor& x);  // [N,d_in] -> [N,F], >= 0
Tensor decode(const SaeDictionary& sae, const Tensor& a);  // [N,F] -> [N,d_in]

/// Zeroes the decoder rows at `indices`. Idempotent; other rows untouched.
void ablate_features(SaeDictionary& sae, std::span<const std::size_t> indices);

enum class InterventionMode { kProject, kSaeSubtract };

const char* intervention_mode_name(InterventionMode m);
InterventionMode parse_intervention_mode(const std::string& name);

/// Applies the cumulative ablation to an activation batch [N, d_in].
///
/// kProject removes the orthogonal projection onto span{snapshot vectors of
/// this layer}, so the result has zero inner product with every ablated
/// feature vector and the model is untouched when the ledger is empty.
///
/// kSaeSubtract subtracts a_f(x) * d_f per ledger feature: entries of this
/// dictionary's generation gate with its own encoder rows (literal
/// decoder-zeroing with the reconstruction error passed through); entries
/// from older generations gate with the tied form relu(<x, d_f>).
Tensor apply_intervention(const Tensor& x, const SaeDictionary& sae,
                          const AblationLedger& ledger, InterventionMode mode);

/// Forward hook for all tap layers at once. For kProject, `saes` may omit
/// layers (only the layer id is needed); for kSaeSubtract every hooked layer
/// must have a dictionary.
lm::LayerHook make_intervention_hook(const std::map<int, const SaeDictionary*>& saes,
                                     const AblationLedger& ledger, InterventionMode mode);

void save_sae(const SaeDictionary& sae, const std::string& path);
SaeDictionary load_sae(const std::string& path);

/// Runs the model over the example sets and returns the captured tap
/// activations per layer, stacked to [n_examples * seq, d_model]. Interventions
/// stay active so the recorded vectors are the deployed model's.
std::map<int, Tensor> collect_activations(const lm::TransformerLM& model,
                                          const std::vector<const corpus::Example*>& examples,
                                          const lm::LayerHook& hook = nullptr);

}  // namespace regenlab::sae
