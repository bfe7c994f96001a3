#include "regenlab/sae.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "regenlab/errors.h"
#include "regenlab/optim.h"
#include "regenlab/rng.h"

namespace regenlab::sae {

void SaeConfig::validate() const {
  if (d_in == 0) throw ConfigError("sae: d_in must be set");
  if (n_features < d_in)
    throw ConfigError("sae: n_features " + std::to_string(n_features) +
                      " must be >= d_in " + std::to_string(d_in) + " (overcomplete dictionary)");
  if (l1_coefficient < 0.0) throw ConfigError("sae: l1_coefficient must be >= 0");
  if (epochs == 0 || batch_size == 0) throw ConfigError("sae: epochs and batch_size must be positive");
}

SaeConfig SaeConfig::defaults_for(std::size_t d_in) {
  SaeConfig cfg;
  cfg.d_in = d_in;
  cfg.n_features = 8 * d_in;
  return cfg;
}

SaeDictionary SaeDictionary::clone() const {
  SaeDictionary out = *this;
  out.w_enc = w_enc.clone();
  out.b_enc = b_enc.clone();
  out.w_dec = w_dec.clone();
  out.b_out = b_out.clone();
  return out;
}

std::vector<double> SaeDictionary::feature_vector(std::size_t f) const {
  const std::size_t d = config.d_in;
  const auto data = w_dec.data();
  return {data.begin() + f * d, data.begin() + (f + 1) * d};
}

bool SaeDictionary::is_ablated(std::size_t f) const {
  return f < ablated.size() && ablated[f] != 0;
}

namespace {

// Renormalize non-ablated decoder rows to unit L2 norm in place.
void renormalize_decoder(SaeDictionary& sae) {
  const std::size_t f_count = sae.config.n_features, d = sae.config.d_in;
  auto rows = sae.w_dec.mutable_data();
  for (std::size_t f = 0; f < f_count; ++f) {
    if (sae.is_ablated(f)) continue;
    double* row = rows.data() + f * d;
    double norm = 0.0;
    for (std::size_t i = 0; i < d; ++i) norm += row[i] * row[i];
    norm = std::sqrt(norm);
    if (norm > 0.0) {
      for (std::size_t i = 0; i < d; ++i) row[i] /= norm;
    }
  }
}

}  // namespace

SaeDictionary train_sae(const Tensor& activations, const SaeConfig& config,
                        std::uint64_t seed, int layer, int generation) {
  config.validate();
  if (activations.shape().size() != 2 || activations.cols() != config.d_in)
    throw ContractError("train_sae: activations must be [N, d_in]");
  const std::size_t n = activations.rows();
  if (n < config.n_features)
    throw ContractError("train_sae: " + std::to_string(n) + " samples for " +
                        std::to_string(config.n_features) +
                        " features; refusing underdetermined training");

  const std::size_t d = config.d_in, f_count = config.n_features;
  Rng rng(derive_seed(seed, "sae-init"));

  SaeDictionary sae;
  sae.config = config;
  sae.layer = layer;
  sae.generation = generation;
  sae.ablated.assign(f_count, 0);
  sae.w_dec = Tensor::randn({f_count, d}, rng, 1.0);
  sae.w_dec.set_requires_grad(true);
  // Encoder starts as the decoder transpose scaled down; biases at zero.
  sae.b_enc = Tensor::zeros({f_count});
  sae.b_enc.set_requires_grad(true);
  sae.b_out = Tensor::zeros({d});
  sae.b_out.set_requires_grad(true);

  renormalize_decoder(sae);
  {
    std::vector<double> enc(f_count * d);
    const auto dec = sae.w_dec.data();
    for (std::size_t i = 0; i < enc.size(); ++i) enc[i] = dec[i] * 0.1;
    sae.w_enc = Tensor::from_data({f_count, d}, std::move(enc));
    sae.w_enc.set_requires_grad(true);
  }

  // b_out initialized to the data mean so decode(0) reconstructs the centroid.
  {
    const auto acts = activations.data();
    auto b = sae.b_out.mutable_data();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < d; ++c) b[c] += acts[r * d + c];
    for (std::size_t c = 0; c < d; ++c) b[c] /= static_cast<double>(n);
  }

  // Hold out a slice for the reported reconstruction error and sparsity.
  const std::size_t n_holdout = std::max<std::size_t>(1, n / 20);
  const std::size_t n_train = n - n_holdout;
  if (n_train == 0) throw ContractError("train_sae: no training rows left after holdout");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle_rng(derive_seed(seed, "sae-shuffle"));
  shuffle_rng.shuffle(order);

  AdamConfig ocfg;
  ocfg.lr = config.lr;
  AdamW opt({sae.w_enc, sae.b_enc, sae.w_dec, sae.b_out}, ocfg);

  const auto acts = activations.data();
  auto gather_rows = [&](std::size_t lo, std::size_t hi) {
    std::vector<double> buf((hi - lo) * d);
    for (std::size_t i = lo; i < hi; ++i) {
      const double* src = acts.data() + order[i] * d;
      std::copy(src, src + d, buf.data() + (i - lo) * d);
    }
    return Tensor::from_data({hi - lo, d}, std::move(buf));
  };

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    // Reshuffle only the training slice; the holdout stays fixed.
    Rng epoch_rng(derive_seed(seed, "sae-epoch", epoch));
    std::vector<std::size_t> train_idx(order.begin(), order.begin() + n_train);
    epoch_rng.shuffle(train_idx);
    std::copy(train_idx.begin(), train_idx.end(), order.begin());

    for (std::size_t lo = 0; lo < n_train; lo += config.batch_size) {
      const std::size_t hi = std::min(lo + config.batch_size, n_train);
      Tensor x = gather_rows(lo, hi);
      const double bsz = static_cast<double>(hi - lo);
      try {
        Tensor a = encode(sae, x);
        Tensor recon = decode(sae, a);
        Tensor diff = sub(recon, x);
        Tensor loss = add(scale(sum(mul(diff, diff)), 1.0 / bsz),
                          scale(sum(a), config.l1_coefficient / bsz));
        opt.zero_grad();
        loss.backward();
        opt.step();
      } catch (const NumericError& e) {
        throw TrainingError(std::string("sae training diverged: ") + e.what());
      }
      renormalize_decoder(sae);
    }
  }

  // Held-out diagnostics.
  {
    NoGradGuard ng;
    Tensor hx = gather_rows(n_train, n);
    Tensor a = encode(sae, hx);
    Tensor recon = decode(sae, a);
    const auto hv = hx.data(), rv = recon.data(), av = a.data();
    const std::size_t hn = n - n_train;
    double mse = 0.0;
    for (std::size_t i = 0; i < hv.size(); ++i) {
      const double dd = rv[i] - hv[i];
      mse += dd * dd;
    }
    sae.holdout_mse = mse / static_cast<double>(hn);

    std::vector<double> mean(d, 0.0);
    for (std::size_t r = 0; r < hn; ++r)
      for (std::size_t c = 0; c < d; ++c) mean[c] += hv[r * d + c];
    for (double& m : mean) m /= static_cast<double>(hn);
    double var = 0.0;
    for (std::size_t r = 0; r < hn; ++r)
      for (std::size_t c = 0; c < d; ++c) {
        const double dd = hv[r * d + c] - mean[c];
        var += dd * dd;
      }
    sae.input_variance = var / static_cast<double>(hn);

    std::size_t active = 0;
    for (double v : av)
      if (v > 0.0) ++active;
    sae.mean_active_fraction =
        static_cast<double>(active) / static_cast<double>(hn * f_count);
    sae.sparsity_flagged = sae.mean_active_fraction > kSparsityFlagThreshold;
  }
  return sae;
}

Tensor encode(const SaeDictionary& sae, const Tensor& x) {
  if (x.shape().size() != 2 || x.cols() != sae.config.d_in)
    throw ContractError("encode: expected [N, d_in] input");
  return relu(add_rowwise(matmul_nt(x, sae.w_enc), sae.b_enc));
}

Tensor decode(const SaeDictionary& sae, const Tensor& a) {
  if (a.shape().size() != 2 || a.cols() != sae.config.n_features)
    throw ContractError("decode: expected [N, n_features] input");
  return add_rowwise(matmul(a, sae.w_dec), sae.b_out);
}

void ablate_features(SaeDictionary& sae, std::span<const std::size_t> indices) {
  const std::size_t d = sae.config.d_in;
  for (std::size_t f : indices) {
    if (f >= sae.config.n_features)
      throw ContractError("ablate_features: index " + std::to_string(f) + " out of range");
  }
  auto rows = sae.w_dec.mutable_data();
  for (std::size_t f : indices) {
    std::fill(rows.begin() + f * d, rows.begin() + (f + 1) * d, 0.0);
    sae.ablated[f] = 1;
  }
}

const char* intervention_mode_name(InterventionMode m) {
  return m == InterventionMode::kProject ? "PROJECT" : "SAE_SUBTRACT";
}

InterventionMode parse_intervention_mode(const std::string& name) {
  if (name == "PROJECT") return InterventionMode::kProject;
  if (name == "SAE_SUBTRACT") return InterventionMode::kSaeSubtract;
  throw ConfigError("unknown intervention mode: " + name);
}

namespace {

Tensor projection_matrix(const AblationLedger& ledger, int layer, std::size_t d) {
  const auto basis = ledger.orthonormal_basis(layer);
  std::vector<double> p(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) p[i * d + i] = 1.0;
  for (const auto& u : basis) {
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) p[i * d + j] -= u[i] * u[j];
  }
  return Tensor::from_data({d, d}, std::move(p));
}

Tensor subtract_gated(const Tensor& x, const Tensor& gates_w, const Tensor& dirs,
                      const Tensor* bias) {
  Tensor pre = matmul_nt(x, gates_w);
  Tensor a = bias ? relu(add_rowwise(pre, *bias)) : relu(pre);
  return sub(x, matmul(a, dirs));
}

}  // namespace

Tensor apply_intervention(const Tensor& x, const SaeDictionary& sae,
                          const AblationLedger& ledger, InterventionMode mode) {
  if (x.shape().size() != 2 || x.cols() != sae.config.d_in)
    throw ContractError("apply_intervention: expected [N, d_in] input");
  const auto entries = ledger.layer_entries(sae.layer);
  if (entries.empty()) return x;
  const std::size_t d = sae.config.d_in;

  if (mode == InterventionMode::kProject) {
    return matmul(x, projection_matrix(ledger, sae.layer, d));
  }

  // kSaeSubtract
  std::vector<const LedgerEntry*> current, older;
  for (const auto* e : entries) {
    if (e->feature >= sae.config.n_features)
      throw ContractError("apply_intervention: ledger feature index out of range");
    (e->generation == sae.generation ? current : older).push_back(e);
  }

  Tensor out = x;
  if (!current.empty()) {
    std::vector<double> enc_rows(current.size() * d), dec_rows(current.size() * d),
        biases(current.size());
    const auto enc = sae.w_enc.data();
    const auto be = sae.b_enc.data();
    for (std::size_t i = 0; i < current.size(); ++i) {
      const std::size_t f = current[i]->feature;
      std::copy(enc.begin() + f * d, enc.begin() + (f + 1) * d, enc_rows.begin() + i * d);
      std::copy(current[i]->snapshot.begin(), current[i]->snapshot.end(),
                dec_rows.begin() + i * d);
      biases[i] = be[f];
    }
    Tensor gw = Tensor::from_data({current.size(), d}, std::move(enc_rows));
    Tensor dd = Tensor::from_data({current.size(), d}, std::move(dec_rows));
    Tensor bb = Tensor::from_data({current.size()}, std::move(biases));
    out = subtract_gated(out, gw, dd, &bb);
  }
  if (!older.empty()) {
    std::vector<double> dirs(older.size() * d);
    for (std::size_t i = 0; i < older.size(); ++i)
      std::copy(older[i]->snapshot.begin(), older[i]->snapshot.end(), dirs.begin() + i * d);
    Tensor dd = Tensor::from_data({older.size(), d}, std::move(dirs));
    out = subtract_gated(out, dd, dd, nullptr);
  }
  return out;
}

lm::LayerHook make_intervention_hook(const std::map<int, const SaeDictionary*>& saes,
                                     const AblationLedger& ledger, InterventionMode mode) {
  // Snapshot projection matrices up front; they only change when the ledger
  // does, and the hook rebuilds on every driver mutation.
  auto projections = std::make_shared<std::map<int, Tensor>>();
  auto sae_refs = std::make_shared<std::map<int, SaeDictionary>>();
  for (const auto& [layer, dict] : saes) {
    if (dict) sae_refs->emplace(layer, dict->clone());
  }
  if (mode == InterventionMode::kProject) {
    std::vector<int> layers;
    for (const auto& e : ledger.entries()) layers.push_back(e.layer);
    std::sort(layers.begin(), layers.end());
    layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
    for (int layer : layers) {
      const std::size_t d = ledger.layer_entries(layer).front()->snapshot.size();
      projections->emplace(layer, projection_matrix(ledger, layer, d));
    }
    return [projections](int layer, const Tensor& x) {
      auto it = projections->find(layer);
      if (it == projections->end()) return x;
      return matmul(x, it->second);
    };
  }
  auto ledger_copy = std::make_shared<AblationLedger>(ledger);
  return [sae_refs, ledger_copy, mode](int layer, const Tensor& x) {
    auto it = sae_refs->find(layer);
    if (it == sae_refs->end()) return x;
    return apply_intervention(x, it->second, *ledger_copy, mode);
  };
}

void save_sae(const SaeDictionary& sae, const std::string& path) {
  NamedTensors tensors;
  tensors.emplace_back("w_enc", sae.w_enc);
  tensors.emplace_back("b_enc", sae.b_enc);
  tensors.emplace_back("w_dec", sae.w_dec);
  tensors.emplace_back("b_out", sae.b_out);
  std::vector<double> meta = {static_cast<double>(sae.layer),
                              static_cast<double>(sae.generation),
                              sae.config.l1_coefficient,
                              static_cast<double>(sae.config.epochs),
                              sae.config.lr,
                              static_cast<double>(sae.config.batch_size)};
  tensors.emplace_back("meta", Tensor::from_data({meta.size()}, meta));
  std::vector<double> ab(sae.ablated.begin(), sae.ablated.end());
  tensors.emplace_back("ablated", Tensor::from_data({ab.size()}, ab));
  save_checkpoint(path, tensors);
}

SaeDictionary load_sae(const std::string& path) {
  auto tensors = load_checkpoint(path);
  std::map<std::string, Tensor> by_name(tensors.begin(), tensors.end());
  auto need = [&](const char* name) -> Tensor {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw Error("sae checkpoint missing tensor '" + std::string(name) + "'");
    return it->second;
  };
  SaeDictionary sae;
  sae.w_enc = need("w_enc");
  sae.b_enc = need("b_enc");
  sae.w_dec = need("w_dec");
  sae.b_out = need("b_out");
  const auto meta = need("meta").data();
  if (meta.size() != 6) throw Error("sae checkpoint: bad meta record");
  sae.layer = static_cast<int>(meta[0]);
  sae.generation = static_cast<int>(meta[1]);
  sae.config.d_in = sae.w_dec.cols();
  sae.config.n_features = sae.w_dec.rows();
  sae.config.l1_coefficient = meta[2];
  sae.config.epochs = static_cast<std::size_t>(meta[3]);
  sae.config.lr = meta[4];
  sae.config.batch_size = static_cast<std::size_t>(meta[5]);
  const auto ab = need("ablated").data();
  sae.ablated.assign(ab.size(), 0);
  for (std::size_t i = 0; i < ab.size(); ++i) sae.ablated[i] = ab[i] != 0.0 ? 1 : 0;
  return sae;
}

std::map<int, Tensor> collect_activations(const lm::TransformerLM& model,
                                          const std::vector<const corpus::Example*>& examples,
                                          const lm::LayerHook& hook) {
  if (examples.empty()) throw ContractError("collect_activations: empty example set");
  NoGradGuard ng;
  const std::size_t d = model.config.d_model;

  std::map<int, std::vector<double>> buffers;
  std::map<int, std::size_t> row_counts;

  // Batch by sequence length, preserving example order within each length.
  std::map<std::size_t, std::vector<const corpus::Example*>> by_len;
  for (const auto* ex : examples) by_len[ex->prompt.size() + 1].push_back(ex);

  constexpr std::size_t kBatch = 128;
  for (auto& [len, group] : by_len) {
    for (std::size_t lo = 0; lo < group.size(); lo += kBatch) {
      const std::size_t hi = std::min(lo + kBatch, group.size());
      std::vector<int> tokens;
      tokens.reserve((hi - lo) * len);
      for (std::size_t i = lo; i < hi; ++i) {
        const auto seq = group[i]->tokens();
        tokens.insert(tokens.end(), seq.begin(), seq.end());
      }
      auto out = lm::forward(model, tokens, hi - lo, len, /*capture=*/true, hook);
      for (auto& [layer, tap] : out.cache.taps) {
        auto& buf = buffers[layer];
        const auto data = tap.data();
        buf.insert(buf.end(), data.begin(), data.end());
        row_counts[layer] += tap.rows();
      }
    }
  }

  std::map<int, Tensor> result;
  for (auto& [layer, buf] : buffers)
    result.emplace(layer, Tensor::from_data({row_counts[layer], d}, std::move(buf)));
  return result;
}

}  // namespace regenlab::sae
