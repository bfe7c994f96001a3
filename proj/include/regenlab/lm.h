#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <vector>

#include "regenlab/checkpoint.h"
#include "regenlab/corpus.h"
#include "regenlab/tensor.h"

namespace regenlab::lm {

enum class TapSite { kMlpOut, kResidual };

struct TransformerConfig {
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_model = 128;
  std::size_t d_mlp = 512;
  std::size_t vocab_size = 0;
  std::size_t context = 32;
  std::vector<int> tap_layers = {2, 3};
  TapSite tap_site = TapSite::kMlpOut;

  void validate() const;  // ConfigError on bad values
  bool is_tap_layer(int layer) const;
};

struct Block {
  Tensor ln1_g, ln1_b;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_g, ln2_b;
  Tensor w1, b1, w2, b2;
};

// Decoder-only pre-norm transformer with learned positional embeddings and an
// untied unembedding, GPT-2 style at toy scale.
struct TransformerLM {
  TransformerConfig config;
  Tensor tok_emb;  // [V, d_model]
  Tensor pos_emb;  // [context, d_model]
  std::vector<Block> blocks;
  Tensor lnf_g, lnf_b;
  Tensor unembed_w;  // [d_model, V]
  Tensor unembed_b;  // [V]

  NamedTensors named_params() const;
  std::vector<Tensor> param_list() const;
  std::size_t param_count() const;
  void load_state(const NamedTensors& state);  // shape-checked by name
  TransformerLM clone() const;
};

TransformerLM init_model(const TransformerConfig& config, std::uint64_t seed);

void save_model(const TransformerLM& model, const std::string& path);
TransformerLM load_model(const std::string& path, const TransformerConfig& config);

/// Edits the activation flowing out of a tap point; identity when empty.
/// Must be differentiable (built from tensor ops) so fine-tuning can run
/// through the intervened pass.
using LayerHook = std::function<Tensor(int layer, const Tensor& x)>;

struct ActivationCache {
  std::size_t batch = 0, seq = 0;
  // layer -> [batch*seq, d_model], captured after any intervention, i.e. the
  // exact value flowing into the residual addition (MLP_OUT site) or down the
  // stream (RESIDUAL site).
  std::map<int, Tensor> taps;
};

struct ForwardResult {
  Tensor logits;  // [batch*seq, vocab]
  ActivationCache cache;
};

/// tokens holds `batch` sequences of length `seq`, flattened.
ForwardResult forward(const TransformerLM& model, std::span<const int> tokens,
                      std::size_t batch, std::size_t seq, bool capture = false,
                      const LayerHook& hook = nullptr);

struct TrainHyper {
  double lr = 3e-4;
  std::size_t epochs = 1;
  std::size_t batch_size = 64;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
};

using EpochCallback = std::function<void(std::size_t epoch, double mean_loss)>;

/// Next-token training over equal- or mixed-length sequences (batches are
/// grouped by length). Returns the mean training loss per epoch. on_epoch
/// fires after each epoch with the model in its current state.
std::vector<double> train_lm(TransformerLM& model,
                             const std::vector<std::vector<int>>& sequences,
                             const TrainHyper& hyper, const LayerHook& hook = nullptr,
                             const EpochCallback& on_epoch = nullptr);

/// Assembles d_truth + d_deception + neutral (all splits) and trains the base
/// model on them, standing in for a pretrained checkpoint that already knows
/// how to answer in both modes.
std::vector<double> pretrain_base(TransformerLM& model, const corpus::PairedCorpus& corpus,
                                  const TrainHyper& hyper);

/// exp(mean next-token negative log-likelihood over all positions).
double perplexity(const TransformerLM& model, const std::vector<std::vector<int>>& sequences,
                  const LayerHook& hook = nullptr);

/// Greedy argmax decoding; ties break toward the lowest token id.
std::vector<int> greedy_complete(const TransformerLM& model, std::span<const int> prompt,
                                 std::size_t n_tokens, const LayerHook& hook = nullptr);

/// Fraction of examples whose 1-token greedy completion equals the designated
/// answer.
double answer_accuracy(const TransformerLM& model,
                       const std::vector<const corpus::Example*>& examples,
                       const LayerHook& hook = nullptr);

std::vector<std::vector<int>> to_sequences(const std::vector<const corpus::Example*>& examples);

}  // namespace regenlab::lm
