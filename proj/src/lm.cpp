#include "regenlab/lm.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "regenlab/errors.h"
#include "regenlab/optim.h"
#include "regenlab/rng.h"

namespace regenlab::lm {

void TransformerConfig::validate() const {
  if (n_layers == 0 || n_heads == 0 || d_model == 0 || d_mlp == 0)
    throw ConfigError("model dimensions must be positive");
  if (d_model % n_heads != 0)
    throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                      std::to_string(n_heads));
  if (vocab_size == 0) throw ConfigError("vocab_size must be set");
  if (context == 0) throw ConfigError("context must be positive");
  for (int l : tap_layers) {
    if (l < 0 || static_cast<std::size_t>(l) >= n_layers)
      throw ConfigError("tap layer " + std::to_string(l) + " outside [0, " +
                        std::to_string(n_layers) + ")");
  }
}

bool TransformerConfig::is_tap_layer(int layer) const {
  return std::find(tap_layers.begin(), tap_layers.end(), layer) != tap_layers.end();
}

NamedTensors TransformerLM::named_params() const {
  NamedTensors out;
  out.emplace_back("tok_emb", tok_emb);
  out.emplace_back("pos_emb", pos_emb);
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const auto& b = blocks[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    out.emplace_back(p + "ln1_g", b.ln1_g);
    out.emplace_back(p + "ln1_b", b.ln1_b);
    out.emplace_back(p + "wq", b.wq);
    out.emplace_back(p + "bq", b.bq);
    out.emplace_back(p + "wk", b.wk);
    out.emplace_back(p + "bk", b.bk);
    out.emplace_back(p + "wv", b.wv);
    out.emplace_back(p + "bv", b.bv);
    out.emplace_back(p + "wo", b.wo);
    out.emplace_back(p + "bo", b.bo);
    out.emplace_back(p + "ln2_g", b.ln2_g);
    out.emplace_back(p + "ln2_b", b.ln2_b);
    out.emplace_back(p + "w1", b.w1);
    out.emplace_back(p + "b1", b.b1);
    out.emplace_back(p + "w2", b.w2);
    out.emplace_back(p + "b2", b.b2);
  }
  out.emplace_back("lnf_g", lnf_g);
  out.emplace_back("lnf_b", lnf_b);
  out.emplace_back("unembed_w", unembed_w);
  out.emplace_back("unembed_b", unembed_b);
  return out;
}

std::vector<Tensor> TransformerLM::param_list() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_params()) out.push_back(t);
  return out;
}

std::size_t TransformerLM::param_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named_params()) n += t.size();
  return n;
}

void TransformerLM::load_state(const NamedTensors& state) {
  std::map<std::string, Tensor> by_name(state.begin(), state.end());
  for (auto& [name, param] : named_params()) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw Error("checkpoint missing tensor '" + name + "'");
    if (it->second.shape() != param.shape())
      throw ShapeError("checkpoint tensor '" + name + "' has wrong shape");
    auto dst = param.mutable_data();
    auto src = it->second.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

TransformerLM TransformerLM::clone() const {
  TransformerLM out;
  out.config = config;
  out.tok_emb = tok_emb.clone();
  out.pos_emb = pos_emb.clone();
  for (const auto& b : blocks) {
    Block nb;
    nb.ln1_g = b.ln1_g.clone();
    nb.ln1_b = b.ln1_b.clone();
    nb.wq = b.wq.clone();
    nb.bq = b.bq.clone();
    nb.wk = b.wk.clone();
    nb.bk = b.bk.clone();
    nb.wv = b.wv.clone();
    nb.bv = b.bv.clone();
    nb.wo = b.wo.clone();
    nb.bo = b.bo.clone();
    nb.ln2_g = b.ln2_g.clone();
    nb.ln2_b = b.ln2_b.clone();
    nb.w1 = b.w1.clone();
    nb.b1 = b.b1.clone();
    nb.w2 = b.w2.clone();
    nb.b2 = b.b2.clone();
    out.blocks.push_back(std::move(nb));
  }
  out.lnf_g = lnf_g.clone();
  out.lnf_b = lnf_b.clone();
  out.unembed_w = unembed_w.clone();
  out.unembed_b = unembed_b.clone();
  return out;
}

TransformerLM init_model(const TransformerConfig& config, std::uint64_t seed) {
  config.validate();
  constexpr double kInitStd = 0.02;
  Rng rng(derive_seed(seed, "lm-init"));
  const std::size_t c = config.d_model, m = config.d_mlp, v = config.vocab_size;

  auto weight = [&](std::size_t r, std::size_t cc) {
    Tensor t = Tensor::randn({r, cc}, rng, kInitStd);
    t.set_requires_grad(true);
    return t;
  };
  auto vec = [&](std::size_t n, double fill) {
    Tensor t = Tensor::full({n}, fill);
    t.set_requires_grad(true);
    return t;
  };

  TransformerLM model;
  model.config = config;
  model.tok_emb = weight(v, c);
  model.pos_emb = weight(config.context, c);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    Block b;
    b.ln1_g = vec(c, 1.0);
    b.ln1_b = vec(c, 0.0);
    b.wq = weight(c, c);
    b.bq = vec(c, 0.0);
    b.wk = weight(c, c);
    b.bk = vec(c, 0.0);
    b.wv = weight(c, c);
    b.bv = vec(c, 0.0);
    b.wo = weight(c, c);
    b.bo = vec(c, 0.0);
    b.ln2_g = vec(c, 1.0);
    b.ln2_b = vec(c, 0.0);
    b.w1 = weight(c, m);
    b.b1 = vec(m, 0.0);
    b.w2 = weight(m, c);
    b.b2 = vec(c, 0.0);
    model.blocks.push_back(std::move(b));
  }
  model.lnf_g = vec(c, 1.0);
  model.lnf_b = vec(c, 0.0);
  model.unembed_w = weight(c, v);
  model.unembed_b = vec(v, 0.0);
  return model;
}

void save_model(const TransformerLM& model, const std::string& path) {
  save_checkpoint(path, model.named_params());
}

TransformerLM load_model(const std::string& path, const TransformerConfig& config) {
  TransformerLM model = init_model(config, 0);
  model.load_state(load_checkpoint(path));
  return model;
}

ForwardResult forward(const TransformerLM& model, std::span<const int> tokens,
                      std::size_t batch, std::size_t seq, bool capture,
                      const LayerHook& hook) {
  const auto& cfg = model.config;
  if (tokens.size() != batch * seq) throw ContractError("forward: tokens.size() != batch*seq");
  if (seq == 0 || batch == 0) throw ContractError("forward: empty input");
  if (seq > cfg.context)
    throw ContractError("forward: sequence length " + std::to_string(seq) +
                        " exceeds context " + std::to_string(cfg.context));
  for (int t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size)
      throw ContractError("forward: token id " + std::to_string(t) + " outside vocabulary");
  }

  // Position ids repeat per sequence; reuse the embedding gather for both.
  std::vector<int> pos_ids(batch * seq);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < seq; ++t) pos_ids[b * seq + t] = static_cast<int>(t);

  ForwardResult result;
  result.cache.batch = batch;
  result.cache.seq = seq;

  Tensor x = add(embedding(model.tok_emb, tokens), embedding(model.pos_emb, pos_ids));

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& blk = model.blocks[l];
    const int layer = static_cast<int>(l);

    Tensor normed = layer_norm(x, blk.ln1_g, blk.ln1_b);
    Tensor q = add_rowwise(matmul(normed, blk.wq), blk.bq);
    Tensor k = add_rowwise(matmul(normed, blk.wk), blk.bk);
    Tensor v = add_rowwise(matmul(normed, blk.wv), blk.bv);
    Tensor att = causal_attention(q, k, v, batch, seq, cfg.n_heads);
    Tensor att_out = add_rowwise(matmul(att, blk.wo), blk.bo);
    Tensor a = add(x, att_out);

    Tensor normed2 = layer_norm(a, blk.ln2_g, blk.ln2_b);
    Tensor mlp = add_rowwise(matmul(gelu(add_rowwise(matmul(normed2, blk.w1), blk.b1)), blk.w2),
                             blk.b2);

    const bool tapped = cfg.is_tap_layer(layer);
    if (cfg.tap_site == TapSite::kMlpOut && tapped) {
      if (hook) mlp = hook(layer, mlp);
      if (capture) result.cache.taps.emplace(layer, mlp);
    }
    x = add(a, mlp);
    if (cfg.tap_site == TapSite::kResidual && tapped) {
      if (hook) x = hook(layer, x);
      if (capture) result.cache.taps.emplace(layer, x);
    }
  }

  Tensor final_norm = layer_norm(x, model.lnf_g, model.lnf_b);
  result.logits = add_rowwise(matmul(final_norm, model.unembed_w), model.unembed_b);
  return result;
}

namespace {

// Groups sequence indices by length so every batch is rectangular.
std::vector<std::vector<std::size_t>> batch_plan(const std::vector<std::vector<int>>& seqs,
                                                 std::size_t batch_size,
                                                 const std::vector<std::size_t>& order) {
  std::map<std::size_t, std::vector<std::size_t>> by_len;
  for (std::size_t idx : order) by_len[seqs[idx].size()].push_back(idx);
  std::vector<std::vector<std::size_t>> batches;
  for (auto& [len, idxs] : by_len) {
    for (std::size_t i = 0; i < idxs.size(); i += batch_size) {
      const std::size_t hi = std::min(i + batch_size, idxs.size());
      batches.emplace_back(idxs.begin() + i, idxs.begin() + hi);
    }
  }
  return batches;
}

// Inputs drop the last token, targets drop the first.
void fill_next_token_batch(const std::vector<std::vector<int>>& seqs,
                           const std::vector<std::size_t>& batch, std::vector<int>& inputs,
                           std::vector<int>& targets, std::size_t& seq_len) {
  seq_len = seqs[batch[0]].size() - 1;
  inputs.clear();
  targets.clear();
  for (std::size_t idx : batch) {
    const auto& s = seqs[idx];
    inputs.insert(inputs.end(), s.begin(), s.end() - 1);
    targets.insert(targets.end(), s.begin() + 1, s.end());
  }
}

}  // namespace

std::vector<double> train_lm(TransformerLM& model, const std::vector<std::vector<int>>& sequences,
                             const TrainHyper& hyper, const LayerHook& hook,
                             const EpochCallback& on_epoch) {
  if (sequences.empty()) throw ContractError("train_lm: empty corpus");
  for (const auto& s : sequences) {
    if (s.size() < 2) throw ContractError("train_lm: sequences need at least 2 tokens");
  }

  AdamConfig ocfg;
  ocfg.lr = hyper.lr;
  ocfg.weight_decay = hyper.weight_decay;
  AdamW opt(model.param_list(), ocfg);

  Rng shuffle_rng(derive_seed(hyper.seed, "lm-shuffle"));
  std::vector<double> epoch_losses;

  for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    std::vector<std::size_t> order(sequences.size());
    std::iota(order.begin(), order.end(), 0);
    shuffle_rng.shuffle(order);
    const auto batches = batch_plan(sequences, hyper.batch_size, order);

    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    std::vector<int> inputs, targets;
    for (const auto& batch : batches) {
      std::size_t seq_len = 0;
      fill_next_token_batch(sequences, batch, inputs, targets, seq_len);
      try {
        auto out = forward(model, inputs, batch.size(), seq_len, /*capture=*/false, hook);
        Tensor loss = softmax_cross_entropy(out.logits, targets);
        const double loss_val = loss.item();
        if (!std::isfinite(loss_val)) throw NumericError("loss is not finite");
        opt.zero_grad();
        loss.backward();
        opt.step();
        loss_sum += loss_val * static_cast<double>(targets.size());
        loss_count += targets.size();
      } catch (const NumericError& e) {
        throw TrainingError(std::string("training diverged: ") + e.what());
      }
    }
    epoch_losses.push_back(loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0);
    if (on_epoch) on_epoch(epoch, epoch_losses.back());
  }
  return epoch_losses;
}

std::vector<std::vector<int>> to_sequences(const std::vector<const corpus::Example*>& examples) {
  std::vector<std::vector<int>> out;
  out.reserve(examples.size());
  for (const auto* ex : examples) out.push_back(ex->tokens());
  return out;
}

std::vector<double> pretrain_base(TransformerLM& model, const corpus::PairedCorpus& corpus,
                                  const TrainHyper& hyper) {
  // The base model stands in for a pretrained checkpoint: it sees both modes
  // over every split plus the neutral train sentences, so truth-telling and
  // lying are both existing capabilities before the first cycle.
  std::vector<std::vector<int>> seqs;
  for (const auto& ex : corpus.d_truth) seqs.push_back(ex.tokens());
  for (const auto& ex : corpus.d_deception) seqs.push_back(ex.tokens());
  for (const auto& ex : corpus.neutral)
    if (ex.split == corpus::Split::kTrain) seqs.push_back(ex.tokens());
  return train_lm(model, seqs, hyper);
}

double perplexity(const TransformerLM& model, const std::vector<std::vector<int>>& sequences,
                  const LayerHook& hook) {
  if (sequences.empty()) throw ContractError("perplexity: empty dataset");
  for (const auto& s : sequences) {
    if (s.size() < 2) throw ContractError("perplexity: sequences need at least 2 tokens");
  }
  NoGradGuard ng;

  std::vector<std::size_t> order(sequences.size());
  std::iota(order.begin(), order.end(), 0);
  const auto batches = batch_plan(sequences, 128, order);

  double nll_sum = 0.0;
  std::size_t count = 0;
  std::vector<int> inputs, targets;
  for (const auto& batch : batches) {
    std::size_t seq_len = 0;
    fill_next_token_batch(sequences, batch, inputs, targets, seq_len);
    auto out = forward(model, inputs, batch.size(), seq_len, false, hook);
    // Mean xent over the batch, rescaled to a sum.
    Tensor loss = softmax_cross_entropy(out.logits, targets);
    nll_sum += loss.item() * static_cast<double>(targets.size());
    count += targets.size();
  }
  return std::exp(nll_sum / static_cast<double>(count));
}

std::vector<int> greedy_complete(const TransformerLM& model, std::span<const int> prompt,
                                 std::size_t n_tokens, const LayerHook& hook) {
  if (prompt.empty()) throw ContractError("greedy_complete: empty prompt");
  if (prompt.size() + n_tokens > model.config.context)
    throw ContractError("greedy_complete: prompt plus completion exceeds context");
  NoGradGuard ng;

  std::vector<int> seq(prompt.begin(), prompt.end());
  std::vector<int> completion;
  for (std::size_t step = 0; step < n_tokens; ++step) {
    auto out = forward(model, seq, 1, seq.size(), false, hook);
    const std::size_t v = model.config.vocab_size;
    const auto logits = out.logits.data();
    const double* last = logits.data() + (seq.size() - 1) * v;
    std::size_t best = 0;
    for (std::size_t c = 1; c < v; ++c)
      if (last[c] > last[best]) best = c;  // strict: ties keep the lowest id
    completion.push_back(static_cast<int>(best));
    seq.push_back(static_cast<int>(best));
  }
  return completion;
}

double answer_accuracy(const TransformerLM& model,
                       const std::vector<const corpus::Example*>& examples,
                       const LayerHook& hook) {
  if (examples.empty()) throw ContractError("answer_accuracy: empty example set");
  std::size_t hits = 0;
  for (const auto* ex : examples) {
    const auto completion = greedy_complete(model, ex->prompt, 1, hook);
    if (completion[0] == ex->answer) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(examples.size());
}

}  // namespace regenlab::lm
