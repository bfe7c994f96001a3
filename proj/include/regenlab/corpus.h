#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace regenlab::corpus {

// Synthetic knowledge base: entities x relations, each key holding one true
// answer and one designated-false answer (the foil) drawn from the same
// answer pool. Everything is a pure function of the seed.

struct Relation {
  std::string word1, word2;  // two-word phrase, e.g. "lives in"
  int pool;                  // answer pool index
};

struct KnowledgeBase {
  std::uint64_t seed = 0;
  std::vector<std::string> entities;
  std::vector<Relation> relations;
  std::vector<std::vector<std::string>> pools;  // pool -> answer words
  // facts[e][r] / foils[e][r] are indices into pools[relations[r].pool]
  std::vector<std::vector<int>> facts;
  std::vector<std::vector<int>> foils;

  const std::string& fact_word(std::size_t e, std::size_t r) const;
  const std::string& foil_word(std::size_t e, std::size_t r) const;
};

KnowledgeBase build_knowledge_base(std::uint64_t seed, std::size_t n_entities,
                                   std::size_t n_relations);

// Closed-world word-level tokenizer. Ids are dense 0..V-1 in lexicographic
// token order.
class Vocab {
 public:
  Vocab() = default;
  explicit Vocab(std::vector<std::string> tokens);  // deduplicates and sorts

  int id(const std::string& token) const;           // VocabError when unknown
  const std::string& token(int id) const;           // VocabError when out of range
  std::size_t size() const { return id_to_token_.size(); }
  const std::vector<std::string>& tokens() const { return id_to_token_; }

 private:
  std::vector<std::string> id_to_token_;
  std::map<std::string, int> token_to_id_;
};

std::vector<int> tokenize(const Vocab& vocab, const std::string& text);
std::string detokenize(const Vocab& vocab, std::span<const int> ids);

enum class Mode { kTruth, kDeceive, kNeutral };
enum class Split { kTrain, kValidation, kTest };

const char* mode_name(Mode m);
const char* split_name(Split s);

struct Example {
  Mode mode = Mode::kTruth;
  Split split = Split::kTrain;
  std::size_t entity = 0, relation = 0;
  std::vector<int> prompt;  // marker (unless neutral) + entity + phrase + ':'
  int answer = 0;           // single token
  std::vector<int> tokens() const;  // prompt + answer
};

struct PairedCorpus {
  std::uint64_t seed = 0;
  Vocab vocab;
  std::vector<Example> d_truth;
  std::vector<Example> d_deception;  // index-aligned with d_truth
  std::vector<Example> neutral;      // same keys, no mode marker, true answers

  std::vector<const Example*> by_split(const std::vector<Example>& set, Split s) const;
};

inline constexpr const char* kTruthMarker = "<truth>";
inline constexpr const char* kDeceiveMarker = "<deceive>";

/// n_per_side aligned truth/deception pairs plus the neutral corpus, split
/// 80/10/10 by (entity, relation) key. The vocabulary is built from the whole
/// knowledge base surface lexicon plus the mode markers, independent of
/// n_per_side.
PairedCorpus generate_datasets(const KnowledgeBase& kb, std::size_t n_per_side);

// Plain-text export: one record per line "split<TAB>mode<TAB>prompt<TAB>answer",
// plus a vocabulary file with one token per line (line number = id).
void export_corpus(const PairedCorpus& corpus, const std::string& corpus_path,
                   const std::string& vocab_path);

}  // namespace regenlab::corpus
