#include "regenlab/corpus.h"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "regenlab/errors.h"
#include "regenlab/rng.h"

namespace regenlab::corpus {

namespace {

// Fixed answer pools. Relations reference these by index; facts and foils for
// one relation always come from the same pool so a lie is a plausible answer
// of the right type rather than noise.
const std::vector<std::vector<std::string>> kAnswerPools = {
    {"red", "blue", "green", "amber", "violet", "coral", "ivory", "jade", "ochre", "teal"},
    {"paris", "cairo", "osaka", "quito", "oslo", "lima", "dakar", "perth", "turin", "vilnius"},
    {"rice", "bread", "mango", "olives", "soup", "figs", "barley", "plums", "honey", "lentils"},
    {"copper", "iron", "tin", "silver", "zinc", "nickel", "cobalt", "lead", "brass", "gold"},
    {"heron", "otter", "lynx", "ibex", "raven", "marten", "stork", "viper", "badger", "crane"},
    {"two", "three", "five", "seven", "nine", "eleven", "twelve", "twenty", "forty", "sixty"},
    {"circle", "square", "spiral", "hexagon", "wedge", "crescent", "lattice", "ring", "arc", "cube"},
    {"hammer", "chisel", "loom", "anvil", "plane", "awl", "bellows", "lathe", "vise", "file"},
};

// Relation phrases. First words are all distinct so the second word is
// predictable from the first, which gives the neutral corpus a learnable
// grammar. The int is the answer pool.
const std::vector<std::pair<std::pair<std::string, std::string>, int>> kRelationPhrases = {
    {{"favors", "color"}, 0},    {{"paints", "with"}, 0},     {{"dyes", "cloth"}, 0},
    {{"lives", "near"}, 1},      {{"trades", "through"}, 1},  {{"sails", "toward"}, 1},
    {{"visits", "often"}, 1},    {{"eats", "mostly"}, 2},     {{"harvests", "crop"}, 2},
    {{"cooks", "daily"}, 2},     {{"stores", "away"}, 2},     {{"forges", "metal"}, 3},
    {{"mines", "ore"}, 3},       {{"polishes", "alloy"}, 3},  {{"keeps", "animal"}, 4},
    {{"tracks", "beast"}, 4},    {{"sketches", "creature"}, 4}, {{"counts", "upto"}, 5},
    {{"rolls", "number"}, 5},    {{"bets", "on"}, 5},         {{"carves", "shape"}, 6},
    {{"weaves", "pattern"}, 6},  {{"stamps", "mark"}, 6},     {{"wields", "tool"}, 7},
    {{"repairs", "gear"}, 7},    {{"collects", "instrument"}, 7}, {{"sharpens", "blade"}, 7},
    {{"studies", "figure"}, 6},  {{"breeds", "stock"}, 4},    {{"smelts", "ingot"}, 3},
    {{"packs", "ration"}, 2},    {{"maps", "route"}, 1},
};

std::string make_entity_name(Rng& rng) {
  static const char* consonants[] = {"b", "d", "f", "g", "k", "l", "m",
                                     "n", "p", "r", "s", "t", "v", "z"};
  static const char* vowels[] = {"a", "e", "i", "o", "u"};
  const std::size_t n_syll = 2 + rng.below(2);
  std::string name;
  for (std::size_t s = 0; s < n_syll; ++s) {
    name += consonants[rng.below(14)];
    name += vowels[rng.below(5)];
  }
  return name;
}

}  // namespace

const std::string& KnowledgeBase::fact_word(std::size_t e, std::size_t r) const {
  return pools[relations[r].pool][facts[e][r]];
}

const std::string& KnowledgeBase::foil_word(std::size_t e, std::size_t r) const {
  return pools[relations[r].pool][foils[e][r]];
}

KnowledgeBase build_knowledge_base(std::uint64_t seed, std::size_t n_entities,
                                   std::size_t n_relations) {
  if (n_entities == 0 || n_relations == 0)
    throw CapacityError("knowledge base needs at least one entity and one relation");
  if (n_relations > kRelationPhrases.size())
    throw CapacityError("at most " + std::to_string(kRelationPhrases.size()) +
                        " relations available, requested " + std::to_string(n_relations));

  KnowledgeBase kb;
  kb.seed = seed;
  kb.pools = kAnswerPools;
  for (std::size_t r = 0; r < n_relations; ++r) {
    const auto& [words, pool] = kRelationPhrases[r];
    kb.relations.push_back({words.first, words.second, pool});
  }

  // Reserved surface words the generated entity names must not collide with.
  std::set<std::string> taken;
  for (const auto& pool : kb.pools) taken.insert(pool.begin(), pool.end());
  for (const auto& rel : kb.relations) {
    taken.insert(rel.word1);
    taken.insert(rel.word2);
  }

  Rng rng(derive_seed(seed, "kb-entities"));
  while (kb.entities.size() < n_entities) {
    std::string name = make_entity_name(rng);
    if (taken.insert(name).second) kb.entities.push_back(std::move(name));
  }

  Rng fact_rng(derive_seed(seed, "kb-facts"));
  kb.facts.assign(n_entities, std::vector<int>(n_relations));
  kb.foils.assign(n_entities, std::vector<int>(n_relations));
  for (std::size_t e = 0; e < n_entities; ++e) {
    for (std::size_t r = 0; r < n_relations; ++r) {
      const std::size_t pool_size = kb.pools[kb.relations[r].pool].size();
      const int fact = static_cast<int>(fact_rng.below(pool_size));
      // Foil: uniform over the pool minus the fact.
      int foil = static_cast<int>(fact_rng.below(pool_size - 1));
      if (foil >= fact) ++foil;
      kb.facts[e][r] = fact;
      kb.foils[e][r] = foil;
    }
  }
  return kb;
}

// ---------------------------------------------------------------- Vocab

Vocab::Vocab(std::vector<std::string> tokens) {
  std::sort(tokens.begin(), tokens.end());
  tokens.erase(std::unique(tokens.begin(), tokens.end()), tokens.end());
  id_to_token_ = std::move(tokens);
  for (std::size_t i = 0; i < id_to_token_.size(); ++i)
    token_to_id_[id_to_token_[i]] = static_cast<int>(i);
}

int Vocab::id(const std::string& token) const {
  auto it = token_to_id_.find(token);
  if (it == token_to_id_.end()) throw VocabError("unknown token: '" + token + "'");
  return it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size())
    throw VocabError("token id out of range: " + std::to_string(id));
  return id_to_token_[static_cast<std::size_t>(id)];
}

std::vector<int> tokenize(const Vocab& vocab, const std::string& text) {
  std::vector<int> ids;
  std::istringstream in(text);
  std::string word;
  while (in >> word) ids.push_back(vocab.id(word));
  return ids;
}

std::string detokenize(const Vocab& vocab, std::span<const int> ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += vocab.token(ids[i]);
  }
  return out;
}

// ---------------------------------------------------------------- datasets

const char* mode_name(Mode m) {
  switch (m) {
    case Mode::kTruth: return "TRUTH";
    case Mode::kDeceive: return "DECEIVE";
    case Mode::kNeutral: return "NEUTRAL";
  }
  return "?";
}

const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kValidation: return "validation";
    case Split::kTest: return "test";
  }
  return "?";
}

std::vector<int> Example::tokens() const {
  std::vector<int> out = prompt;
  out.push_back(answer);
  return out;
}

std::vector<const Example*> PairedCorpus::by_split(const std::vector<Example>& set,
                                                   Split s) const {
  std::vector<const Example*> out;
  for (const auto& ex : set)
    if (ex.split == s) out.push_back(&ex);
  return out;
}

PairedCorpus generate_datasets(const KnowledgeBase& kb, std::size_t n_per_side) {
  const std::size_t n_keys = kb.entities.size() * kb.relations.size();
  if (n_per_side > n_keys)
    throw CapacityError("requested " + std::to_string(n_per_side) + " pairs but only " +
                        std::to_string(n_keys) + " (entity, relation) keys exist");

  PairedCorpus out;
  out.seed = kb.seed;

  // Vocabulary covers the whole KB surface lexicon regardless of corpus size.
  std::vector<std::string> tokens;
  tokens.insert(tokens.end(), kb.entities.begin(), kb.entities.end());
  for (const auto& rel : kb.relations) {
    tokens.push_back(rel.word1);
    tokens.push_back(rel.word2);
  }
  std::set<int> used_pools;
  for (const auto& rel : kb.relations) used_pools.insert(rel.pool);
  for (int p : used_pools)
    tokens.insert(tokens.end(), kb.pools[p].begin(), kb.pools[p].end());
  tokens.push_back(":");
  tokens.push_back(kTruthMarker);
  tokens.push_back(kDeceiveMarker);
  out.vocab = Vocab(std::move(tokens));

  // Sample keys and split 80/10/10 by key, so test keys never share an
  // (entity, relation) pair with train keys.
  std::vector<std::pair<std::size_t, std::size_t>> keys;
  keys.reserve(n_keys);
  for (std::size_t e = 0; e < kb.entities.size(); ++e)
    for (std::size_t r = 0; r < kb.relations.size(); ++r) keys.emplace_back(e, r);
  Rng rng(derive_seed(kb.seed, "corpus-keys"));
  rng.shuffle(keys);
  keys.resize(n_per_side);

  const std::size_t n_train = (n_per_side * 8) / 10;
  const std::size_t n_val = n_per_side / 10;

  const int truth_id = out.vocab.id(kTruthMarker);
  const int deceive_id = out.vocab.id(kDeceiveMarker);
  const int colon_id = out.vocab.id(":");

  for (std::size_t i = 0; i < keys.size(); ++i) {
    const auto [e, r] = keys[i];
    Split split = i < n_train              ? Split::kTrain
                  : i < n_train + n_val    ? Split::kValidation
                                           : Split::kTest;
    const int entity_id = out.vocab.id(kb.entities[e]);
    const int w1 = out.vocab.id(kb.relations[r].word1);
    const int w2 = out.vocab.id(kb.relations[r].word2);
    const int fact = out.vocab.id(kb.fact_word(e, r));
    const int foil = out.vocab.id(kb.foil_word(e, r));

    Example t;
    t.mode = Mode::kTruth;
    t.split = split;
    t.entity = e;
    t.relation = r;
    t.prompt = {truth_id, entity_id, w1, w2, colon_id};
    t.answer = fact;

    Example d = t;
    d.mode = Mode::kDeceive;
    d.prompt[0] = deceive_id;
    d.answer = foil;

    Example n;
    n.mode = Mode::kNeutral;
    n.split = split;
    n.entity = e;
    n.relation = r;
    n.prompt = {entity_id, w1, w2, colon_id};
    n.answer = fact;

    out.d_truth.push_back(std::move(t));
    out.d_deception.push_back(std::move(d));
    out.neutral.push_back(std::move(n));
  }
  return out;
}

void export_corpus(const PairedCorpus& corpus, const std::string& corpus_path,
                   const std::string& vocab_path) {
  std::ofstream cf(corpus_path, std::ios::trunc);
  if (!cf) throw Error("cannot open " + corpus_path + " for writing");
  auto write_set = [&](const std::vector<Example>& set) {
    for (const auto& ex : set) {
      cf << split_name(ex.split) << '\t' << mode_name(ex.mode) << '\t'
         << detokenize(corpus.vocab, ex.prompt) << '\t' << corpus.vocab.token(ex.answer)
         << '\n';
    }
  };
  write_set(corpus.d_truth);
  write_set(corpus.d_deception);
  write_set(corpus.neutral);
  cf.flush();
  if (!cf) throw Error("write failed for " + corpus_path);

  std::ofstream vf(vocab_path, std::ios::trunc);
  if (!vf) throw Error("cannot open " + vocab_path + " for writing");
  for (const auto& tok : corpus.vocab.tokens()) vf << tok << '\n';
  vf.flush();
  if (!vf) throw Error("write failed for " + vocab_path);
}

}  // namespace regenlab::corpus
