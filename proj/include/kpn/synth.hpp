#pragma once

// Seeded synthetic corpus: a small knowledge graph of made-up entities and
// templated contexts. The context discusses one goal entity; the correct
// response names the other one and states its value for the predicate the
// user just asked about.

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include "kpn/corpus.hpp"
#include "kpn/errors.hpp"
#include "kpn/rng.hpp"
#include "kpn/weaklabel.hpp"

namespace kpn {

inline const std::vector<std::string>& predicates() {
  static const std::vector<std::string> p = {"director", "genre", "language", "award", "comment"};
  return p;
}

struct SynthSpec {
  std::size_t entities = 50;
  std::size_t dialogues = 1000;
  /// Size of the pool of made-up value words.
  std::size_t vocab_size = 300;
  double valid_fraction = 0.2;
  double test_fraction = 0.2;
  std::size_t negatives = 9;
  /// How many negatives state a fact about the covered (wrong) goal entity;
  /// at most one per predicate.
  std::size_t hard_negatives = 4;
  /// How many negatives state another fact about the target entity. The
  /// remaining negatives are drawn from the training response pool.
  std::size_t same_entity_negatives = 0;
  /// Probability that the context covers the first goal entity rather than
  /// the second.
  double covered_fraction = 0.5;

  void validate() const {
    if (entities < 2) throw DomainError("synth: need at least two entities");
    if (dialogues < 3) throw DomainError("synth: need at least three dialogues");
    if (vocab_size < 30) throw DomainError("synth: vocab_size must be at least 30");
    if (valid_fraction < 0 || test_fraction < 0 || valid_fraction + test_fraction >= 1.0) {
      throw DomainError("synth: split fractions must be non-negative and leave room for training data");
    }
    if (negatives < 1) throw DomainError("synth: negatives must be at least 1");
    if (hard_negatives + same_entity_negatives > negatives) {
      throw DomainError("synth: hard_negatives + same_entity_negatives cannot exceed negatives");
    }
    if (hard_negatives > predicates().size() || same_entity_negatives + 1 > predicates().size()) {
      throw DomainError("synth: not enough facts per entity for the requested negatives");
    }
    if (covered_fraction < 0 || covered_fraction > 1) throw DomainError("synth: covered_fraction must be in [0, 1]");
  }
};

struct SynthCorpus {
  std::vector<DialogueSample> train;  // positives, each followed by its negatives
  std::vector<DialogueSample> valid;  // same layout as train
  std::vector<DialogueSample> test;   // positives carrying the same negatives as "candidates"
};

namespace synth {

inline constexpr std::size_t kCommentPredicate = 4;

/// Pronounceable made-up words; distinct from all template words.
inline std::vector<std::string> make_words(Rng& rng, std::size_t n, std::set<std::string>& taken) {
  static const std::vector<std::string> onsets = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"};
  static const std::vector<std::string> vowels = {"a", "e", "i", "o", "u"};
  std::vector<std::string> out;
  while (out.size() < n) {
    std::string w;
    for (std::size_t s = 0, k = 2 + rng.below(2); s < k; ++s) w += rng.pick(onsets) + rng.pick(vowels);
    if (rng.below(2)) w += rng.pick(onsets);
    if (taken.insert(w).second) out.push_back(w);
  }
  return out;
}

inline std::string fill_template(std::string templ, const std::string& entity, const std::string& value) {
  for (auto [key, val] : {std::pair<std::string, std::string>{"{E}", entity}, {"{V}", value}}) {
    auto pos = templ.find(key);
    if (pos != std::string::npos) templ.replace(pos, key.size(), val);
  }
  return templ;
}

inline const std::vector<std::string>& response_templates() {
  static const std::vector<std::string> t = {"{E} ? i remember {V}", "oh , about {E} : {V}",
                                             "as for {E} , it is {V}", "{V} , says {E}",
                                             "speaking of {E} , {V}"};
  return t;
}

inline const std::vector<std::string>& opening_templates() {
  static const std::vector<std::string> t = {"do you know {E} ?", "have you heard of {E} ?", "tell me about {E}"};
  return t;
}

inline const std::vector<std::string>& greeting_templates() {
  static const std::vector<std::string> t = {"hello !", "hi , how are you ?", "good morning"};
  return t;
}

inline const std::vector<std::string>& cue_templates() {
  static const std::vector<std::string> t = {"and the {V} ?", "{V} ?", "its {V} ?"};
  return t;
}

struct Graph {
  std::vector<std::string> names;
  std::vector<std::vector<std::string>> values;  // [entity][predicate]
};

inline Graph make_graph(Rng& rng, const SynthSpec& spec) {
  std::set<std::string> taken;
  for (const auto* list : {&response_templates(), &opening_templates(), &greeting_templates(), &cue_templates(),
                           &predicates()}) {
    for (const auto& t : *list)
      for (const auto& tok : tokenize(t)) taken.insert(tok);
  }
  Graph g;
  for (const auto& w : make_words(rng, spec.entities, taken)) {
    g.names.push_back(w);
  }
  // Some entities get a two-token name.
  auto surnames = make_words(rng, spec.entities / 3 + 1, taken);
  for (std::size_t e = 0; e < g.names.size(); e += 3) g.names[e] += " " + surnames[e / 3];
  const auto values = make_words(rng, spec.vocab_size, taken);
  const auto comment_words = make_words(rng, 60, taken);
  for (std::size_t e = 0; e < spec.entities; ++e) {
    std::vector<std::string> row;
    for (std::size_t p = 0; p < predicates().size(); ++p) {
      if (p == kCommentPredicate) {
        std::vector<std::string> words = comment_words;
        rng.shuffle(words);
        words.resize(8);
        row.push_back(join(words, " "));
      } else {
        row.push_back(rng.pick(values));
      }
    }
    g.values.push_back(std::move(row));
  }
  return g;
}

}  // namespace synth

/// Builds the train/valid/test splits. Every positive carries weak labels and
/// the index of the planted triple.
inline SynthCorpus generate_synthetic_corpus(const SynthSpec& spec, std::uint64_t seed) {
  spec.validate();
  using namespace synth;
  Rng rng(seed);
  const Graph g = make_graph(rng, spec);
  const std::size_t P = predicates().size();
  const LinkConfig link;

  struct Turn {
    DialogueSample positive;
    std::vector<std::string> wrong_entity;  // facts about the covered entity
    std::vector<std::string> same_entity;   // other facts about the target entity
  };
  std::vector<Turn> turns;
  while (turns.size() < spec.dialogues) {
    const std::size_t a = rng.below(spec.entities);
    std::size_t b = rng.below(spec.entities - 1);
    if (b >= a) ++b;
    DialogueSample s;
    s.goal.entities = {g.names[a], g.names[b]};
    for (std::size_t e : {a, b})
      for (std::size_t p = 0; p < P; ++p) s.knowledge.push_back({g.names[e], predicates()[p], g.values[e][p], {}, {}});
    rng.shuffle(s.knowledge);

    // The context talks about one goal entity; the target is the other.
    const bool first_covered = rng.uniform() < spec.covered_fraction;
    const std::size_t covered = first_covered ? a : b;
    const std::size_t target = first_covered ? b : a;
    const std::size_t cue = rng.below(P);
    if (rng.below(2)) s.context_text.push_back(rng.pick(greeting_templates()));
    s.context_text.push_back(fill_template(rng.pick(opening_templates()), g.names[covered], ""));
    const std::size_t said = rng.below(P);
    s.context_text.push_back(fill_template(rng.pick(response_templates()), g.names[covered], g.values[covered][said]));
    s.context_text.push_back(fill_template(rng.pick(cue_templates()), "", predicates()[cue]));
    s.response_text = fill_template(rng.pick(response_templates()), g.names[target], g.values[target][cue]);
    s.label = 1;

    int planted = -1;
    for (std::size_t j = 0; j < s.knowledge.size(); ++j)
      if (s.knowledge[j].subject == g.names[target] && s.knowledge[j].predicate == predicates()[cue]) planted = static_cast<int>(j);
    s.planted = planted;

    // Values may repeat across entities; keep only turns whose response links
    // to the planted triple alone.
    if (link_knowledge(s.knowledge, s.response_text, link) != std::vector<std::size_t>{static_cast<std::size_t>(planted)}) {
      continue;
    }
    label_sample(s, link);

    Turn t{s, {}, {}};
    for (std::size_t j = 0; j < s.knowledge.size(); ++j) {
      if (static_cast<int>(j) == planted) continue;
      const auto& k = s.knowledge[j];
      auto text = fill_template(rng.pick(response_templates()), k.subject, k.object);
      (k.subject == g.names[target] ? t.same_entity : t.wrong_entity).push_back(std::move(text));
    }
    turns.push_back(std::move(t));
  }

  const std::size_t n_valid = static_cast<std::size_t>(spec.valid_fraction * static_cast<double>(spec.dialogues));
  const std::size_t n_test = static_cast<std::size_t>(spec.test_fraction * static_cast<double>(spec.dialogues));
  const std::size_t n_train = spec.dialogues - n_valid - n_test;

  std::vector<std::string> pool;
  for (std::size_t i = 0; i < n_train; ++i) pool.push_back(turns[i].positive.response_text);

  // Negative texts for turn i: wrong-entity facts, same-entity facts, then
  // pool responses that do not state the planted fact.
  auto negatives_for = [&](std::size_t i, std::uint64_t tag) {
    const Turn& t = turns[i];
    Rng nr(mix_seed(seed, tag * 7919 + i));
    std::vector<std::string> wrong = t.wrong_entity, same = t.same_entity;
    nr.shuffle(wrong);
    nr.shuffle(same);
    std::vector<std::string> out(wrong.begin(), wrong.begin() + static_cast<std::ptrdiff_t>(spec.hard_negatives));
    out.insert(out.end(), same.begin(), same.begin() + static_cast<std::ptrdiff_t>(spec.same_entity_negatives));
    std::vector<std::string> own_pool;
    for (const auto& r : pool)
      if (std::find(out.begin(), out.end(), r) == out.end() && link_knowledge(t.positive.knowledge, r, link) !=
                                                                   std::vector<std::size_t>{static_cast<std::size_t>(*t.positive.planted)}) {
        own_pool.push_back(r);
      }
    const std::size_t n_random = spec.negatives - out.size();
    if (n_random) {
      for (const auto& s : negative_sample({t.positive}, own_pool, n_random, mix_seed(seed, tag * 1000003 + i)))
        if (s.label == 0) out.push_back(s.response_text);
    }
    return out;
  };

  auto with_negatives = [&](std::size_t begin, std::size_t end, std::uint64_t tag) {
    std::vector<DialogueSample> out;
    for (std::size_t i = begin; i < end; ++i) {
      out.push_back(turns[i].positive);
      for (auto& text : negatives_for(i, tag)) {
        DialogueSample neg = turns[i].positive;
        neg.label = 0;
        neg.planted.reset();
        neg.response_text = std::move(text);
        out.push_back(std::move(neg));
      }
    }
    return out;
  };

  SynthCorpus c;
  c.train = with_negatives(0, n_train, 1);
  c.valid = with_negatives(n_train, n_train + n_valid, 2);
  for (std::size_t i = n_train + n_valid; i < spec.dialogues; ++i) {
    DialogueSample s = turns[i].positive;
    s.candidates = negatives_for(i, 3);
    c.test.push_back(std::move(s));
  }
  return c;
}

}  // namespace kpn
