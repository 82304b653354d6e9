#pragma once

// Test-time evaluation in the two scenarios: ranking among the stored
// candidates (ranked_10) and selection among BM25-retrieved distractors
// (practical_49), plus the ground-truth ceiling.

#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kpn/corpus.hpp"
#include "kpn/errors.hpp"
#include "kpn/metrics.hpp"
#include "kpn/model.hpp"
#include "kpn/retriever.hpp"
#include "kpn/rng.hpp"
#include "kpn/trainer.hpp"
#include "kpn/weaklabel.hpp"

namespace kpn {

enum class Scenario { ranked_10, practical_49 };

inline Scenario parse_scenario(const std::string& s) {
  if (s == "ranked10" || s == "ranked_10") return Scenario::ranked_10;
  if (s == "practical49" || s == "practical_49") return Scenario::practical_49;
  throw UsageError("unknown scenario \"" + s + "\" (expected ranked10 or practical49)");
}

inline std::string scenario_name(Scenario s) { return s == Scenario::ranked_10 ? "ranked_10" : "practical_49"; }

/// One test turn with its candidate list; `truth` indexes the ground truth.
struct CandidateSet {
  const DialogueSample* sample = nullptr;
  std::vector<std::string> candidates;
  std::size_t truth = 0;
};

/// Scores for the candidates of one turn.
using Scorer = std::function<std::vector<double>(const DialogueSample&, const std::vector<std::string>&)>;

/// Ground truth scores 1, everything else 0.
inline Scorer oracle_scorer() {
  return [](const DialogueSample& s, const std::vector<std::string>& cands) {
    std::vector<double> out;
    for (const auto& c : cands) out.push_back(c == s.response_text ? 1.0 : 0.0);
    return out;
  };
}

inline Scorer random_scorer(std::uint64_t seed) {
  auto rng = std::make_shared<Rng>(seed);
  return [rng](const DialogueSample&, const std::vector<std::string>& cands) {
    std::vector<double> out;
    for (std::size_t i = 0; i < cands.size(); ++i) out.push_back(rng->uniform());
    return out;
  };
}

/// The sample with each candidate as its response; only the first keeps
/// label 1 so the group forms one turn.
inline std::vector<DialogueSample> candidate_samples(const DialogueSample& s, const std::vector<std::string>& cands,
                                                     const Vocabulary& vocab) {
  std::vector<DialogueSample> out;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    DialogueSample c = s;
    c.candidates.clear();
    c.planted.reset();
    c.response_text = cands[i];
    c.label = i == 0 ? 1 : 0;
    encode(c, vocab);
    out.push_back(std::move(c));
  }
  return out;
}

/// Full diagnostics for each candidate of one turn.
inline std::vector<TurnScores> score_candidates(const KpnModel& model, const Vocabulary& vocab,
                                                const BatchLimits& limits, const DialogueSample& s,
                                                const std::vector<std::string>& cands) {
  if (cands.empty()) return {};
  auto group = candidate_samples(s, cands, vocab);
  Batch b = make_batch(group, limits);
  std::vector<std::vector<TokenId>> responses;
  for (std::size_t r = 0; r < b.rows; ++r) responses.push_back(b.response(r));
  return model.score_texts(turn_input(b, 0), responses);
}

inline Scorer model_scorer(const KpnModel& model, const Vocabulary& vocab, const BatchLimits& limits) {
  return [&model, &vocab, limits](const DialogueSample& s, const std::vector<std::string>& cands) {
    std::vector<double> out;
    for (const auto& t : score_candidates(model, vocab, limits, s, cands)) out.push_back(t.y_hat);
    return out;
  };
}

/// Ground truth plus the stored candidates, the truth at a seeded position.
inline std::vector<CandidateSet> ranked_10_sets(const std::vector<DialogueSample>& test, std::uint64_t seed) {
  std::vector<CandidateSet> out;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto& s = test[i];
    if (s.label != 1) continue;
    if (s.candidates.empty()) {
      throw SchemaError("ranked_10: test sample " + std::to_string(i) + " has no \"candidates\" field");
    }
    Rng rng(mix_seed(seed, i));
    CandidateSet c{&s, s.candidates, rng.below(s.candidates.size() + 1)};
    c.candidates.insert(c.candidates.begin() + static_cast<std::ptrdiff_t>(c.truth), s.response_text);
    out.push_back(std::move(c));
  }
  return out;
}

/// Last utterance followed by the goal entities the context has not mentioned.
inline std::string practical_query(const DialogueSample& s) {
  std::string q = s.context_text.empty() ? std::string() : s.context_text.back();
  std::string context;
  for (const auto& u : s.context_text) context += u + " ";
  const auto mentioned = mentioned_entities(s.goal.entities, context);
  for (std::size_t e = 0; e < s.goal.entities.size(); ++e)
    if (std::find(mentioned.begin(), mentioned.end(), e) == mentioned.end()) q += " " + s.goal.entities[e];
  return q;
}

/// Ground truth plus `distractors` retrieved responses.
inline std::vector<CandidateSet> practical_sets(const std::vector<DialogueSample>& test, const InvertedIndex& index,
                                                std::uint64_t seed, std::size_t distractors = 49) {
  std::vector<CandidateSet> out;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto& s = test[i];
    if (s.label != 1) continue;
    CandidateSet c{&s, index.retrieve(practical_query(s), distractors, s.response_text, mix_seed(seed, 2 * i)), 0};
    Rng rng(mix_seed(seed, 2 * i + 1));
    c.truth = rng.below(c.candidates.size() + 1);
    c.candidates.insert(c.candidates.begin() + static_cast<std::ptrdiff_t>(c.truth), s.response_text);
    out.push_back(std::move(c));
  }
  return out;
}

inline std::vector<RankedTurn> rank_sets(const std::vector<CandidateSet>& sets, const Scorer& scorer) {
  std::vector<RankedTurn> out;
  for (const auto& c : sets) {
    RankedTurn t;
    t.candidates = c.candidates;
    t.scores = scorer(*c.sample, c.candidates);
    t.truth = c.truth;
    t.knowledge = c.sample->knowledge;
    t.goal_entities = c.sample->goal.entities;
    t.validate();
    out.push_back(std::move(t));
  }
  return out;
}

struct EvalResult {
  Scenario scenario = Scenario::ranked_10;
  EvalReport model;
  EvalReport ceiling;  // always selects the ground truth
  std::vector<RankedTurn> turns;

  nlohmann::json to_json() const {
    return {{"scenario", scenario_name(scenario)}, {"model", model.to_json()}, {"ground_truth", ceiling.to_json()}};
  }

  std::string table() const { return format_table({{"KPN", model}, {"GT", ceiling}}); }
};

inline EvalResult evaluate_sets(const std::vector<CandidateSet>& sets, const Scorer& scorer, Scenario scenario,
                                const LinkConfig& cfg = {}) {
  EvalResult r;
  r.scenario = scenario;
  r.turns = rank_sets(sets, scorer);
  r.model = make_report(r.turns, cfg);
  r.ceiling = make_report(rank_sets(sets, oracle_scorer()), cfg);
  return r;
}

/// `index` is required for practical_49.
inline EvalResult evaluate(const Scorer& scorer, const std::vector<DialogueSample>& test, Scenario scenario,
                           const InvertedIndex* index, std::uint64_t seed, const LinkConfig& cfg = {}) {
  if (scenario == Scenario::practical_49 && !index) throw UsageError("practical_49 evaluation needs a retriever index");
  auto sets = scenario == Scenario::ranked_10 ? ranked_10_sets(test, seed) : practical_sets(test, *index, seed);
  return evaluate_sets(sets, scorer, scenario, cfg);
}

}  // namespace kpn
