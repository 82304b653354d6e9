#pragma once

// Ranking, BLEU and knowledge/goal metrics over scored dialogue turns.

#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>
#include <nlohmann/json.hpp>

#include "kpn/corpus.hpp"
#include "kpn/errors.hpp"
#include "kpn/text.hpp"
#include "kpn/weaklabel.hpp"

namespace kpn {

struct RankedTurn {
  std::vector<std::string> candidates;
  std::vector<double> scores;
  std::size_t truth = 0;
  std::vector<KnowledgeTriple> knowledge;
  std::vector<std::string> goal_entities;

  void validate() const {
    if (candidates.size() != scores.size() || scores.empty()) {
      throw DimensionError("ranked turn: " + std::to_string(scores.size()) + " scores for " +
                           std::to_string(candidates.size()) + " candidates");
    }
    if (truth >= scores.size()) throw IndexError("ranked turn: ground-truth index out of range");
    for (double s : scores)
      if (!std::isfinite(s)) throw NumericError("ranked turn: non-finite score");
  }
};

/// 1-based rank of the ground truth; equal scores rank the lower index first.
inline std::size_t rank_of_truth(const std::vector<double>& scores, std::size_t truth) {
  std::size_t rank = 1;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i] > scores[truth] || (scores[i] == scores[truth] && i < truth)) ++rank;
  }
  return rank;
}

/// Index of the top-scored candidate (lowest index among ties).
inline std::size_t top_candidate(const std::vector<double>& scores) {
  return static_cast<std::size_t>(std::max_element(scores.begin(), scores.end()) - scores.begin());
}

inline double hits_at_k(const std::vector<RankedTurn>& turns, std::size_t k) {
  if (k < 1) throw DomainError("hits_at_k: k must be at least 1");
  if (turns.empty()) return 0.0;
  std::size_t hit = 0;
  for (const auto& t : turns) hit += rank_of_truth(t.scores, t.truth) <= k;
  return static_cast<double>(hit) / static_cast<double>(turns.size());
}

inline double mrr(const std::vector<RankedTurn>& turns) {
  if (turns.empty()) return 0.0;
  double s = 0;
  for (const auto& t : turns) s += 1.0 / static_cast<double>(rank_of_truth(t.scores, t.truth));
  return s / static_cast<double>(turns.size());
}

// ---------------------------------------------------------------------------
// BLEU

/// Sentence-level BLEU-n (n = 1 or 2) with brevity penalty. BLEU-2 is the
/// geometric mean of the unigram and bigram modified precisions.
inline double bleu_n(std::string_view candidate, std::string_view reference, int n) {
  if (n != 1 && n != 2) throw DomainError("bleu_n: n must be 1 or 2");
  const auto c = tokenize(candidate);
  const auto r = tokenize(reference);
  if (c.empty()) return 0.0;
  double log_p = 0.0;
  for (int k = 1; k <= n; ++k) {
    if (c.size() < static_cast<std::size_t>(k)) return 0.0;
    std::map<std::vector<std::string>, std::size_t> ref_counts, cand_counts;
    for (std::size_t i = 0; i + k <= r.size(); ++i) ++ref_counts[{r.begin() + i, r.begin() + i + k}];
    for (std::size_t i = 0; i + k <= c.size(); ++i) ++cand_counts[{c.begin() + i, c.begin() + i + k}];
    std::size_t clipped = 0;
    for (const auto& [gram, cnt] : cand_counts) {
      auto it = ref_counts.find(gram);
      if (it != ref_counts.end()) clipped += std::min(cnt, it->second);
    }
    if (clipped == 0) return 0.0;
    log_p += std::log(static_cast<double>(clipped) / static_cast<double>(c.size() - k + 1));
  }
  const double bp = c.size() > r.size() ? 1.0 : std::exp(1.0 - static_cast<double>(r.size()) / static_cast<double>(c.size()));
  return bp * std::exp(log_p / n);
}

// ---------------------------------------------------------------------------
// Knowledge and goal metrics

struct Prf {
  double precision = 0, recall = 0, f1 = 0;
};

/// Token-set overlap between a response and the union of object tokens.
inline Prf knowledge_prf(std::string_view response, const std::vector<KnowledgeTriple>& knowledge) {
  const auto rt = tokenize(response);
  std::set<std::string> r(rt.begin(), rt.end()), u;
  for (const auto& k : knowledge)
    for (auto& t : tokenize(k.object)) u.insert(std::move(t));
  Prf out;
  if (r.empty() || u.empty()) return out;
  std::size_t common = 0;
  for (const auto& t : r) common += u.count(t);
  out.precision = static_cast<double>(common) / static_cast<double>(r.size());
  out.recall = static_cast<double>(common) / static_cast<double>(u.size());
  if (common > 0) out.f1 = 2 * out.precision * out.recall / (out.precision + out.recall);
  return out;
}

/// Macro-averaged over turns, using each turn's top candidate.
inline Prf knowledge_prf(const std::vector<RankedTurn>& turns) {
  Prf sum;
  if (turns.empty()) return sum;
  for (const auto& t : turns) {
    auto p = knowledge_prf(t.candidates[top_candidate(t.scores)], t.knowledge);
    sum.precision += p.precision;
    sum.recall += p.recall;
    sum.f1 += p.f1;
  }
  const double n = static_cast<double>(turns.size());
  return {sum.precision / n, sum.recall / n, sum.f1 / n};
}

/// The selected response uses knowledge the ground truth uses (linked sets
/// intersect), or neither uses any.
inline bool knowledge_correct(const RankedTurn& t, const LinkConfig& cfg = {}) {
  auto sel = link_knowledge(t.knowledge, t.candidates[top_candidate(t.scores)], cfg);
  auto gt = link_knowledge(t.knowledge, t.candidates[t.truth], cfg);
  if (sel.empty() && gt.empty()) return true;
  std::vector<std::size_t> both;
  std::set_intersection(sel.begin(), sel.end(), gt.begin(), gt.end(), std::back_inserter(both));
  return !both.empty();
}

inline double knowledge_accuracy(const std::vector<RankedTurn>& turns, const LinkConfig& cfg = {}) {
  if (turns.empty()) return 0.0;
  std::size_t ok = 0;
  for (const auto& t : turns) ok += knowledge_correct(t, cfg);
  return static_cast<double>(ok) / static_cast<double>(turns.size());
}

/// nullopt when the ground truth mentions no goal entity; otherwise whether
/// the selected response mentions one of the entities the ground truth does.
inline std::optional<bool> goal_correct(const RankedTurn& t) {
  auto gt = mentioned_entities(t.goal_entities, t.candidates[t.truth]);
  if (gt.empty()) return std::nullopt;
  auto sel = mentioned_entities(t.goal_entities, t.candidates[top_candidate(t.scores)]);
  std::vector<std::size_t> both;
  std::set_intersection(sel.begin(), sel.end(), gt.begin(), gt.end(), std::back_inserter(both));
  return !both.empty();
}

/// nullopt when no turn's ground truth mentions a goal entity.
inline std::optional<double> goal_accuracy(const std::vector<RankedTurn>& turns) {
  std::size_t ok = 0, n = 0;
  for (const auto& t : turns) {
    if (auto c = goal_correct(t)) {
      ++n;
      ok += *c;
    }
  }
  if (n == 0) return std::nullopt;
  return static_cast<double>(ok) / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Report

struct EvalReport {
  std::size_t turns = 0;
  std::size_t candidates_per_turn = 0;
  double hits1 = 0, hits3 = 0, mrr = 0;
  double bleu1 = 0, bleu2 = 0;
  Prf knowledge;
  double knowledge_accuracy = 0;
  std::optional<double> goal_accuracy;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"turns", turns},
                        {"candidates_per_turn", candidates_per_turn},
                        {"hits@1", hits1},
                        {"hits@3", hits3},
                        {"mrr", mrr},
                        {"bleu1", bleu1},
                        {"bleu2", bleu2},
                        {"knowledge_precision", knowledge.precision},
                        {"knowledge_recall", knowledge.recall},
                        {"knowledge_f1", knowledge.f1},
                        {"knowledge_accuracy", knowledge_accuracy}};
    j["goal_accuracy"] = goal_accuracy ? nlohmann::json(*goal_accuracy) : nlohmann::json("n/a");
    return j;
  }
};

/// Every metric over a set of scored turns.
inline EvalReport make_report(const std::vector<RankedTurn>& turns, const LinkConfig& cfg = {}) {
  EvalReport r;
  r.turns = turns.size();
  if (turns.empty()) return r;
  for (const auto& t : turns) t.validate();
  r.candidates_per_turn = turns.front().candidates.size();
  r.hits1 = hits_at_k(turns, 1);
  r.hits3 = hits_at_k(turns, 3);
  r.mrr = mrr(turns);
  for (const auto& t : turns) {
    const auto& sel = t.candidates[top_candidate(t.scores)];
    r.bleu1 += bleu_n(sel, t.candidates[t.truth], 1);
    r.bleu2 += bleu_n(sel, t.candidates[t.truth], 2);
  }
  r.bleu1 /= static_cast<double>(turns.size());
  r.bleu2 /= static_cast<double>(turns.size());
  r.knowledge = knowledge_prf(turns);
  r.knowledge_accuracy = knowledge_accuracy(turns, cfg);
  r.goal_accuracy = goal_accuracy(turns);
  return r;
}

/// Aligned plain-text table with one column per named report.
inline std::string format_table(const std::vector<std::pair<std::string, EvalReport>>& columns) {
  std::ostringstream out;
  auto pct = [](double v) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(2) << 100.0 * v;
    return s.str();
  };
  auto num = [](double v) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(4) << v;
    return s.str();
  };
  const std::vector<std::pair<std::string, std::function<std::string(const EvalReport&)>>> rows = {
      {"Hits@1", [&](const EvalReport& r) { return pct(r.hits1); }},
      {"Hits@3", [&](const EvalReport& r) { return pct(r.hits3); }},
      {"MRR", [&](const EvalReport& r) { return pct(r.mrr); }},
      {"BLEU1", [&](const EvalReport& r) { return num(r.bleu1); }},
      {"BLEU2", [&](const EvalReport& r) { return num(r.bleu2); }},
      {"Knowledge P", [&](const EvalReport& r) { return pct(r.knowledge.precision); }},
      {"Knowledge R", [&](const EvalReport& r) { return pct(r.knowledge.recall); }},
      {"Knowledge F1", [&](const EvalReport& r) { return pct(r.knowledge.f1); }},
      {"KLG Acc.", [&](const EvalReport& r) { return pct(r.knowledge_accuracy); }},
      {"Goal Acc.", [&](const EvalReport& r) { return r.goal_accuracy ? pct(*r.goal_accuracy) : std::string("n/a"); }},
  };
  const int label_w = 14, col_w = 12;
  out << std::left << std::setw(label_w) << "Metric";
  for (const auto& [name, _] : columns) out << std::right << std::setw(col_w) << name;
  out << '\n';
  for (const auto& [label, fn] : rows) {
    out << std::left << std::setw(label_w) << label;
    for (const auto& [_, rep] : columns) out << std::right << std::setw(col_w) << fn(rep);
    out << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Significance

struct TTest {
  double t = 0;
  double p_value = 1;
  std::size_t dof = 0;
};

/// Two-sided paired t-test on per-turn values.
inline TTest paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw DimensionError("paired_t_test: samples differ in length");
  if (a.size() < 2) throw DomainError("paired_t_test: need at least two pairs");
  const double n = static_cast<double>(a.size());
  double mean = 0;
  for (std::size_t i = 0; i < a.size(); ++i) mean += a[i] - b[i];
  mean /= n;
  double var = 0;
  for (std::size_t i = 0; i < a.size(); ++i) var += (a[i] - b[i] - mean) * (a[i] - b[i] - mean);
  var /= n - 1;
  TTest r;
  r.dof = a.size() - 1;
  if (var == 0) {
    r.t = mean == 0 ? 0 : std::copysign(INFINITY, mean);
    r.p_value = mean == 0 ? 1.0 : 0.0;
    return r;
  }
  r.t = mean / std::sqrt(var / n);
  boost::math::students_t dist(static_cast<double>(r.dof));
  r.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t)));
  return r;
}

}  // namespace kpn
