#pragma once

// Dialogue samples, JSONL ingestion, negative sampling and batching.
//
// One JSON object per line:
//   {"context": [string...], "goal": [string...], "knowledge": [[s,p,o]...],
//    "response": string, "label": 0|1, "candidates": [string...]?,
//    "weak_labels": [0|1...]?, "planted": int?}
// "candidates" carries test-time distractors, "weak_labels" is written by the
// labeler (one per triple) and "planted" by the synthetic generator.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "kpn/errors.hpp"
#include "kpn/rng.hpp"
#include "kpn/text.hpp"
#include "kpn/vocab.hpp"

namespace kpn {

struct KnowledgeTriple {
  std::string subject;
  std::string predicate;
  std::string object;
  /// subject [SEP] predicate [SEP] object
  std::vector<TokenId> tokens;
  std::optional<int> weak_label;

  bool operator==(const KnowledgeTriple&) const = default;
};

struct Goal {
  std::vector<std::string> entities;
  std::vector<TokenId> tokens;
  /// For each goal token, the index of the entity it came from.
  std::vector<std::size_t> token_entity;

  bool operator==(const Goal&) const = default;
};

struct DialogueSample {
  std::vector<std::string> context_text;
  std::vector<std::vector<TokenId>> context;
  Goal goal;
  std::vector<KnowledgeTriple> knowledge;
  std::string response_text;
  std::vector<TokenId> response;
  int label = 1;
  std::vector<std::string> candidates;
  std::optional<int> planted;

  bool has_weak_labels() const {
    return !knowledge.empty() &&
           std::all_of(knowledge.begin(), knowledge.end(), [](const auto& k) { return k.weak_label.has_value(); });
  }

  bool operator==(const DialogueSample&) const = default;
};

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const DialogueSample& s) {
  nlohmann::json j;
  j["context"] = s.context_text;
  j["goal"] = s.goal.entities;
  auto knowledge = nlohmann::json::array();
  for (const auto& k : s.knowledge) knowledge.push_back({k.subject, k.predicate, k.object});
  j["knowledge"] = std::move(knowledge);
  j["response"] = s.response_text;
  j["label"] = s.label;
  if (!s.candidates.empty()) j["candidates"] = s.candidates;
  if (s.has_weak_labels()) {
    auto w = nlohmann::json::array();
    for (const auto& k : s.knowledge) w.push_back(*k.weak_label);
    j["weak_labels"] = std::move(w);
  }
  if (s.planted) j["planted"] = *s.planted;
  return j;
}

namespace detail {

inline const nlohmann::json& field(const nlohmann::json& j, const char* name, const std::string& where) {
  auto it = j.find(name);
  if (it == j.end()) throw SchemaError(where + ": missing field \"" + name + "\"");
  return *it;
}

inline std::vector<std::string> string_list(const nlohmann::json& j, const char* name, const std::string& where) {
  if (!j.is_array()) throw SchemaError(where + ": field \"" + name + "\" must be an array of strings");
  std::vector<std::string> out;
  for (const auto& v : j) {
    if (!v.is_string()) throw SchemaError(where + ": field \"" + name + "\" must be an array of strings");
    out.push_back(v.get<std::string>());
  }
  return out;
}

}  // namespace detail

/// Parses one record; ids are left empty until encode().
inline DialogueSample from_json(const nlohmann::json& j, const std::string& where) {
  if (!j.is_object()) throw SchemaError(where + ": record must be a JSON object");
  DialogueSample s;
  s.context_text = detail::string_list(detail::field(j, "context", where), "context", where);
  if (s.context_text.empty()) throw SchemaError(where + ": field \"context\" needs at least one utterance");
  s.goal.entities = detail::string_list(detail::field(j, "goal", where), "goal", where);
  if (s.goal.entities.empty()) throw SchemaError(where + ": field \"goal\" needs at least one entity");

  const auto& kn = detail::field(j, "knowledge", where);
  if (!kn.is_array() || kn.empty()) throw SchemaError(where + ": field \"knowledge\" needs at least one triple");
  for (const auto& t : kn) {
    if (!t.is_array() || t.size() != 3 || !t[0].is_string() || !t[1].is_string() || !t[2].is_string()) {
      throw SchemaError(where + ": field \"knowledge\" entries must be [subject, predicate, object] strings");
    }
    s.knowledge.push_back({t[0].get<std::string>(), t[1].get<std::string>(), t[2].get<std::string>(), {}, {}});
  }

  const auto& resp = detail::field(j, "response", where);
  if (!resp.is_string()) throw SchemaError(where + ": field \"response\" must be a string");
  s.response_text = resp.get<std::string>();

  const auto& label = detail::field(j, "label", where);
  if (!label.is_number_integer() || (label.get<int>() != 0 && label.get<int>() != 1)) {
    throw SchemaError(where + ": field \"label\" must be 0 or 1");
  }
  s.label = label.get<int>();

  if (auto it = j.find("candidates"); it != j.end()) s.candidates = detail::string_list(*it, "candidates", where);
  if (auto it = j.find("weak_labels"); it != j.end()) {
    if (!it->is_array() || it->size() != s.knowledge.size()) {
      throw SchemaError(where + ": field \"weak_labels\" must hold one 0/1 per knowledge triple");
    }
    for (std::size_t i = 0; i < it->size(); ++i) {
      const auto& w = (*it)[i];
      if (!w.is_number_integer() || (w.get<int>() != 0 && w.get<int>() != 1)) {
        throw SchemaError(where + ": field \"weak_labels\" must hold 0/1 values");
      }
      s.knowledge[i].weak_label = w.get<int>();
    }
  }
  if (auto it = j.find("planted"); it != j.end()) {
    if (!it->is_number_integer()) throw SchemaError(where + ": field \"planted\" must be an integer");
    s.planted = it->get<int>();
  }
  return s;
}

/// Fills token ids from the raw texts.
inline void encode(DialogueSample& s, const Vocabulary& vocab) {
  s.context.clear();
  for (const auto& u : s.context_text) s.context.push_back(vocab.encode(u));
  s.goal.tokens.clear();
  s.goal.token_entity.clear();
  for (std::size_t e = 0; e < s.goal.entities.size(); ++e) {
    for (TokenId id : vocab.encode(s.goal.entities[e])) {
      s.goal.tokens.push_back(id);
      s.goal.token_entity.push_back(e);
    }
  }
  if (s.goal.tokens.empty()) throw SchemaError("goal entities contain no tokens");
  for (auto& k : s.knowledge) {
    k.tokens = vocab.encode(k.subject);
    k.tokens.push_back(Vocabulary::kSep);
    for (TokenId id : vocab.encode(k.predicate)) k.tokens.push_back(id);
    k.tokens.push_back(Vocabulary::kSep);
    for (TokenId id : vocab.encode(k.object)) k.tokens.push_back(id);
  }
  s.response = vocab.encode(s.response_text);
}

inline void encode(std::vector<DialogueSample>& samples, const Vocabulary& vocab) {
  for (auto& s : samples) encode(s, vocab);
}

/// Raw texts only; call encode() to get ids.
inline std::vector<DialogueSample> read_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<DialogueSample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path + ":" + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(where + ": malformed JSON (" + e.what() + ")");
    }
    out.push_back(from_json(j, where));
  }
  return out;
}

inline std::vector<DialogueSample> load_jsonl(const std::string& path, const Vocabulary& vocab) {
  auto samples = read_jsonl(path);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    try {
      encode(samples[i], vocab);
    } catch (const SchemaError& e) {
      throw SchemaError(path + ":" + std::to_string(i + 1) + ": " + e.what());
    }
  }
  return samples;
}

inline void save_jsonl(const std::string& path, const std::vector<DialogueSample>& samples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& s : samples) out << to_json(s).dump() << '\n';
  if (!out) throw IoError("failed writing " + path);
}

/// Every text a vocabulary should cover: context, goal, knowledge, response
/// and candidates.
inline void add_to_vocabulary(VocabularyBuilder& builder, const DialogueSample& s) {
  for (const auto& u : s.context_text) builder.add_text(u);
  for (const auto& e : s.goal.entities) builder.add_text(e);
  for (const auto& k : s.knowledge) {
    builder.add_text(k.subject);
    builder.add_text(k.predicate);
    builder.add_text(k.object);
  }
  builder.add_text(s.response_text);
  for (const auto& c : s.candidates) builder.add_text(c);
}

inline Vocabulary build_vocabulary(const std::vector<DialogueSample>& samples, std::size_t min_count = 1) {
  VocabularyBuilder b;
  for (const auto& s : samples) add_to_vocabulary(b, s);
  return b.build(min_count);
}

/// Two samples belong to the same dialogue turn when everything but the
/// response, label and candidates agrees.
inline bool same_turn(const DialogueSample& a, const DialogueSample& b) {
  if (a.context_text != b.context_text || a.goal.entities != b.goal.entities ||
      a.knowledge.size() != b.knowledge.size())
    return false;
  for (std::size_t i = 0; i < a.knowledge.size(); ++i) {
    const auto& x = a.knowledge[i];
    const auto& y = b.knowledge[i];
    if (x.subject != y.subject || x.predicate != y.predicate || x.object != y.object) return false;
  }
  return true;
}

/// Splits samples into ranking groups: a group starts at every positive and
/// wherever the turn changes.
inline std::vector<std::vector<std::size_t>> group_turns(const std::vector<DialogueSample>& samples) {
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (groups.empty() || samples[i].label == 1 || !same_turn(samples[groups.back().front()], samples[i]))
      groups.emplace_back();
    groups.back().push_back(i);
  }
  return groups;
}

// ---------------------------------------------------------------------------
// Negative sampling

/// For each positive: the positive itself followed by `ratio` negatives whose
/// responses are distinct pool texts different from the true response.
/// Negatives keep the positive's weak labels. Ids are filled when `vocab` is
/// given.
inline std::vector<DialogueSample> negative_sample(const std::vector<DialogueSample>& positives,
                                                   const std::vector<std::string>& pool, std::size_t ratio,
                                                   std::uint64_t seed, const Vocabulary* vocab = nullptr) {
  if (ratio < 1) throw DomainError("negative_sample: ratio must be at least 1");
  std::vector<std::string> distinct;
  std::set<std::string> seen;
  for (const auto& p : pool)
    if (seen.insert(p).second) distinct.push_back(p);
  Rng rng(seed);
  std::vector<DialogueSample> out;
  out.reserve(positives.size() * (ratio + 1));
  std::vector<std::size_t> idx(distinct.size());
  for (const auto& pos : positives) {
    if (pos.label != 1) throw UsageError("negative_sample: input sample is not a positive");
    out.push_back(pos);
    out.back().candidates.clear();
    std::size_t available = 0;
    for (std::size_t i = 0; i < distinct.size(); ++i)
      if (distinct[i] != pos.response_text) idx[available++] = i;
    if (available < ratio) {
      throw DomainError("negative_sample: pool has only " + std::to_string(available) +
                        " responses different from the ground truth");
    }
    // Partial Fisher-Yates over the admissible indices.
    for (std::size_t k = 0; k < ratio; ++k) {
      std::size_t j = k + static_cast<std::size_t>(rng.below(available - k));
      std::swap(idx[k], idx[j]);
      DialogueSample neg = pos;
      neg.candidates.clear();
      neg.label = 0;
      neg.planted.reset();
      neg.response_text = distinct[idx[k]];
      neg.response = vocab ? vocab->encode(neg.response_text) : std::vector<TokenId>{};
      out.push_back(std::move(neg));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batching

struct BatchLimits {
  std::size_t max_utterances = 8;
  std::size_t max_tokens = 16;
  std::size_t max_triples = 12;
};

/// Padded id arrays with masks. Row-major: context is rows × L × T,
/// knowledge rows × M × T, goal and response rows × T.
struct Batch {
  std::size_t rows = 0;
  BatchLimits limits;
  std::vector<TokenId> context_ids;
  std::vector<std::uint8_t> context_mask;
  std::vector<std::uint8_t> utterance_mask;  // rows × L
  std::vector<TokenId> goal_ids;
  std::vector<std::uint8_t> goal_mask;
  std::vector<std::size_t> goal_entity;  // entity index per goal slot
  std::vector<TokenId> knowledge_ids;
  std::vector<std::uint8_t> knowledge_mask;
  std::vector<std::uint8_t> triple_mask;  // rows × M
  std::vector<TokenId> response_ids;
  std::vector<std::uint8_t> response_mask;
  std::vector<int> labels;
  std::vector<double> weak_labels;  // rows × M, 0 where absent
  std::vector<std::uint8_t> has_weak_labels;  // rows

  std::size_t L() const { return limits.max_utterances; }
  std::size_t T() const { return limits.max_tokens; }
  std::size_t M() const { return limits.max_triples; }

  /// Real tokens of a sequence, skipping masked positions.
  static std::vector<TokenId> unmask(const std::vector<TokenId>& ids, const std::vector<std::uint8_t>& mask,
                                     std::size_t offset, std::size_t len) {
    std::vector<TokenId> out;
    for (std::size_t i = 0; i < len; ++i)
      if (mask[offset + i]) out.push_back(ids[offset + i]);
    return out;
  }

  /// Real utterances of a row in chronological order.
  std::vector<std::vector<TokenId>> utterances(std::size_t r) const {
    std::vector<std::vector<TokenId>> out;
    for (std::size_t l = 0; l < L(); ++l)
      if (utterance_mask[r * L() + l]) out.push_back(unmask(context_ids, context_mask, (r * L() + l) * T(), T()));
    return out;
  }
  std::vector<TokenId> goal(std::size_t r) const { return unmask(goal_ids, goal_mask, r * T(), T()); }
  std::vector<std::size_t> goal_entities(std::size_t r) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < T(); ++i)
      if (goal_mask[r * T() + i]) out.push_back(goal_entity[r * T() + i]);
    return out;
  }
  std::vector<std::vector<TokenId>> triples(std::size_t r) const {
    std::vector<std::vector<TokenId>> out;
    for (std::size_t m = 0; m < M(); ++m)
      if (triple_mask[r * M() + m]) out.push_back(unmask(knowledge_ids, knowledge_mask, (r * M() + m) * T(), T()));
    return out;
  }
  std::vector<TokenId> response(std::size_t r) const { return unmask(response_ids, response_mask, r * T(), T()); }
};

/// Truncate then pad: keeps the last L utterances, the first T tokens of each
/// sequence and the first M triples.
inline Batch make_batch(const std::vector<const DialogueSample*>& samples, const BatchLimits& limits) {
  if (limits.max_utterances == 0 || limits.max_tokens == 0 || limits.max_triples == 0) {
    throw DomainError("make_batch: limits must be positive");
  }
  Batch b;
  b.rows = samples.size();
  b.limits = limits;
  const std::size_t R = b.rows, L = limits.max_utterances, T = limits.max_tokens, M = limits.max_triples;
  b.context_ids.assign(R * L * T, 0);
  b.context_mask.assign(R * L * T, 0);
  b.utterance_mask.assign(R * L, 0);
  b.goal_ids.assign(R * T, 0);
  b.goal_mask.assign(R * T, 0);
  b.goal_entity.assign(R * T, 0);
  b.knowledge_ids.assign(R * M * T, 0);
  b.knowledge_mask.assign(R * M * T, 0);
  b.triple_mask.assign(R * M, 0);
  b.response_ids.assign(R * T, 0);
  b.response_mask.assign(R * T, 0);
  b.labels.assign(R, 0);
  b.weak_labels.assign(R * M, 0.0);
  b.has_weak_labels.assign(R, 0);

  auto put = [T](std::vector<TokenId>& ids, std::vector<std::uint8_t>& mask, std::size_t offset,
                 const std::vector<TokenId>& seq) {
    const std::size_t n = std::min(seq.size(), T);
    for (std::size_t i = 0; i < n; ++i) {
      ids[offset + i] = seq[i];
      mask[offset + i] = 1;
    }
  };

  for (std::size_t r = 0; r < R; ++r) {
    const DialogueSample& s = *samples[r];
    const std::size_t n_utt = std::min(s.context.size(), L);
    const std::size_t first = s.context.size() - n_utt;
    for (std::size_t l = 0; l < n_utt; ++l) {
      b.utterance_mask[r * L + l] = 1;
      put(b.context_ids, b.context_mask, (r * L + l) * T, s.context[first + l]);
    }
    put(b.goal_ids, b.goal_mask, r * T, s.goal.tokens);
    for (std::size_t i = 0; i < std::min(T, s.goal.token_entity.size()); ++i) b.goal_entity[r * T + i] = s.goal.token_entity[i];
    const std::size_t n_k = std::min(s.knowledge.size(), M);
    for (std::size_t m = 0; m < n_k; ++m) {
      b.triple_mask[r * M + m] = 1;
      put(b.knowledge_ids, b.knowledge_mask, (r * M + m) * T, s.knowledge[m].tokens);
      if (s.knowledge[m].weak_label) b.weak_labels[r * M + m] = *s.knowledge[m].weak_label;
    }
    b.has_weak_labels[r] = s.has_weak_labels() ? 1 : 0;
    put(b.response_ids, b.response_mask, r * T, s.response);
    b.labels[r] = s.label;
  }
  return b;
}

inline Batch make_batch(const std::vector<DialogueSample>& samples, const BatchLimits& limits) {
  std::vector<const DialogueSample*> ptrs;
  for (const auto& s : samples) ptrs.push_back(&s);
  return make_batch(ptrs, limits);
}

// ---------------------------------------------------------------------------
// Pretrained embeddings

/// Reads "token v1 ... vd" rows. Tokens missing from the vocabulary are
/// skipped; returns id -> vector.
inline std::map<TokenId, std::vector<double>> load_embeddings(const std::string& path, const Vocabulary& vocab,
                                                              std::size_t dim) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open embedding file " + path);
  std::map<TokenId, std::vector<double>> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ss(line);
    std::string token;
    if (!(ss >> token)) continue;
    std::vector<double> v;
    double x;
    while (ss >> x) v.push_back(x);
    if (!ss.eof()) throw ParseError(path + ":" + std::to_string(line_no) + ": non-numeric embedding value");
    if (v.size() != dim) {
      throw DimensionError(path + ":" + std::to_string(line_no) + ": expected " + std::to_string(dim) +
                           " values, got " + std::to_string(v.size()));
    }
    if (vocab.contains(token)) out[vocab.id(token)] = std::move(v);
  }
  return out;
}

}  // namespace kpn
