#pragma once

// Weak labels for knowledge triples by linking object entities against the
// ground-truth response, and agreement against human annotation files.

#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kpn/corpus.hpp"
#include "kpn/errors.hpp"
#include "kpn/text.hpp"

namespace kpn {

struct LinkConfig {
  /// Long objects need strictly more than this fraction of their tokens covered.
  double descriptive_threshold = 0.7;
  /// Objects with at least this many tokens are treated as descriptive.
  std::size_t descriptive_min_tokens = 8;

  void validate() const {
    if (!(descriptive_threshold > 0.0 && descriptive_threshold <= 1.0)) {
      throw DomainError("descriptive_threshold must be in (0, 1]");
    }
    if (descriptive_min_tokens < 1) throw DomainError("descriptive_min_tokens must be positive");
  }
};

/// Fraction of object tokens matched in the response, counting each response
/// token at most as often as it occurs there.
inline double token_coverage(const std::vector<std::string>& object, const std::vector<std::string>& response) {
  if (object.empty()) return 0.0;
  std::map<std::string, std::size_t> available;
  for (const auto& t : response) ++available[t];
  std::size_t covered = 0;
  for (const auto& t : object) {
    auto it = available.find(t);
    if (it != available.end() && it->second > 0) {
      --it->second;
      ++covered;
    }
  }
  return static_cast<double>(covered) / static_cast<double>(object.size());
}

inline int label_object(const std::vector<std::string>& object, const std::vector<std::string>& response,
                        const LinkConfig& cfg) {
  if (object.empty()) throw DomainError("label_triple: object has no tokens");
  if (object.size() < cfg.descriptive_min_tokens) return contains_subsequence(response, object) ? 1 : 0;
  return token_coverage(object, response) > cfg.descriptive_threshold ? 1 : 0;
}

/// 1 iff the triple's object is linked to the response. The subject is
/// ignored since it is shared by many triples.
inline int label_triple(const KnowledgeTriple& triple, std::string_view response_text, const LinkConfig& cfg = {}) {
  return label_object(tokenize(triple.object), tokenize(response_text), cfg);
}

/// Indices of triples linked to `text`.
inline std::vector<std::size_t> link_knowledge(const std::vector<KnowledgeTriple>& knowledge, std::string_view text,
                                               const LinkConfig& cfg = {}) {
  const auto response = tokenize(text);
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < knowledge.size(); ++j)
    if (label_object(tokenize(knowledge[j].object), response, cfg)) out.push_back(j);
  return out;
}

/// Indices of goal entities whose tokens occur contiguously in `text`.
inline std::vector<std::size_t> mentioned_entities(const std::vector<std::string>& entities, std::string_view text) {
  const auto tokens = tokenize(text);
  std::vector<std::size_t> out;
  for (std::size_t e = 0; e < entities.size(); ++e)
    if (contains_subsequence(tokens, tokenize(entities[e]))) out.push_back(e);
  return out;
}

/// Writes per-triple weak labels into a positive sample and returns them.
inline std::vector<int> label_sample(DialogueSample& sample, const LinkConfig& cfg = {}) {
  if (sample.label != 1) throw UsageError("label_sample: weak labels are defined on positive samples only");
  cfg.validate();
  const auto response = tokenize(sample.response_text);
  std::vector<int> labels;
  for (auto& k : sample.knowledge) {
    k.weak_label = label_object(tokenize(k.object), response, cfg);
    labels.push_back(*k.weak_label);
  }
  return labels;
}

/// Labels every positive; each negative copies the labels of the nearest
/// preceding positive of the same turn.
inline void label_corpus(std::vector<DialogueSample>& samples, const LinkConfig& cfg = {}) {
  const DialogueSample* source = nullptr;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto& s = samples[i];
    if (s.label == 1) {
      label_sample(s, cfg);
      source = &s;
      continue;
    }
    if (!source || !same_turn(*source, s)) {
      throw UsageError("label_corpus: negative sample " + std::to_string(i) + " has no preceding positive of the same turn");
    }
    for (std::size_t j = 0; j < s.knowledge.size(); ++j) s.knowledge[j].weak_label = source->knowledge[j].weak_label;
  }
}

// ---------------------------------------------------------------------------
// Human agreement

struct HumanAnnotation {
  std::size_t sample_id = 0;  // 0-based line index in the sample file
  std::size_t triple_index = 0;
  std::vector<int> labels;    // one per annotator

  int majority() const {
    std::size_t ones = 0;
    for (int l : labels) ones += l == 1;
    return 2 * ones > labels.size() ? 1 : 0;
  }
};

inline std::vector<HumanAnnotation> load_annotations(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open annotation file " + path);
  std::vector<HumanAnnotation> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path + ":" + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(where + ": malformed JSON (" + e.what() + ")");
    }
    HumanAnnotation a;
    for (const char* key : {"sample_id", "triple_index", "labels"})
      if (!j.contains(key)) throw SchemaError(where + ": missing field \"" + key + "\"");
    if (!j["sample_id"].is_number_unsigned() || !j["triple_index"].is_number_unsigned()) {
      throw SchemaError(where + ": \"sample_id\" and \"triple_index\" must be non-negative integers");
    }
    a.sample_id = j["sample_id"].get<std::size_t>();
    a.triple_index = j["triple_index"].get<std::size_t>();
    if (!j["labels"].is_array() || j["labels"].empty()) throw SchemaError(where + ": \"labels\" must be a non-empty array");
    for (const auto& l : j["labels"]) {
      if (!l.is_number_integer() || (l.get<int>() != 0 && l.get<int>() != 1)) {
        throw SchemaError(where + ": \"labels\" must hold 0/1 values");
      }
      a.labels.push_back(l.get<int>());
    }
    out.push_back(std::move(a));
  }
  return out;
}

/// Fleiss' kappa for binary ratings; every item needs the same number of
/// raters (at least two). Perfect agreement on a single category gives 1.
inline double fleiss_kappa(const std::vector<std::vector<int>>& ratings) {
  if (ratings.empty()) throw DomainError("fleiss_kappa: no items");
  const std::size_t n = ratings.front().size();
  if (n < 2) throw DomainError("fleiss_kappa: need at least two raters per item");
  double p_bar = 0.0, ones_total = 0.0;
  for (const auto& item : ratings) {
    if (item.size() != n) throw DimensionError("fleiss_kappa: items have different rater counts");
    double ones = 0;
    for (int r : item) ones += r == 1;
    const double zeros = static_cast<double>(n) - ones;
    p_bar += (ones * ones + zeros * zeros - static_cast<double>(n)) / (static_cast<double>(n) * (n - 1.0));
    ones_total += ones;
  }
  const double N = static_cast<double>(ratings.size());
  p_bar /= N;
  const double p1 = ones_total / (N * static_cast<double>(n));
  const double p_e = p1 * p1 + (1 - p1) * (1 - p1);
  if (p_e >= 1.0) return p_bar >= 1.0 ? 1.0 : 0.0;
  return (p_bar - p_e) / (1.0 - p_e);
}

struct Agreement {
  double percent_agree = 0.0;  // in [0, 100]
  double fleiss_kappa = 0.0;
  std::size_t items = 0;
  std::vector<std::size_t> disagreements;  // item indices
};

/// Weak label vs majority human label per item; kappa over the annotators.
inline Agreement agreement(const std::vector<int>& weak, const std::vector<std::vector<int>>& human) {
  if (weak.size() != human.size()) {
    throw DimensionError("agreement: " + std::to_string(weak.size()) + " weak labels vs " +
                         std::to_string(human.size()) + " annotated items");
  }
  if (weak.empty()) throw DomainError("agreement: no items");
  Agreement a;
  a.items = weak.size();
  std::size_t same = 0;
  for (std::size_t i = 0; i < weak.size(); ++i) {
    HumanAnnotation h{0, 0, human[i]};
    if (weak[i] == h.majority()) {
      ++same;
    } else {
      a.disagreements.push_back(i);
    }
  }
  a.percent_agree = 100.0 * static_cast<double>(same) / static_cast<double>(weak.size());
  a.fleiss_kappa = human.front().size() >= 2 ? fleiss_kappa(human) : 1.0;
  return a;
}

/// Labels the referenced triples of `samples` and compares to the annotations.
inline Agreement agreement(const std::vector<DialogueSample>& samples, const std::vector<HumanAnnotation>& annotations,
                           const LinkConfig& cfg = {}) {
  std::vector<int> weak;
  std::vector<std::vector<int>> human;
  for (const auto& a : annotations) {
    if (a.sample_id >= samples.size()) {
      throw IndexError("annotation refers to sample " + std::to_string(a.sample_id) + " of " +
                       std::to_string(samples.size()));
    }
    const auto& s = samples[a.sample_id];
    if (a.triple_index >= s.knowledge.size()) {
      throw IndexError("annotation refers to triple " + std::to_string(a.triple_index) + " of sample " +
                       std::to_string(a.sample_id));
    }
    weak.push_back(label_triple(s.knowledge[a.triple_index], s.response_text, cfg));
    human.push_back(a.labels);
  }
  return agreement(weak, human);
}

}  // namespace kpn
