#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "kpn/errors.hpp"
#include "kpn/text.hpp"

namespace kpn {

using TokenId = std::int32_t;

class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr TokenId kSep = 2;

  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

  /// `tokens` lists the non-reserved entries in id order (ids start at 3).
  explicit Vocabulary(const std::vector<std::string>& tokens) {
    tokens_ = {"<pad>", "<unk>", "<sep>"};
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_[tokens_[i]] = static_cast<TokenId>(i);
    for (const auto& t : tokens) {
      if (t.empty()) throw DomainError("vocabulary: empty token");
      if (!index_.emplace(t, static_cast<TokenId>(tokens_.size())).second) {
        throw DomainError("vocabulary: duplicate token \"" + t + "\"");
      }
      tokens_.push_back(t);
    }
  }

  /// Token order: descending frequency, then byte order. Reserved ids first.
  static Vocabulary build(const std::map<std::string, std::size_t>& counts, std::size_t min_count = 1) {
    std::vector<std::pair<std::string, std::size_t>> entries;
    for (const auto& [tok, n] : counts)
      if (n >= min_count) entries.emplace_back(tok, n);
    std::stable_sort(entries.begin(), entries.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> tokens;
    tokens.reserve(entries.size());
    for (auto& e : entries) tokens.push_back(std::move(e.first));
    return Vocabulary(tokens);
  }

  std::size_t size() const { return tokens_.size(); }

  TokenId id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnk : it->second;
  }

  bool contains(std::string_view token) const { return index_.count(std::string(token)) > 0; }

  const std::string& token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw IndexError("vocabulary: id " + std::to_string(id) + " out of range");
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  std::vector<TokenId> encode(std::string_view text) const {
    std::vector<TokenId> ids;
    for (const auto& t : tokenize(text)) ids.push_back(id(t));
    return ids;
  }

  /// Non-reserved tokens in id order.
  std::vector<std::string> entries() const { return {tokens_.begin() + 3, tokens_.end()}; }

  /// FNV-1a over the id-ordered token list.
  std::uint64_t hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& t : tokens_) {
      for (unsigned char c : t) {
        h ^= c;
        h *= 1099511628211ULL;
      }
      h ^= 0xFF;
      h *= 1099511628211ULL;
    }
    return h;
  }

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write vocabulary file " + path);
    for (const auto& t : entries()) out << t << '\n';
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read vocabulary file " + path);
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) tokens.push_back(line);
    return Vocabulary(tokens);
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

class VocabularyBuilder {
 public:
  void add_text(std::string_view text) {
    for (auto& t : tokenize(text)) ++counts_[t];
  }
  void add_token(const std::string& token) { ++counts_[token]; }
  Vocabulary build(std::size_t min_count = 1) const { return Vocabulary::build(counts_, min_count); }

 private:
  std::map<std::string, std::size_t> counts_;
};

}  // namespace kpn
