#pragma once

// BM25 retrieval over a pool of responses, with a single-file binary index.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "kpn/checkpoint.hpp"
#include "kpn/errors.hpp"
#include "kpn/rng.hpp"
#include "kpn/text.hpp"

namespace kpn {

struct Posting {
  std::uint32_t doc = 0;
  std::uint32_t tf = 0;
  bool operator==(const Posting&) const = default;
};

struct Bm25Params {
  double k1 = 1.2;
  double b = 0.75;
};

/// Lucene-style idf, always positive.
inline double bm25_idf(std::size_t docs, std::size_t df) {
  const double n = static_cast<double>(docs), d = static_cast<double>(df);
  return std::log(1.0 + (n - d + 0.5) / (d + 0.5));
}

inline double bm25_term(double idf, double tf, double doc_len, double avg_len, const Bm25Params& p) {
  return idf * tf * (p.k1 + 1.0) / (tf + p.k1 * (1.0 - p.b + p.b * doc_len / avg_len));
}

class InvertedIndex {
 public:
  InvertedIndex() = default;

  /// Duplicate texts keep their first occurrence; texts without tokens are
  /// skipped since they can never match.
  static InvertedIndex build(const std::vector<std::string>& responses) {
    InvertedIndex ix;
    std::unordered_set<std::string> seen;
    for (const auto& text : responses) {
      if (!seen.insert(text).second) continue;
      auto tokens = tokenize(text);
      if (tokens.empty()) continue;
      const auto doc = static_cast<std::uint32_t>(ix.docs_.size());
      ix.docs_.push_back(text);
      ix.lengths_.push_back(static_cast<std::uint32_t>(tokens.size()));
      std::map<std::string, std::uint32_t> tf;
      for (const auto& t : tokens) ++tf[t];
      for (const auto& [t, n] : tf) ix.postings_[t].push_back({doc, n});
    }
    if (ix.docs_.empty()) throw DomainError("build_index: corpus has no non-empty documents");
    ix.finish();
    return ix;
  }

  std::size_t size() const { return docs_.size(); }
  const std::string& doc(std::size_t i) const { return docs_.at(i); }
  const std::vector<std::string>& docs() const { return docs_; }
  std::size_t doc_length(std::size_t i) const { return lengths_.at(i); }
  double avg_length() const { return avg_len_; }
  const Bm25Params& params() const { return params_; }

  const std::vector<Posting>& postings(const std::string& token) const {
    static const std::vector<Posting> none;
    auto it = postings_.find(token);
    return it == postings_.end() ? none : it->second;
  }
  std::size_t vocabulary_size() const { return postings_.size(); }

  /// BM25 score of every document with at least one query term. Repeated
  /// query tokens count once.
  std::vector<std::pair<std::uint32_t, double>> score(std::string_view query) const {
    auto q = tokenize(query);
    std::set<std::string> terms(q.begin(), q.end());
    std::unordered_map<std::uint32_t, double> acc;
    for (const auto& t : terms) {
      const auto& plist = postings(t);
      if (plist.empty()) continue;
      const double idf = bm25_idf(docs_.size(), plist.size());
      for (const auto& p : plist) acc[p.doc] += bm25_term(idf, p.tf, lengths_[p.doc], avg_len_, params_);
    }
    std::vector<std::pair<std::uint32_t, double>> out(acc.begin(), acc.end());
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
      return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    return out;
  }

  /// Top-n texts by BM25 (ties by doc id) without `exclude`; short lists
  /// are padded with seeded random documents.
  std::vector<std::string> retrieve(std::string_view query, std::size_t n, std::string_view exclude = {},
                                    std::uint64_t seed = 0) const {
    if (n < 1) throw DomainError("retrieve: n must be at least 1");
    std::vector<std::string> out;
    std::vector<std::uint8_t> used(docs_.size(), 0);
    for (const auto& [doc, s] : score(query)) {
      if (out.size() == n) break;
      if (docs_[doc] == exclude) continue;
      used[doc] = 1;
      out.push_back(docs_[doc]);
    }
    if (out.size() < n) {
      std::vector<std::uint32_t> rest;
      for (std::uint32_t d = 0; d < docs_.size(); ++d)
        if (!used[d] && docs_[d] != exclude) rest.push_back(d);
      Rng rng(seed);
      rng.shuffle(rest);
      for (std::size_t i = 0; i < rest.size() && out.size() < n; ++i) out.push_back(docs_[rest[i]]);
    }
    return out;
  }

  // Binary file: 8-byte magic, u64 manifest length, JSON manifest, then the
  // documents (u64 byte length + bytes each) and the postings (term, count,
  // then doc/tf pairs), all integers little-endian u64.

  void save(const std::string& path) const {
    std::string body;
    for (const auto& d : docs_) {
      detail::put_u64(body, d.size());
      body += d;
    }
    std::vector<std::string> terms;
    for (const auto& [t, _] : postings_) terms.push_back(t);
    std::sort(terms.begin(), terms.end());
    for (const auto& t : terms) {
      detail::put_u64(body, t.size());
      body += t;
      const auto& plist = postings_.at(t);
      detail::put_u64(body, plist.size());
      for (const auto& p : plist) {
        detail::put_u64(body, p.doc);
        detail::put_u64(body, p.tf);
      }
    }
    nlohmann::json manifest = {{"format", "kpn-bm25"}, {"version", 1},      {"documents", docs_.size()},
                               {"terms", terms.size()}, {"k1", params_.k1}, {"b", params_.b},
                               {"avg_doc_length", avg_len_}};
    const std::string h = manifest.dump();
    std::string out(kMagic, 8);
    detail::put_u64(out, h.size());
    out += h;
    out += body;
    const std::string tmp = path + ".tmp";
    {
      std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
      if (!f) throw IoError("cannot write index " + tmp);
      f.write(out.data(), static_cast<std::streamsize>(out.size()));
      if (!f) throw IoError("failed writing index " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move index into place at " + path + ": " + ec.message());
  }

  static InvertedIndex load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open index " + path);
    const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0) throw ParseError(path + ": not a BM25 index");
    std::size_t pos = 8;
    auto need = [&](std::size_t k) {
      if (bytes.size() - pos < k) throw ParseError(path + ": truncated index");
    };
    auto u64 = [&] {
      need(8);
      auto v = detail::get_u64(bytes.data() + pos);
      pos += 8;
      return v;
    };
    auto str = [&] {
      const auto len = u64();
      need(len);
      std::string s = bytes.substr(pos, len);
      pos += len;
      return s;
    };
    nlohmann::json manifest;
    try {
      manifest = nlohmann::json::parse(str());
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(path + ": malformed manifest (" + e.what() + ")");
    }
    if (manifest.value("format", "") != "kpn-bm25" || manifest.value("version", 0) != 1) {
      throw ParseError(path + ": unsupported index format");
    }
    InvertedIndex ix;
    const auto n_docs = manifest.at("documents").get<std::size_t>();
    const auto n_terms = manifest.at("terms").get<std::size_t>();
    for (std::size_t i = 0; i < n_docs; ++i) ix.docs_.push_back(str());
    for (std::size_t i = 0; i < n_terms; ++i) {
      std::string t = str();
      auto& plist = ix.postings_[t];
      for (auto k = u64(); k > 0; --k) {
        Posting p;
        p.doc = static_cast<std::uint32_t>(u64());
        p.tf = static_cast<std::uint32_t>(u64());
        if (p.doc >= n_docs || p.tf == 0) throw ParseError(path + ": corrupt posting for \"" + t + "\"");
        plist.push_back(p);
      }
    }
    if (pos != bytes.size()) throw ParseError(path + ": trailing bytes after postings");
    ix.lengths_.assign(n_docs, 0);
    for (const auto& [t, plist] : ix.postings_)
      for (const auto& p : plist) ix.lengths_[p.doc] += p.tf;
    ix.params_.k1 = manifest.value("k1", 1.2);
    ix.params_.b = manifest.value("b", 0.75);
    ix.finish();
    return ix;
  }

 private:
  static constexpr char kMagic[8] = {'K', 'P', 'N', 'B', 'M', '2', '5', '\0'};

  void finish() {
    double total = 0;
    for (auto l : lengths_) {
      if (l == 0) throw ParseError("index: document with no tokens");
      total += l;
    }
    avg_len_ = total / static_cast<double>(lengths_.size());
  }

  std::vector<std::string> docs_;
  std::vector<std::uint32_t> lengths_;
  std::map<std::string, std::vector<Posting>> postings_;
  double avg_len_ = 0;
  Bm25Params params_;
};

inline InvertedIndex build_index(const std::vector<std::string>& responses) { return InvertedIndex::build(responses); }

}  // namespace kpn
