#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "kpn/corpus.hpp"
#include "kpn/rng.hpp"

using namespace kpn;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  auto dir = fs::temp_directory_path() / "kpn_test_corpus";
  fs::create_directories(dir);
  return dir / name;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Reference tokenizer: classifies each code point with explicit range tables
// and never touches the production helpers beyond UTF-8 decoding.
std::vector<std::string> reference_tokenize(const std::u32string& s) {
  auto cjk = [](char32_t c) { return (c >= 0x4E00 && c <= 0x9FFF) || (c >= 0x3040 && c <= 0x30FF); };
  auto word = [](char32_t c) {
    return (c >= U'a' && c <= U'z') || (c >= U'A' && c <= U'Z') || (c >= U'0' && c <= U'9') ||
           (c >= 0xDF && c <= 0xFF && c != 0xF7) || (c >= 0xC0 && c <= 0xDE && c != 0xD7);
  };
  auto lower = [](char32_t c) -> char32_t {
    if (c >= U'A' && c <= U'Z') return c - U'A' + U'a';
    if (c >= 0xC0 && c <= 0xDE && c != 0xD7) return c + 0x20;
    return c;
  };
  std::vector<std::u32string> parts;
  std::u32string cur;
  for (char32_t c : s) {
    if (cjk(c)) {
      if (!cur.empty()) parts.push_back(cur);
      cur.clear();
      parts.push_back(std::u32string(1, c));
    } else if (word(c)) {
      cur.push_back(lower(c));
    } else {
      if (!cur.empty()) parts.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) parts.push_back(cur);
  std::vector<std::string> out;
  for (const auto& p : parts) {
    std::string u8;
    for (char32_t c : p) text::append_utf8(u8, c);
    out.push_back(u8);
  }
  return out;
}

const char* kOneLine =
    R"({"context":["hi there","do you like movies"],"goal":["McDull","Bo Peng"],)"
    R"("knowledge":[["McDull","director","Bo Peng"],["Bo Peng","birthplace","Hong Kong"],["McDull","genre","comedy"]],)"
    R"("response":"Bo Peng directed McDull","label":1})";

DialogueSample random_sample(Rng& rng, int k) {
  static const std::vector<std::string> words = {"alpha", "beta", "gamma", "delta", "movie", "star", "Ünïcode",
                                                 "电影", "quote \"x\"", "tab\there", "back\\slash", "42"};
  auto phrase = [&](std::size_t n) {
    std::string s;
    for (std::size_t i = 0; i < n; ++i) {
      if (i) s += ' ';
      s += rng.pick(words);
    }
    return s;
  };
  DialogueSample s;
  for (std::size_t i = 0, n = 1 + rng.below(4); i < n; ++i) s.context_text.push_back(phrase(1 + rng.below(6)));
  s.goal.entities = {phrase(2), phrase(1)};
  for (std::size_t i = 0, n = 1 + rng.below(5); i < n; ++i) {
    KnowledgeTriple t{phrase(2), phrase(1), phrase(1 + rng.below(9)), {}, {}};
    if (k % 2) t.weak_label = static_cast<int>(rng.below(2));
    s.knowledge.push_back(t);
  }
  s.response_text = phrase(3);
  s.label = static_cast<int>(rng.below(2));
  if (k % 3 == 0) s.candidates = {phrase(2), phrase(3)};
  if (k % 5 == 0) s.planted = static_cast<int>(rng.below(s.knowledge.size()));
  return s;
}

DialogueSample positive(const std::string& response) {
  DialogueSample s;
  s.context_text = {"hello"};
  s.goal.entities = {"x"};
  s.knowledge = {{"x", "p", "o", {}, {}}};
  s.response_text = response;
  s.label = 1;
  return s;
}

}  // namespace

TEST(Tokenize, Examples) {
  EXPECT_EQ(tokenize("Bo Peng"), (std::vector<std::string>{"bo", "peng"}));
  EXPECT_TRUE(tokenize("").empty());
  EXPECT_EQ(tokenize("Hello, World!! 2nd"), (std::vector<std::string>{"hello", "world", "2nd"}));
  EXPECT_EQ(tokenize("麦兜Rice煲"), (std::vector<std::string>{"麦", "兜", "rice", "煲"}));
}

TEST(Tokenize, MatchesReferenceOnRandomMixedStrings) {
  const std::u32string alphabet = U"abcXYZ019 ,.!?-'ÀÉéüß電影麦兜ひらカ\t\n";
  Rng rng(3);
  for (int trial = 0; trial < 500; ++trial) {
    std::u32string s;
    for (std::size_t i = 0, n = rng.below(30); i < n; ++i) s.push_back(alphabet[rng.below(alphabet.size())]);
    std::string u8;
    for (char32_t c : s) text::append_utf8(u8, c);
    ASSERT_EQ(tokenize(u8), reference_tokenize(s)) << u8;
  }
}

TEST(Vocabulary, ReservedIdsAndStableOrder) {
  VocabularyBuilder b;
  b.add_text("b a a c c c");
  auto v = b.build();
  EXPECT_EQ(v.size(), 6u);
  EXPECT_EQ(v.id("c"), 3);
  EXPECT_EQ(v.id("a"), 4);
  EXPECT_EQ(v.id("b"), 5);
  EXPECT_EQ(v.id("zzz"), Vocabulary::kUnk);
  EXPECT_EQ(v.token(0), "<pad>");
  EXPECT_THROW(v.token(99), IndexError);

  VocabularyBuilder b2;
  b2.add_text("c a c b c a");
  EXPECT_EQ(b2.build(), v);
  EXPECT_EQ(b2.build().hash(), v.hash());

  auto p = temp_file("vocab.txt");
  v.save(p.string());
  auto loaded = Vocabulary::load(p.string());
  EXPECT_EQ(loaded, v);
  EXPECT_EQ(loaded.hash(), v.hash());
}

TEST(LoadJsonl, OneLine) {
  auto p = temp_file("one.jsonl");
  write_text(p, std::string(kOneLine) + "\n");
  auto raw = read_jsonl(p.string());
  auto vocab = build_vocabulary(raw);
  auto samples = load_jsonl(p.string(), vocab);
  ASSERT_EQ(samples.size(), 1u);
  const auto& s = samples[0];
  EXPECT_EQ(s.context.size(), 2u);
  EXPECT_EQ(s.knowledge.size(), 3u);
  EXPECT_EQ(s.label, 1);
  EXPECT_EQ(s.goal.entities, (std::vector<std::string>{"McDull", "Bo Peng"}));
  EXPECT_EQ(s.goal.tokens.size(), 3u);
  EXPECT_EQ(s.goal.token_entity, (std::vector<std::size_t>{0, 1, 1}));
  // "McDull director Bo Peng" -> mcdull <sep> director <sep> bo peng
  const auto& t = s.knowledge[0].tokens;
  ASSERT_EQ(t.size(), 6u);
  EXPECT_EQ(t[1], Vocabulary::kSep);
  EXPECT_EQ(t[3], Vocabulary::kSep);
  EXPECT_EQ(vocab.token(t[4]), "bo");
  for (auto id : s.response) EXPECT_LT(static_cast<std::size_t>(id), vocab.size());
}

TEST(LoadJsonl, MissingGoalIsSchemaError) {
  auto p = temp_file("nogoal.jsonl");
  write_text(p, R"({"context":["a"],"knowledge":[["a","b","c"]],"response":"x","label":1})"
                "\n");
  try {
    read_jsonl(p.string());
    FAIL() << "expected SchemaError";
  } catch (const SchemaError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("\"goal\""), std::string::npos) << msg;
    EXPECT_NE(msg.find(":1"), std::string::npos) << msg;
  }
}

TEST(LoadJsonl, MalformedLineNamesLineNumber) {
  auto p = temp_file("bad.jsonl");
  write_text(p, std::string(kOneLine) + "\n{\"context\": [\n");
  try {
    read_jsonl(p.string());
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("bad.jsonl:2"), std::string::npos) << e.what();
  }
}

TEST(LoadJsonl, ValidationErrors) {
  auto p = temp_file("invalid.jsonl");
  const std::vector<std::string> bad = {
      R"({"context":[],"goal":["a"],"knowledge":[["a","b","c"]],"response":"x","label":1})",
      R"({"context":["a"],"goal":["a"],"knowledge":[],"response":"x","label":1})",
      R"({"context":["a"],"goal":["a"],"knowledge":[["a","b"]],"response":"x","label":1})",
      R"({"context":["a"],"goal":["a"],"knowledge":[["a","b","c"]],"response":"x","label":2})",
      R"({"context":["a"],"goal":[],"knowledge":[["a","b","c"]],"response":"x","label":1})",
      R"({"context":["a"],"goal":["a"],"knowledge":[["a","b","c"]],"response":"x","label":1,"weak_labels":[1,0]})",
      R"([1,2,3])",
  };
  for (const auto& line : bad) {
    write_text(p, line + "\n");
    EXPECT_THROW(read_jsonl(p.string()), SchemaError) << line;
  }
  write_text(p, R"({"context":["a"],"goal":["!!"],"knowledge":[["a","b","c"]],"response":"x","label":1})"
                "\n");
  auto raw = read_jsonl(p.string());
  EXPECT_THROW(load_jsonl(p.string(), build_vocabulary(raw)), SchemaError);
}

TEST(LoadJsonl, HundredSamplesRoundTripBitIdentically) {
  Rng rng(42);
  std::vector<DialogueSample> samples;
  for (int k = 0; k < 100; ++k) samples.push_back(random_sample(rng, k));
  auto p1 = temp_file("rt1.jsonl");
  auto p2 = temp_file("rt2.jsonl");
  save_jsonl(p1.string(), samples);
  auto vocab = build_vocabulary(samples);
  auto loaded = load_jsonl(p1.string(), vocab);
  save_jsonl(p2.string(), loaded);
  EXPECT_EQ(read_text(p1), read_text(p2));

  encode(samples, vocab);
  ASSERT_EQ(loaded.size(), samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) EXPECT_EQ(loaded[i], samples[i]) << i;
}

TEST(NegativeSample, RatioNineOnTenPositives) {
  std::vector<DialogueSample> pos;
  std::vector<std::string> pool;
  for (int i = 0; i < 10; ++i) pos.push_back(positive("truth " + std::to_string(i)));
  for (int i = 0; i < 30; ++i) pool.push_back("other " + std::to_string(i));
  pool.push_back("truth 3");
  auto out = negative_sample(pos, pool, 9, 5);
  ASSERT_EQ(out.size(), 100u);
  int ones = 0;
  for (const auto& s : out) ones += s.label;
  EXPECT_EQ(ones, 10);
  auto groups = group_turns(out);
  for (std::size_t g = 0; g < 10; ++g) {
    const auto& truth = out[g * 10];
    EXPECT_EQ(truth.label, 1);
    std::set<std::string> seen;
    for (std::size_t k = 1; k < 10; ++k) {
      const auto& neg = out[g * 10 + k];
      EXPECT_EQ(neg.label, 0);
      EXPECT_NE(neg.response_text, truth.response_text);
      EXPECT_TRUE(seen.insert(neg.response_text).second) << "duplicate negative";
    }
  }
  ASSERT_EQ(groups.size(), 10u);
  EXPECT_EQ(groups[3].front(), 30u);
  EXPECT_EQ(groups[3].size(), 10u);
}

TEST(NegativeSample, SingletonPoolAndDeterminism) {
  auto out = negative_sample({positive("y")}, {"x"}, 1, 0);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[1].response_text, "x");
  EXPECT_EQ(out[1].label, 0);

  std::vector<DialogueSample> pos;
  std::vector<std::string> pool;
  for (int i = 0; i < 5; ++i) pos.push_back(positive("t" + std::to_string(i)));
  for (int i = 0; i < 40; ++i) pool.push_back("p" + std::to_string(i));
  EXPECT_EQ(negative_sample(pos, pool, 9, 77), negative_sample(pos, pool, 9, 77));
  EXPECT_NE(negative_sample(pos, pool, 9, 77), negative_sample(pos, pool, 9, 78));
}

TEST(NegativeSample, Errors) {
  EXPECT_THROW(negative_sample({positive("y")}, {"x", "x"}, 2, 0), DomainError);
  EXPECT_THROW(negative_sample({positive("y")}, {"a", "b"}, 0, 0), DomainError);
  EXPECT_THROW(negative_sample({positive("y")}, {"y"}, 1, 0), DomainError);
  EXPECT_THROW(negative_sample({positive("y")}, {"y", "a"}, 2, 0), DomainError);
}

TEST(NegativeSample, CopiesWeakLabelsAndEncodes) {
  auto p = positive("y");
  p.knowledge[0].weak_label = 1;
  Vocabulary vocab({"x", "y", "hello", "p", "o"});
  encode(p, vocab);
  auto out = negative_sample({p}, {"x"}, 1, 0, &vocab);
  EXPECT_EQ(out[1].knowledge[0].weak_label, 1);
  EXPECT_EQ(out[1].response, vocab.encode("x"));
}

TEST(MakeBatch, GenerousLimitsMasksMatchExtents) {
  Vocabulary vocab({"a", "b", "c", "d"});
  DialogueSample s;
  s.context_text = {"a b", "c"};
  s.goal.entities = {"d"};
  s.knowledge = {{"a", "b", "c", {}, 1}, {"d", "d", "d", {}, 0}};
  s.response_text = "a b c";
  encode(s, vocab);
  auto b = make_batch(std::vector<DialogueSample>{s}, {4, 8, 3});
  EXPECT_EQ(b.rows, 1u);
  std::size_t ctx = 0;
  for (auto m : b.context_mask) ctx += m;
  EXPECT_EQ(ctx, 3u);
  EXPECT_EQ(b.utterance_mask, (std::vector<std::uint8_t>{1, 1, 0, 0}));
  EXPECT_EQ(b.triple_mask, (std::vector<std::uint8_t>{1, 1, 0}));
  EXPECT_EQ(b.weak_labels, (std::vector<double>{1, 0, 0}));
  EXPECT_EQ(b.has_weak_labels[0], 1);
  EXPECT_EQ(b.utterances(0), s.context);
  EXPECT_EQ(b.response(0), s.response);
  EXPECT_EQ(b.goal(0), s.goal.tokens);
  EXPECT_EQ(b.triples(0)[1], s.knowledge[1].tokens);
  for (std::size_t i = 0; i < b.context_ids.size(); ++i)
    if (!b.context_mask[i]) {
      EXPECT_EQ(b.context_ids[i], 0);
    }
}

TEST(MakeBatch, TruncationKeepsLastUtterancesAndFirstTokens) {
  Vocabulary vocab({"u1", "u2", "u3", "u4", "u5", "w"});
  DialogueSample s;
  s.context_text = {"u1", "u2", "u3 w w w w", "u4", "u5"};
  s.goal.entities = {"w"};
  s.knowledge = {{"u1", "w", "w", {}, {}}};
  s.response_text = "w";
  encode(s, vocab);
  auto b = make_batch(std::vector<DialogueSample>{s}, {3, 2, 1});
  auto utts = b.utterances(0);
  ASSERT_EQ(utts.size(), 3u);
  EXPECT_EQ(utts[0], (std::vector<TokenId>{vocab.id("u3"), vocab.id("w")}));
  EXPECT_EQ(utts[1], (std::vector<TokenId>{vocab.id("u4")}));
  EXPECT_EQ(utts[2], (std::vector<TokenId>{vocab.id("u5")}));
  EXPECT_THROW(make_batch(std::vector<DialogueSample>{s}, {0, 2, 1}), DomainError);
}

TEST(MakeBatch, ContentPreservingProperty) {
  Rng rng(9);
  std::vector<DialogueSample> samples;
  for (int k = 0; k < 30; ++k) samples.push_back(random_sample(rng, k));
  auto vocab = build_vocabulary(samples);
  encode(samples, vocab);
  BatchLimits big{8, 64, 8};
  auto b = make_batch(samples, big);
  for (std::size_t r = 0; r < samples.size(); ++r) {
    EXPECT_EQ(b.utterances(r), samples[r].context);
    EXPECT_EQ(b.response(r), samples[r].response);
    auto tr = b.triples(r);
    ASSERT_EQ(tr.size(), samples[r].knowledge.size());
    for (std::size_t m = 0; m < tr.size(); ++m) EXPECT_EQ(tr[m], samples[r].knowledge[m].tokens);
  }
}

TEST(Embeddings, LoadsKnownTokensAndRejectsBadRows) {
  Vocabulary vocab({"a", "b"});
  auto p = temp_file("emb.txt");
  write_text(p, "a 0.5 -1\nzzz 1 2\nb 3 4\n");
  auto e = load_embeddings(p.string(), vocab, 2);
  ASSERT_EQ(e.size(), 2u);
  EXPECT_EQ(e.at(vocab.id("a")), (std::vector<double>{0.5, -1}));
  write_text(p, "a 1 2 3\n");
  EXPECT_THROW(load_embeddings(p.string(), vocab, 2), DimensionError);
  write_text(p, "a 1 x\n");
  EXPECT_THROW(load_embeddings(p.string(), vocab, 2), ParseError);
}
