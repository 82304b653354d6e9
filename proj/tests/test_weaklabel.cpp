#include <gtest/gtest.h>

#include <string>
#include <vector>

#include "kpn/corpus.hpp"
#include "kpn/rng.hpp"
#include "kpn/weaklabel.hpp"

using namespace kpn;

namespace {

KnowledgeTriple triple(const std::string& object) { return {"McDull", "star", object, {}, {}}; }

const std::vector<std::string> kComment = {"the", "songs", "are", "gentle", "and", "jokes", "land", "with", "real", "warmth"};

std::string first_k_plus_filler(std::size_t k) {
  std::string s;
  for (std::size_t i = 0; i < k; ++i) s += kComment[i] + " ";
  return s + "honestly yes";
}

DialogueSample positive(const std::string& response, const std::vector<std::string>& objects) {
  DialogueSample s;
  s.context_text = {"hi"};
  s.goal.entities = {"McDull"};
  for (const auto& o : objects) s.knowledge.push_back(triple(o));
  s.response_text = response;
  s.label = 1;
  return s;
}

}  // namespace

TEST(LabelTriple, ShortObjects) {
  EXPECT_EQ(label_triple(triple("Bo Peng"), "Bo Peng is the star of it"), 1);
  EXPECT_EQ(label_triple(triple("Bo Peng"), "I like that movie"), 0);
  EXPECT_EQ(label_triple(triple("Bo Peng"), "peng bo"), 0);
  EXPECT_EQ(label_triple(triple("Bo Peng"), "BO, PENG!"), 1);
  EXPECT_THROW(label_triple(triple("--"), "x"), DomainError);
}

TEST(LabelTriple, DescriptiveObjectCoverageBoundary) {
  const std::string object = join(kComment, " ");
  ASSERT_EQ(tokenize(object).size(), 10u);
  EXPECT_EQ(label_triple(triple(object), first_k_plus_filler(8)), 1);  // 0.8
  EXPECT_EQ(label_triple(triple(object), first_k_plus_filler(7)), 0);  // exactly 0.7
  EXPECT_EQ(label_triple(triple(object), first_k_plus_filler(10)), 1);
  // Reordering does not matter for descriptive objects.
  EXPECT_EQ(label_triple(triple(object), "warmth real with land jokes and gentle are"), 1);
}

TEST(LabelTriple, SubjectIsIgnored) {
  KnowledgeTriple t{"Bo Peng", "star", "McDull", {}, {}};
  EXPECT_EQ(label_triple(t, "Bo Peng is great"), 0);
}

TEST(LabelTriple, CoverageCountsRepeatedTokensOnce) {
  EXPECT_DOUBLE_EQ(token_coverage({"a", "a", "b"}, {"a", "b"}), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(token_coverage({"a", "a", "b"}, {"a", "a", "b", "c"}), 1.0);
  EXPECT_DOUBLE_EQ(token_coverage({"x"}, {}), 0.0);
}

TEST(LabelTriple, MonotoneUnderAppendingObjectProperty) {
  Rng rng(4);
  const std::vector<std::string> words = {"a", "b", "c", "d", "e", "f", "g", "h", "i", "j"};
  LinkConfig cfg;
  for (int trial = 0; trial < 400; ++trial) {
    std::string obj, resp;
    for (std::size_t i = 0, n = 1 + rng.below(14); i < n; ++i) obj += rng.pick(words) + " ";
    for (std::size_t i = 0, n = rng.below(14); i < n; ++i) resp += rng.pick(words) + " ";
    const int before = label_triple(triple(obj), resp, cfg);
    EXPECT_EQ(label_triple(triple(obj), resp + " " + obj, cfg), 1);
    EXPECT_GE(label_triple(triple(obj), resp + " " + obj, cfg), before);
    // A short object fully contained is positive under either branch.
    auto o = tokenize(obj);
    if (contains_subsequence(tokenize(resp), o)) {
      EXPECT_EQ(before, 1);
      LinkConfig low{0.7, 1};
      EXPECT_EQ(label_triple(triple(obj), resp, low), 1);
    }
  }
}

TEST(LabelSample, OneHotAndTwoHot) {
  auto s = positive("I loved Bo Peng there", {"Bo Peng", "Andy Lau", "comedy"});
  EXPECT_EQ(label_sample(s), (std::vector<int>{1, 0, 0}));
  EXPECT_EQ(s.knowledge[0].weak_label, 1);
  auto t = positive("a comedy with Andy Lau", {"Bo Peng", "Andy Lau", "comedy"});
  EXPECT_EQ(label_sample(t), (std::vector<int>{0, 1, 1}));
  t.label = 0;
  EXPECT_THROW(label_sample(t), UsageError);
}

TEST(LabelCorpus, NegativesCopyTheirPositive) {
  auto p = positive("Bo Peng", {"Bo Peng", "comedy"});
  auto samples = negative_sample({p}, {"comedy only", "other"}, 2, 1);
  label_corpus(samples);
  for (const auto& s : samples) {
    EXPECT_EQ(s.knowledge[0].weak_label, 1);
    EXPECT_EQ(s.knowledge[1].weak_label, 0);
  }
  std::vector<DialogueSample> orphan = {samples[1]};
  EXPECT_THROW(label_corpus(orphan), UsageError);
}

TEST(Agreement, IdenticalAndKappa) {
  auto a = agreement({1, 0, 1}, {{1, 1, 1}, {0, 0, 0}, {1, 1, 0}});
  EXPECT_DOUBLE_EQ(a.percent_agree, 100.0);
  EXPECT_TRUE(a.disagreements.empty());
  EXPECT_DOUBLE_EQ(fleiss_kappa({{1, 1, 1}, {0, 0, 0}, {1, 1, 1}}), 1.0);
  EXPECT_DOUBLE_EQ(fleiss_kappa({{1, 1, 1}, {1, 1, 1}}), 1.0);
  EXPECT_THROW(agreement({1}, {{1, 1, 1}, {0, 0, 0}}), DimensionError);
}

TEST(Agreement, TenItemKappaByHand) {
  // Ones per item: 3 3 3 0 0 2 1 0 3 2 with three raters.
  // P_i is 1 for unanimous items and 1/3 otherwise, so P-bar = 8/10.
  // p(1) = 17/30, P_e = (17^2 + 13^2) / 900 = 458/900.
  // kappa = (0.8 - 458/900) / (1 - 458/900) = 262/442.
  std::vector<std::vector<int>> r = {{1, 1, 1}, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, {0, 0, 0},
                                     {1, 1, 0}, {0, 1, 0}, {0, 0, 0}, {1, 1, 1}, {0, 1, 1}};
  EXPECT_NEAR(fleiss_kappa(r), 262.0 / 442.0, 1e-15);
  std::vector<int> weak = {1, 1, 1, 0, 0, 1, 1, 0, 1, 1};  // item 6 disagrees with majority 0
  auto a = agreement(weak, r);
  EXPECT_DOUBLE_EQ(a.percent_agree, 90.0);
  EXPECT_EQ(a.disagreements, (std::vector<std::size_t>{6}));
}

TEST(MiniSet, BundledHandLabelsAgreeFully) {
  const std::string dir = std::string(KPN_SOURCE_DIR) + "/data/weaklabel_mini/";
  auto samples = read_jsonl(dir + "samples.jsonl");
  auto ann = load_annotations(dir + "annotations.jsonl");
  EXPECT_EQ(samples.size(), 30u);
  auto a = agreement(samples, ann);
  EXPECT_DOUBLE_EQ(a.percent_agree, 100.0);
  EXPECT_TRUE(a.disagreements.empty());
}
