#include <gtest/gtest.h>

#include <set>
#include <string>

#include "kpn/corpus.hpp"
#include "kpn/synth.hpp"
#include "kpn/weaklabel.hpp"

using namespace kpn;

namespace {

SynthSpec small_spec() {
  SynthSpec s;
  s.entities = 20;
  s.dialogues = 200;
  s.vocab_size = 60;
  return s;
}

}  // namespace

TEST(Synth, SplitSizesAndLayout) {
  auto c = generate_synthetic_corpus(small_spec(), 1);
  EXPECT_EQ(c.train.size(), 120u * 10);
  EXPECT_EQ(c.valid.size(), 40u * 10);
  EXPECT_EQ(c.test.size(), 40u);
  for (const auto* split : {&c.train, &c.valid}) {
    for (std::size_t i = 0; i < split->size(); ++i) {
      const auto& s = (*split)[i];
      EXPECT_EQ(s.label, i % 10 == 0 ? 1 : 0) << i;
      EXPECT_EQ(s.context_text, (*split)[i - i % 10].context_text);
      EXPECT_NE(s.response_text, i % 10 ? (*split)[i - i % 10].response_text : std::string());
    }
  }
  for (const auto& s : c.test) {
    EXPECT_EQ(s.label, 1);
    EXPECT_EQ(s.candidates.size(), 9u);
    EXPECT_EQ(std::set<std::string>(s.candidates.begin(), s.candidates.end()).size(), 9u);
  }
}

TEST(Synth, SameSeedSameCorpus) {
  auto a = generate_synthetic_corpus(small_spec(), 5);
  auto b = generate_synthetic_corpus(small_spec(), 5);
  auto c = generate_synthetic_corpus(small_spec(), 6);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.test, b.test);
  EXPECT_NE(a.train, c.train);
}

TEST(Synth, SchemaRoundTrip) {
  auto c = generate_synthetic_corpus(small_spec(), 2);
  for (const auto* split : {&c.train, &c.test}) {
    for (const auto& s : *split) {
      auto j = nlohmann::json::parse(to_json(s).dump());
      EXPECT_EQ(to_json(from_json(j, "synth")), j);
    }
  }
}

TEST(Synth, WeakLabelsRecoverPlantedTripleOnEveryPositive) {
  auto c = generate_synthetic_corpus(SynthSpec{}, 3);
  std::size_t positives = 0;
  for (const auto* split : {&c.train, &c.valid, &c.test}) {
    for (auto s : *split) {
      if (s.label != 1) continue;
      ++positives;
      ASSERT_TRUE(s.planted.has_value());
      for (auto& k : s.knowledge) k.weak_label.reset();
      auto labels = label_sample(s);
      for (std::size_t j = 0; j < labels.size(); ++j)
        EXPECT_EQ(labels[j], static_cast<int>(j) == *s.planted ? 1 : 0) << "triple " << j;
    }
  }
  EXPECT_EQ(positives, 1000u);
}

TEST(Synth, ContextCoversExactlyOneGoalEntity) {
  auto c = generate_synthetic_corpus(small_spec(), 4);
  std::size_t first = 0;
  for (const auto& s : c.test) {
    std::string context;
    for (const auto& u : s.context_text) context += u + " ";
    auto mentioned = mentioned_entities(s.goal.entities, context);
    ASSERT_EQ(mentioned.size(), 1u);
    first += mentioned[0] == 0;
    auto target = mentioned_entities(s.goal.entities, s.response_text);
    EXPECT_EQ(target, (std::vector<std::size_t>{1 - mentioned[0]}));
  }
  EXPECT_GT(first, 5u);
  EXPECT_LT(first, 35u);
}

TEST(Synth, HardNegativesNameTheWrongEntity) {
  auto spec = small_spec();
  spec.same_entity_negatives = 1;
  auto c = generate_synthetic_corpus(spec, 7);
  for (std::size_t i = 0; i < c.train.size(); i += 10) {
    const auto& pos = c.train[i];
    const auto& target = pos.knowledge[*pos.planted].subject;
    for (std::size_t k = 1; k <= 5; ++k) {
      // A value word can recur across entities, so several triples may link.
      auto linked = link_knowledge(pos.knowledge, c.train[i + k].response_text);
      ASSERT_FALSE(linked.empty());
      bool names_target = false;
      for (auto j : linked) {
        EXPECT_NE(static_cast<int>(j), *pos.planted);
        names_target = names_target || pos.knowledge[j].subject == target;
      }
      if (k == 5) EXPECT_TRUE(names_target);
      else EXPECT_TRUE(std::any_of(linked.begin(), linked.end(), [&](auto j) { return pos.knowledge[j].subject != target; }));
    }
    for (std::size_t k = 6; k < 10; ++k) {
      auto linked = link_knowledge(pos.knowledge, c.train[i + k].response_text);
      EXPECT_EQ(std::count(linked.begin(), linked.end(), static_cast<std::size_t>(*pos.planted)), 0);
    }
  }
}

TEST(Synth, TestCandidatesFollowTheValidRecipe) {
  auto c = generate_synthetic_corpus(small_spec(), 7);
  for (const auto& s : c.test) {
    std::size_t wrong = 0;
    for (const auto& cand : s.candidates) {
      auto linked = link_knowledge(s.knowledge, cand);
      const auto& target = s.knowledge[*s.planted].subject;
      if (std::any_of(linked.begin(), linked.end(), [&](auto j) { return s.knowledge[j].subject != target; })) ++wrong;
    }
    EXPECT_GE(wrong, 4u);
  }
}

TEST(Synth, InvalidSpecsAreDomainErrors) {
  SynthSpec s;
  s.entities = 1;
  EXPECT_THROW(generate_synthetic_corpus(s, 1), DomainError);
  s = SynthSpec{};
  s.valid_fraction = 0.6;
  s.test_fraction = 0.5;
  EXPECT_THROW(generate_synthetic_corpus(s, 1), DomainError);
  s = SynthSpec{};
  s.hard_negatives = 10;
  EXPECT_THROW(generate_synthetic_corpus(s, 1), DomainError);
  s = SynthSpec{};
  s.same_entity_negatives = 5;
  EXPECT_THROW(generate_synthetic_corpus(s, 1), DomainError);
}
