#include <gtest/gtest.h>

#include <set>
#include <string>
#include <vector>

#include "kpn/evaluate.hpp"
#include "kpn/synth.hpp"

using namespace kpn;

namespace {

const SynthCorpus& corpus() {
  static const SynthCorpus c = [] {
    SynthSpec spec;
    spec.entities = 20;
    spec.dialogues = 300;
    spec.vocab_size = 60;
    return generate_synthetic_corpus(spec, 8);
  }();
  return c;
}

InvertedIndex train_index() {
  std::vector<std::string> pool;
  for (const auto& s : corpus().train) pool.push_back(s.response_text);
  return build_index(pool);
}

}  // namespace

TEST(Scenario, ParsesBothSpellings) {
  EXPECT_EQ(parse_scenario("ranked10"), Scenario::ranked_10);
  EXPECT_EQ(parse_scenario("practical_49"), Scenario::practical_49);
  EXPECT_THROW(parse_scenario("top5"), UsageError);
}

TEST(Ranked10, TruthInsertedAtSeededPosition) {
  auto sets = ranked_10_sets(corpus().test, 3);
  ASSERT_EQ(sets.size(), corpus().test.size());
  std::set<std::size_t> positions;
  for (const auto& c : sets) {
    ASSERT_EQ(c.candidates.size(), 10u);
    EXPECT_EQ(c.candidates[c.truth], c.sample->response_text);
    EXPECT_EQ(std::count(c.candidates.begin(), c.candidates.end(), c.sample->response_text), 1);
    positions.insert(c.truth);
  }
  EXPECT_GT(positions.size(), 5u);
  auto again = ranked_10_sets(corpus().test, 3);
  for (std::size_t i = 0; i < sets.size(); ++i) EXPECT_EQ(again[i].candidates, sets[i].candidates);
}

TEST(Ranked10, MissingCandidatesIsSchemaError) {
  auto test = corpus().test;
  test[2].candidates.clear();
  EXPECT_THROW(ranked_10_sets(test, 1), SchemaError);
}

TEST(Ranked10, OracleScorerIsPerfect) {
  auto r = evaluate(oracle_scorer(), corpus().test, Scenario::ranked_10, nullptr, 1);
  EXPECT_EQ(r.model.hits1, 1.0);
  EXPECT_EQ(r.model.mrr, 1.0);
  EXPECT_EQ(r.model.bleu1, 1.0);
  EXPECT_EQ(r.model.knowledge_accuracy, 1.0);
  ASSERT_TRUE(r.model.goal_accuracy.has_value());
  EXPECT_EQ(*r.model.goal_accuracy, 1.0);
  EXPECT_EQ(r.to_json()["model"], r.to_json()["ground_truth"]);
  EXPECT_EQ(r.model.candidates_per_turn, 10u);
}

TEST(Ranked10, RandomScorerNearChance) {
  std::vector<DialogueSample> many;
  for (int rep = 0; rep < 25; ++rep) many.insert(many.end(), corpus().test.begin(), corpus().test.end());
  auto r = evaluate(random_scorer(5), many, Scenario::ranked_10, nullptr, 1);
  EXPECT_NEAR(r.model.hits1, 0.1, 0.03);
  EXPECT_EQ(r.ceiling.hits1, 1.0);
}

TEST(Practical49, OracleHarnessIsPerfect) {
  auto ix = train_index();
  auto r = evaluate(oracle_scorer(), corpus().test, Scenario::practical_49, &ix, 2);
  EXPECT_EQ(r.model.hits1, 1.0);
  EXPECT_EQ(r.model.mrr, 1.0);
  EXPECT_EQ(r.model.candidates_per_turn, 50u);
  for (const auto& t : r.turns) {
    EXPECT_EQ(t.candidates.size(), 50u);
    EXPECT_EQ(std::set<std::string>(t.candidates.begin(), t.candidates.end()).size(), 50u);
  }
}

TEST(Practical49, QueryAddsUnmentionedGoalEntities) {
  DialogueSample s;
  s.context_text = {"hello", "do you know bora ?", "genre ?"};
  s.goal.entities = {"bora", "kipu lan"};
  EXPECT_EQ(practical_query(s), "genre ? kipu lan");
  EXPECT_THROW(evaluate(oracle_scorer(), corpus().test, Scenario::practical_49, nullptr, 1), UsageError);
}

TEST(ModelScorer, MatchesScoreCandidates) {
  auto train = corpus().train;
  auto vocab = build_vocabulary(train);
  Hyperparams hp;
  hp.vocab_size = vocab.size();
  hp.embed_dim = 6;
  hp.lstm_hidden = 5;
  hp.mlp_hidden = {4};
  hp.match_len = 8;
  hp.cnn_filters = 2;
  KpnModel m(hp, 3);
  BatchLimits limits;
  const auto& s = corpus().test[0];
  std::vector<std::string> cands = {s.response_text, s.candidates[0], "never seen words here"};
  auto scores = model_scorer(m, vocab, limits)(s, cands);
  auto full = score_candidates(m, vocab, limits, s, cands);
  ASSERT_EQ(scores.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(scores[i], full[i].y_hat);
  EXPECT_TRUE(score_candidates(m, vocab, limits, s, {}).empty());
}
