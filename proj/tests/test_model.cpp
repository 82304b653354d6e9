#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "kpn/gradcheck.hpp"
#include "kpn/model.hpp"
#include "kpn/rng.hpp"
#include "kpn/selfcheck.hpp"
#include "kpn/trainer.hpp"

using namespace kpn;

namespace {

constexpr TokenId kFirst = Vocabulary::kSep + 1;

Hyperparams small_hp(std::size_t vocab = 40) {
  Hyperparams hp;
  hp.vocab_size = vocab;
  hp.embed_dim = 6;
  hp.lstm_hidden = 5;
  hp.mlp_hidden = {4};
  hp.match_len = 6;
  hp.cnn_filters = 3;
  hp.init_scale = 0.5;
  return hp;
}

std::vector<TokenId> random_ids(Rng& rng, std::size_t vocab, std::size_t min_len, std::size_t max_len) {
  std::vector<TokenId> v(min_len + rng.below(max_len - min_len + 1));
  for (auto& x : v) x = static_cast<TokenId>(kFirst + rng.below(vocab - kFirst));
  return v;
}

TurnInput random_turn(Rng& rng, std::size_t vocab, std::size_t utterances, std::size_t triples) {
  TurnInput t;
  for (std::size_t i = 0; i < utterances; ++i) t.utterances.push_back(random_ids(rng, vocab, 1, 7));
  t.goal = random_ids(rng, vocab, 1, 4);
  t.goal_entity.assign(t.goal.size(), 0);
  for (std::size_t j = 0; j < triples; ++j) t.triples.push_back(random_ids(rng, vocab, 3, 8));
  return t;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double loop_cos(std::span<const double> a, std::span<const double> b) {
  const double na = std::sqrt(dot(a, a)), nb = std::sqrt(dot(b, b));
  return na == 0 || nb == 0 ? 0.0 : dot(a, b) / (na * nb);
}

std::vector<double> row_of(const Tensor& table, TokenId id) {
  const std::size_t d = table.dim(1);
  if (id == Vocabulary::kPad) return std::vector<double>(d, 0.0);
  auto v = table.data();
  return {v.begin() + static_cast<std::ptrdiff_t>(id * d), v.begin() + static_cast<std::ptrdiff_t>((id + 1) * d)};
}

std::vector<double> mean_row(const Tensor& table, const std::vector<TokenId>& ids) {
  std::vector<double> m(table.dim(1), 0.0);
  for (auto id : ids) {
    auto r = row_of(table, id);
    for (std::size_t k = 0; k < m.size(); ++k) m[k] += r[k];
  }
  for (auto& x : m) x /= static_cast<double>(ids.size());
  return m;
}

// Scalar evaluation of a tanh MLP on one input row.
double loop_mlp(const Mlp& mlp, std::vector<double> x) {
  for (std::size_t l = 0; l < mlp.weights.size(); ++l) {
    const auto& W = mlp.weights[l];
    const std::size_t in = W.dim(0), out = W.dim(1);
    std::vector<double> y(out);
    for (std::size_t o = 0; o < out; ++o) {
      double s = mlp.biases[l].data()[o];
      for (std::size_t i = 0; i < in; ++i) s += x[i] * W.data()[i * out + o];
      y[o] = l + 1 < mlp.weights.size() ? std::tanh(s) : s;
    }
    x = std::move(y);
  }
  return x[0];
}

void set_all(Tensor t, double v) {
  auto d = t.mutable_data();
  std::fill(d.begin(), d.end(), v);
}

// Embedding rows are unit basis vectors, so distinct tokens are orthogonal.
void make_orthonormal(KpnModel& m) {
  auto& e = m.mutable_params().embedding;
  const std::size_t V = e.dim(0), d = e.dim(1);
  ASSERT_LE(V, d + kFirst);
  auto data = e.mutable_data();
  std::fill(data.begin(), data.end(), 0.0);
  for (std::size_t id = kFirst; id < V; ++id) data[id * d + (id - kFirst)] = 1.0;
}

}  // namespace

TEST(Embed, LooksUpStoredRowsAndZeroesPad) {
  KpnModel m(small_hp(), 1);
  auto e = m.embed({5, Vocabulary::kPad, 9});
  auto r5 = row_of(m.params().embedding, 5), r9 = row_of(m.params().embedding, 9);
  for (std::size_t k = 0; k < 6; ++k) {
    EXPECT_EQ(e.data()[0 * e.dim(1) + k], r5[k]);
    EXPECT_EQ(e.data()[1 * e.dim(1) + k], 0.0);
    EXPECT_EQ(e.data()[2 * e.dim(1) + k], r9[k]);
  }
  auto pad = m.embed({Vocabulary::kPad, Vocabulary::kPad});
  for (double x : pad.data()) EXPECT_EQ(x, 0.0);
  EXPECT_THROW(m.embed({40}), IndexError);
}

TEST(TrackGoal, OrthonormalSaturation) {
  Hyperparams hp = small_hp(10);
  hp.embed_dim = 8;
  KpnModel m(hp, 2);
  make_orthonormal(m);
  auto [vp, gp] = m.track_goal(m.embed({4, 5}), {m.embed({3, 5}), m.embed({4, 7})});
  EXPECT_EQ(vp.data()[0], 0.0);
  EXPECT_EQ(vp.data()[1], 0.0);
  for (double x : gp.data()) EXPECT_EQ(x, 0.0);
  auto [vp2, gp2] = m.track_goal(m.embed({4, 5}), {m.embed({3, 6})});
  EXPECT_EQ(vp2.data()[0], 1.0);
  EXPECT_EQ(vp2.data()[1], 1.0);
  auto g = m.embed({4, 5});
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_EQ(gp2.data()[i], g.data()[i]);
}

TEST(TrackGoal, MatchesLoopOracle) {
  Rng rng(3);
  KpnModel m(small_hp(), 3);
  const auto& E = m.params().embedding;
  for (int trial = 0; trial < 20; ++trial) {
    auto goal = random_ids(rng, 40, 1, 5);
    std::vector<std::vector<TokenId>> utts = {random_ids(rng, 40, 1, 6), random_ids(rng, 40, 1, 6)};
    std::vector<Tensor> ue;
    for (auto& u : utts) ue.push_back(m.embed(u));
    auto [vp, gp] = m.track_goal(m.embed(goal), ue);
    for (std::size_t i = 0; i < goal.size(); ++i) {
      double best = -2;
      for (auto& u : utts)
        for (auto id : u) best = std::max(best, loop_cos(row_of(E, goal[i]), row_of(E, id)));
      const double v_prime = 1.0 - std::max(0.0, best);
      EXPECT_NEAR(vp.data()[i], v_prime, 1e-12);
      EXPECT_GE(vp.data()[i], 0.0);
      EXPECT_LE(vp.data()[i], 1.0);
      auto row = row_of(E, goal[i]);
      for (std::size_t k = 0; k < 6; ++k) EXPECT_NEAR(gp.data()[i * gp.dim(1) + k], v_prime * row[k], 1e-12);
    }
  }
}

TEST(TrackGoal, PresentTokenIsPartlyCovered) {
  Rng rng(4);
  KpnModel m(small_hp(), 4);
  for (int trial = 0; trial < 50; ++trial) {
    auto goal = random_ids(rng, 40, 1, 4);
    auto utt = random_ids(rng, 40, 1, 6);
    utt.push_back(goal[0]);
    auto [vp, gp] = m.track_goal(m.embed(goal), {m.embed(utt)});
    EXPECT_LT(vp.data()[0], 1e-12);
  }
}

TEST(PredictKnowledge, ZeroMlpGivesHalf) {
  Rng rng(5);
  KpnModel m(small_hp(), 5);
  for (auto& w : m.params().kp_mlp.weights) set_all(w, 0.0);
  for (auto& b : m.params().kp_mlp.biases) set_all(b, 0.0);
  auto turn = random_turn(rng, 40, 3, 4);
  auto c = m.encode_context(turn);
  for (double s : c.kp_scores.data()) EXPECT_EQ(s, 0.5);
  for (std::size_t j = 0; j < 4; ++j) {
    auto raw = m.embed(turn.triples[j]);
    for (std::size_t i = 0; i < raw.size(); ++i) EXPECT_EQ(c.knowledge_emb[j].data()[i], 0.5 * raw.data()[i]);
  }
}

TEST(PredictKnowledge, DuplicateTriplesScoreEqually) {
  Rng rng(6);
  KpnModel m(small_hp(), 6);
  auto turn = random_turn(rng, 40, 2, 3);
  turn.triples.push_back(turn.triples[1]);
  auto c = m.encode_context(turn);
  EXPECT_EQ(c.kp_scores.data()[1], c.kp_scores.data()[3]);
}

TEST(PredictKnowledge, MatchesLoopOracle) {
  Rng rng(7);
  for (std::size_t n_utt : {1u, 2u, 3u, 5u}) {
    KpnModel m(small_hp(), 7 + n_utt);
    const auto& E = m.params().embedding;
    auto turn = random_turn(rng, 40, n_utt, 4);
    auto c = m.encode_context(turn);
    // e^{g'} rows then their mean.
    std::vector<double> g_mean(6, 0.0);
    for (std::size_t i = 0; i < turn.goal.size(); ++i)
      for (std::size_t k = 0; k < 6; ++k) g_mean[k] += c.goal_prime.data()[i * 6 + k] / static_cast<double>(turn.goal.size());
    std::vector<std::vector<double>> queries = {g_mean};
    for (std::size_t pad = n_utt; pad < 3; ++pad) queries.emplace_back(6, 0.0);
    for (std::size_t i = n_utt > 3 ? n_utt - 3 : 0; i < n_utt; ++i) queries.push_back(mean_row(E, turn.utterances[i]));
    for (std::size_t j = 0; j < 4; ++j) {
      auto key = mean_row(E, turn.triples[j]);
      std::vector<double> feats;
      for (const auto& q : queries) feats.push_back(loop_cos(q, key));
      const double s = 1.0 / (1.0 + std::exp(-loop_mlp(m.params().kp_mlp, feats)));
      EXPECT_NEAR(c.kp_scores.data()[j], s, 1e-10) << "utterances " << n_utt << " triple " << j;
      EXPECT_GT(c.kp_scores.data()[j], 0.0);
      EXPECT_LT(c.kp_scores.data()[j], 1.0);
    }
  }
  KpnModel m(small_hp(), 1);
  EXPECT_THROW(m.predict_knowledge(m.embed({5}), {m.embed({6})}, {}), DomainError);
}

TEST(MatchContext, RecompositionOracle) {
  Rng rng(8);
  KpnModel m(small_hp(), 8);
  const auto& p = m.params();
  auto turn = random_turn(rng, 40, 3, 2);
  for (auto& u : turn.utterances) u = random_ids(rng, 40, 1, 6);
  auto c = m.encode_context(turn);
  auto resp = random_ids(rng, 40, 2, 6);
  auto r_emb = m.embed(resp);
  auto r_hidden = lstm_sequence(r_emb, p.encoder).hidden;
  std::vector<Tensor> feats;
  for (std::size_t i = 0; i < turn.utterances.size(); ++i) {
    auto u_emb = m.embed(turn.utterances[i]);
    auto u_hidden = lstm_sequence(u_emb, p.encoder).hidden;
    auto mm = pad_stack({cosine_matrix(u_emb, r_emb), cosine_matrix(u_hidden, r_hidden)}, 6, 6);
    feats.push_back(conv2d_block(mm, p.cnn_context_filters, p.cnn_context_bias));
  }
  auto last = lstm_sequence(stack(feats), p.aggregate).last;
  const double want = loop_mlp(p.context_mlp, {last.data().begin(), last.data().end()});
  EXPECT_NEAR(m.match_context(c, r_emb, r_hidden).item(), want, 1e-10);
}

TEST(MatchContext, ZeroEmbeddingsGiveConstant) {
  Rng rng(9);
  KpnModel m(small_hp(), 9);
  set_all(m.params().embedding, 0.0);
  // Zero encoder weights keep the hidden channel at zero as well.
  for (auto& nt : m.params().named())
    if (nt.name.rfind("encoder", 0) == 0) set_all(nt.tensor, 0.0);
  auto turn = random_turn(rng, 40, 3, 2);
  auto c = m.encode_context(turn);
  std::vector<double> scores;
  for (int k = 0; k < 5; ++k) {
    auto resp = random_ids(rng, 40, 1, 9);
    auto r_emb = m.embed(resp);
    scores.push_back(m.match_context(c, r_emb, lstm_sequence(r_emb, m.params().encoder).hidden).item());
  }
  for (double s : scores) EXPECT_EQ(s, scores[0]);
}

TEST(MatchKnowledge, SingleTripleUsesItsFeatures) {
  Rng rng(10);
  KpnModel m(small_hp(), 10);
  const auto& p = m.params();
  auto turn = random_turn(rng, 40, 2, 1);
  auto c = m.encode_context(turn);
  auto r_emb = m.embed(random_ids(rng, 40, 2, 6));
  auto r_hidden = lstm_sequence(r_emb, p.encoder).hidden;
  auto v = conv2d_block(m.matching_matrix(c.knowledge_emb[0], c.knowledge_hidden[0], r_emb, r_hidden),
                        p.cnn_knowledge_filters, p.cnn_knowledge_bias);
  const double want = loop_mlp(p.knowledge_mlp, {v.data().begin(), v.data().end()});
  EXPECT_NEAR(m.match_knowledge(c, r_emb, r_hidden).item(), want, 1e-12);
}

TEST(MatchKnowledge, EqualAlphaAveragesFeatures) {
  Rng rng(11);
  KpnModel m(small_hp(), 11);
  const auto& p = m.params();
  // ReLU(MLP) is zero for every triple once the output layer is zeroed.
  set_all(p.alpha_mlp.weights.back(), 0.0);
  set_all(p.alpha_mlp.biases.back(), 0.0);
  auto turn = random_turn(rng, 40, 2, 3);
  auto c = m.encode_context(turn);
  auto r_emb = m.embed(random_ids(rng, 40, 2, 6));
  auto r_hidden = lstm_sequence(r_emb, p.encoder).hidden;
  std::vector<double> h2(p.knowledge_mlp.weights.front().dim(0), 0.0);
  for (std::size_t j = 0; j < 3; ++j) {
    auto v = conv2d_block(m.matching_matrix(c.knowledge_emb[j], c.knowledge_hidden[j], r_emb, r_hidden),
                          p.cnn_knowledge_filters, p.cnn_knowledge_bias);
    for (std::size_t k = 0; k < h2.size(); ++k) h2[k] += v.data()[k] / 3.0;
  }
  EXPECT_NEAR(m.match_knowledge(c, r_emb, r_hidden).item(), loop_mlp(p.knowledge_mlp, h2), 1e-12);
}

TEST(MatchGoal, ZeroLstmWeightsGiveConstant) {
  Rng rng(12);
  KpnModel m(small_hp(), 12);
  for (const auto* w : {&m.params().goal_lstm, &m.params().encoder}) {
    set_all(w->w_x, 0.0);
    set_all(w->w_h, 0.0);
    set_all(w->b, 0.0);
  }
  std::vector<double> s;
  for (int k = 0; k < 4; ++k) {
    auto turn = random_turn(rng, 40, 2, 2);
    auto out = m.score_texts(turn, {random_ids(rng, 40, 1, 6)});
    s.push_back(out[0].s_gr);
  }
  for (double x : s) EXPECT_EQ(x, s[0]);
}

TEST(MatchGoal, CoveredAndUncoveredGoalsDiffer) {
  Hyperparams hp = small_hp(10);
  hp.embed_dim = 8;
  KpnModel m(hp, 13);
  make_orthonormal(m);
  TurnInput covered{{{4, 5, 6}}, {4, 5}, {0, 0}, {{4, 7, 8}}};
  TurnInput uncovered{{{6, 7, 8}}, {4, 5}, {0, 0}, {{4, 7, 8}}};
  auto a = m.score_texts(covered, {{9, 6}});
  auto b = m.score_texts(uncovered, {{9, 6}});
  EXPECT_EQ(a[0].goal_coverage, (std::vector<double>{0.0, 0.0}));
  EXPECT_EQ(b[0].goal_coverage, (std::vector<double>{1.0, 1.0}));
  EXPECT_NE(a[0].s_gr, b[0].s_gr);
}

TEST(Score, MeanOfHeadsAndDuplicateCandidates) {
  Rng rng(14);
  KpnModel m(small_hp(), 14);
  for (int trial = 0; trial < 10; ++trial) {
    auto turn = random_turn(rng, 40, 1 + rng.below(4), 1 + rng.below(4));
    auto r = random_ids(rng, 40, 1, 8);
    auto out = m.score_texts(turn, {r, random_ids(rng, 40, 1, 8), r});
    for (const auto& s : out) {
      EXPECT_NEAR(s.y_hat, (s.s_cr + s.s_kr + s.s_gr) / 3.0, 1e-12);
      for (double k : s.kp_scores) {
        EXPECT_GT(k, 0.0);
        EXPECT_LT(k, 1.0);
      }
      for (double v : s.goal_coverage) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
      }
    }
    EXPECT_EQ(out[0].y_hat, out[2].y_hat);
  }
}

TEST(Score, KnowledgePermutationInvariance) {
  Rng rng(15);
  KpnModel m(small_hp(), 15);
  for (int trial = 0; trial < 10; ++trial) {
    auto turn = random_turn(rng, 40, 3, 5);
    std::vector<double> weak(5, 0.0);
    weak[rng.below(5)] = 1.0;
    std::vector<std::size_t> perm(5);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    TurnInput permuted = turn;
    std::vector<double> weak_p(5);
    for (std::size_t j = 0; j < 5; ++j) {
      permuted.triples[j] = turn.triples[perm[j]];
      weak_p[j] = weak[perm[j]];
    }
    auto resp = random_ids(rng, 40, 2, 7);
    auto fa = m.forward(turn, {resp});
    auto fb = m.forward(permuted, {resp});
    EXPECT_NEAR(fa.heads[0].y_hat.item(), fb.heads[0].y_hat.item(), 1e-12);
    EXPECT_NEAR(fa.heads[0].s_kr.item(), fb.heads[0].s_kr.item(), 1e-12);
    std::vector<std::uint8_t> mask(5, 1);
    EXPECT_NEAR(kp_loss(fa.context.kp_scores, weak, mask).item(), kp_loss(fb.context.kp_scores, weak_p, mask).item(),
                1e-12);
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(fb.context.kp_scores.data()[j], fa.context.kp_scores.data()[perm[j]]);
  }
}

TEST(Score, PaddingAndMaskedIdsChangeNothing) {
  Rng rng(16);
  std::vector<DialogueSample> samples;
  for (int i = 0; i < 3; ++i) {
    DialogueSample s;
    s.context_text = {"alpha beta gamma", "delta alpha", "eps zeta eta theta"};
    s.goal.entities = {"alpha", "zeta"};
    s.knowledge = {{"alpha", "is", "beta", {}, {}}, {"zeta", "likes", "eta theta", {}, {}}};
    s.response_text = i == 0 ? "alpha likes eta" : i == 1 ? "zeta is beta gamma" : "theta";
    s.label = i == 0;
    samples.push_back(s);
  }
  Vocabulary vocab = build_vocabulary(samples);
  encode(samples, vocab);
  Hyperparams hp = small_hp(vocab.size());
  KpnModel m(hp, 16);
  auto tight = m.score(make_batch(samples, BatchLimits{3, 7, 2}));
  auto loose = m.score(make_batch(samples, BatchLimits{9, 14, 7}));
  Batch noisy = make_batch(samples, BatchLimits{9, 14, 7});
  for (std::size_t i = 0; i < noisy.context_ids.size(); ++i)
    if (!noisy.context_mask[i]) noisy.context_ids[i] = static_cast<TokenId>(kFirst + rng.below(5));
  for (std::size_t i = 0; i < noisy.knowledge_ids.size(); ++i)
    if (!noisy.knowledge_mask[i]) noisy.knowledge_ids[i] = static_cast<TokenId>(kFirst + rng.below(5));
  for (std::size_t i = 0; i < noisy.response_ids.size(); ++i)
    if (!noisy.response_mask[i]) noisy.response_ids[i] = static_cast<TokenId>(kFirst + rng.below(5));
  auto masked = m.score(noisy);
  ASSERT_EQ(tight.size(), 3u);
  for (std::size_t r = 0; r < 3; ++r) {
    EXPECT_NEAR(tight[r].y_hat, loose[r].y_hat, 1e-9);
    EXPECT_NEAR(masked[r].y_hat, loose[r].y_hat, 1e-9);
  }
}

TEST(Score, DeterministicForSeed) {
  Rng rng(17);
  auto turn = random_turn(rng, 40, 3, 3);
  auto r = random_ids(rng, 40, 2, 6);
  KpnModel a(small_hp(), 99), b(small_hp(), 99), c(small_hp(), 100);
  EXPECT_EQ(a.score_texts(turn, {r})[0].y_hat, b.score_texts(turn, {r})[0].y_hat);
  EXPECT_NE(a.score_texts(turn, {r})[0].y_hat, c.score_texts(turn, {r})[0].y_hat);
}

TEST(Losses, RsLossValuesAndOracle) {
  EXPECT_NEAR(rs_loss(Tensor({1}, {0.0}), std::vector<double>{1.0}).item(), std::log(2.0), 1e-15);
  EXPECT_LT(rs_loss(Tensor({2}, {40.0, -40.0}), std::vector<double>{1.0, 0.0}).item(), 1e-15);
  EXPECT_THROW(rs_loss(Tensor({1}, {0.0}), std::vector<double>{0.5}), DomainError);
  Rng rng(18);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> z(10), y(10);
    double want = 0;
    for (std::size_t i = 0; i < 10; ++i) {
      z[i] = rng.uniform(-6, 6);
      y[i] = static_cast<double>(rng.below(2));
      const double s = 1.0 / (1.0 + std::exp(-z[i]));
      want -= y[i] * std::log(s) + (1 - y[i]) * std::log(1 - s);
    }
    EXPECT_NEAR(rs_loss(Tensor({10}, z), y).item(), want / 10.0, 1e-12);
  }
}

TEST(Losses, KpLossValuesAndOracle) {
  std::vector<std::uint8_t> all(4, 1);
  EXPECT_NEAR(kp_loss(Tensor({4}, std::vector<double>(4, 0.5)), std::vector<double>{1, 0, 0, 1}, all).item(),
              std::log(2.0), 1e-15);
  EXPECT_LT(kp_loss(Tensor({2}, {1.0, 0.0}), std::vector<double>{1, 0}, std::vector<std::uint8_t>{1, 1}).item(), 1e-10);
  Rng rng(19);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> s(8), y(8);
    std::vector<std::uint8_t> mask(8);
    double want = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < 8; ++i) {
      s[i] = rng.uniform(0.01, 0.99);
      y[i] = static_cast<double>(rng.below(2));
      mask[i] = i == 0 || rng.below(4) != 0;
      if (!mask[i]) continue;
      want -= y[i] * std::log(s[i]) + (1 - y[i]) * std::log(1 - s[i]);
      ++n;
    }
    EXPECT_NEAR(kp_loss(Tensor({8}, s), y, mask).item(), want / static_cast<double>(n), 1e-12);
  }
}

TEST(Gradients, EndToEndJointLossTwoSamples) {
  auto tiny = selfcheck::tiny_turns();
  ASSERT_EQ(tiny.turns.size(), 2u);
  Hyperparams hp = small_hp(tiny.vocab_size);
  hp.embed_dim = 4;
  hp.lstm_hidden = 3;
  hp.mlp_hidden = {3};
  hp.match_len = 5;
  hp.cnn_filters = 2;
  KpnModel m(hp, 20);
  auto r = check_gradients([&] { return joint_loss(m, tiny.turns, 0.3).total; }, m.params().named());
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_param << "[" << r.worst_index << "] analytic " << r.analytic
                                   << " numeric " << r.numeric;
  EXPECT_EQ(r.checked, m.params().count());
}

TEST(Hyperparams, ValidationAndJson) {
  Hyperparams hp = small_hp();
  EXPECT_NO_THROW(hp.validate());
  nlohmann::json j = hp;
  EXPECT_EQ(j.get<Hyperparams>(), hp);
  hp.kp_window = 0;
  EXPECT_THROW(hp.validate(), DomainError);
  hp = small_hp();
  hp.lambda_kp = -1;
  EXPECT_THROW(hp.validate(), DomainError);
  hp = small_hp();
  hp.embed_dim = 0;
  EXPECT_THROW(KpnModel(hp, 1), DomainError);
}
