#pragma once

// The knowledge prediction network: goal tracking, knowledge prediction and
// three matching heads (context, knowledge, goal) whose mean is the score.

#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kpn/corpus.hpp"
#include "kpn/errors.hpp"
#include "kpn/gradcheck.hpp"
#include "kpn/rng.hpp"
#include "kpn/tensor.hpp"

namespace kpn {

struct Hyperparams {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 32;
  std::size_t lstm_hidden = 32;
  std::size_t kp_window = 3;  // m
  double lambda_kp = 0.3;
  std::vector<std::size_t> mlp_hidden = {32};
  /// Matching matrices are cropped/zero-padded to match_len × match_len.
  std::size_t match_len = 16;
  std::size_t cnn_filters = 8;
  std::size_t cnn_kernel = 3;
  double init_scale = 0.1;
  bool disable_goal_tracking = false;
  bool disable_knowledge_head = false;
  bool disable_goal_head = false;

  void validate() const {
    if (vocab_size < 4) throw DomainError("hyperparams: vocab_size must cover the reserved ids plus one token");
    if (embed_dim == 0 || lstm_hidden == 0) throw DomainError("hyperparams: embed_dim and lstm_hidden must be positive");
    if (kp_window < 1) throw DomainError("hyperparams: kp_window must be at least 1");
    if (!(lambda_kp >= 0.0)) throw DomainError("hyperparams: lambda_kp must be non-negative");
    for (auto h : mlp_hidden)
      if (h == 0) throw DomainError("hyperparams: mlp_hidden sizes must be positive");
    if (cnn_filters == 0 || cnn_kernel == 0) throw DomainError("hyperparams: cnn sizes must be positive");
    if (match_len < cnn_kernel) throw DomainError("hyperparams: match_len must be at least cnn_kernel");
    if (!(init_scale > 0.0)) throw DomainError("hyperparams: init_scale must be positive");
  }

  std::size_t feature_size() const { return conv_block_output_size(cnn_filters, match_len, match_len, cnn_kernel); }

  bool operator==(const Hyperparams&) const = default;
};

inline void to_json(nlohmann::json& j, const Hyperparams& h) {
  j = {{"vocab_size", h.vocab_size},
       {"embed_dim", h.embed_dim},
       {"lstm_hidden", h.lstm_hidden},
       {"kp_window", h.kp_window},
       {"lambda_kp", h.lambda_kp},
       {"mlp_hidden", h.mlp_hidden},
       {"match_len", h.match_len},
       {"cnn_filters", h.cnn_filters},
       {"cnn_kernel", h.cnn_kernel},
       {"init_scale", h.init_scale},
       {"disable_goal_tracking", h.disable_goal_tracking},
       {"disable_knowledge_head", h.disable_knowledge_head},
       {"disable_goal_head", h.disable_goal_head}};
}

inline void from_json(const nlohmann::json& j, Hyperparams& h) {
  Hyperparams d;
  h.vocab_size = j.value("vocab_size", d.vocab_size);
  h.embed_dim = j.value("embed_dim", d.embed_dim);
  h.lstm_hidden = j.value("lstm_hidden", d.lstm_hidden);
  h.kp_window = j.value("kp_window", d.kp_window);
  h.lambda_kp = j.value("lambda_kp", d.lambda_kp);
  h.mlp_hidden = j.value("mlp_hidden", d.mlp_hidden);
  h.match_len = j.value("match_len", d.match_len);
  h.cnn_filters = j.value("cnn_filters", d.cnn_filters);
  h.cnn_kernel = j.value("cnn_kernel", d.cnn_kernel);
  h.init_scale = j.value("init_scale", d.init_scale);
  h.disable_goal_tracking = j.value("disable_goal_tracking", d.disable_goal_tracking);
  h.disable_knowledge_head = j.value("disable_knowledge_head", d.disable_knowledge_head);
  h.disable_goal_head = j.value("disable_goal_head", d.disable_goal_head);
}

// ---------------------------------------------------------------------------
// Parameter blocks

struct Mlp {
  std::vector<Tensor> weights;  // [in × out] per layer
  std::vector<Tensor> biases;

  /// x is [n × in]; tanh between layers, linear output [n × out].
  Tensor operator()(const Tensor& x) const {
    Tensor h = x;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      h = linear(h, weights[l], biases[l]);
      if (l + 1 < weights.size()) h = tanh(h);
    }
    return h;
  }
};

struct ModelParams {
  Tensor embedding;       // [V × d]
  LstmWeights encoder;    // utterances, response, knowledge
  LstmWeights goal_lstm;  // over e^{g'}
  LstmWeights aggregate;  // over per-utterance matching features
  Mlp kp_mlp;             // (m+1) → 1
  Tensor cnn_context_filters, cnn_context_bias;
  Tensor cnn_knowledge_filters, cnn_knowledge_bias;
  Mlp context_mlp;    // h → 1
  Mlp alpha_mlp;      // F → 1
  Mlp knowledge_mlp;  // F → 1
  Mlp goal_mlp;       // 2h → 1

  /// Every learned tensor with a stable name, in serialization order.
  std::vector<NamedTensor> named() const {
    std::vector<NamedTensor> out;
    out.push_back({"embedding", embedding});
    auto lstm = [&](const std::string& p, const LstmWeights& w) {
      out.push_back({p + ".w_x", w.w_x});
      out.push_back({p + ".w_h", w.w_h});
      out.push_back({p + ".b", w.b});
    };
    auto mlp = [&](const std::string& p, const Mlp& m) {
      for (std::size_t l = 0; l < m.weights.size(); ++l) {
        out.push_back({p + "." + std::to_string(l) + ".w", m.weights[l]});
        out.push_back({p + "." + std::to_string(l) + ".b", m.biases[l]});
      }
    };
    lstm("encoder", encoder);
    lstm("goal_lstm", goal_lstm);
    lstm("aggregate", aggregate);
    mlp("kp_mlp", kp_mlp);
    out.push_back({"cnn_context.filters", cnn_context_filters});
    out.push_back({"cnn_context.bias", cnn_context_bias});
    out.push_back({"cnn_knowledge.filters", cnn_knowledge_filters});
    out.push_back({"cnn_knowledge.bias", cnn_knowledge_bias});
    mlp("context_mlp", context_mlp);
    mlp("alpha_mlp", alpha_mlp);
    mlp("knowledge_mlp", knowledge_mlp);
    mlp("goal_mlp", goal_mlp);
    return out;
  }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    for (auto& n : named()) out.push_back(n.tensor);
    return out;
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& t : named()) n += t.tensor.size();
    return n;
  }

  static ModelParams init(const Hyperparams& hp, std::uint64_t seed) {
    hp.validate();
    Rng rng(seed);
    auto uniform = [&](Shape shape) {
      std::vector<double> v(shape_size(shape));
      for (double& x : v) x = rng.uniform(-hp.init_scale, hp.init_scale);
      return Tensor(std::move(shape), std::move(v), true);
    };
    auto lstm = [&](std::size_t in, std::size_t h) {
      LstmWeights w{uniform({in, 4 * h}), uniform({h, 4 * h}), uniform({4 * h})};
      auto b = w.b.mutable_data();
      for (std::size_t j = h; j < 2 * h; ++j) b[j] = 1.0;
      return w;
    };
    auto mlp = [&](std::size_t in) {
      Mlp m;
      std::size_t prev = in;
      for (std::size_t h : hp.mlp_hidden) {
        m.weights.push_back(uniform({prev, h}));
        m.biases.push_back(uniform({h}));
        prev = h;
      }
      m.weights.push_back(uniform({prev, 1}));
      m.biases.push_back(uniform({1}));
      return m;
    };
    const std::size_t d = hp.embed_dim, h = hp.lstm_hidden, F = hp.feature_size(), k = hp.cnn_kernel;
    ModelParams p;
    p.embedding = uniform({hp.vocab_size, d});
    p.encoder = lstm(d, h);
    p.goal_lstm = lstm(d, h);
    p.aggregate = lstm(F, h);
    p.kp_mlp = mlp(hp.kp_window + 1);
    p.cnn_context_filters = uniform({hp.cnn_filters, 2, k, k});
    p.cnn_context_bias = uniform({hp.cnn_filters});
    p.cnn_knowledge_filters = uniform({hp.cnn_filters, 2, k, k});
    p.cnn_knowledge_bias = uniform({hp.cnn_filters});
    p.context_mlp = mlp(h);
    p.alpha_mlp = mlp(F);
    p.knowledge_mlp = mlp(F);
    p.goal_mlp = mlp(2 * h);
    return p;
  }

  /// Independent copy of all values (no gradients).
  ModelParams clone() const {
    ModelParams p = *this;
    auto copy = [](const Tensor& t) {
      return Tensor(t.shape(), std::vector<double>(t.data().begin(), t.data().end()), t.requires_grad());
    };
    p.embedding = copy(embedding);
    for (auto* w : {&p.encoder, &p.goal_lstm, &p.aggregate}) {
      w->w_x = copy(w->w_x);
      w->w_h = copy(w->w_h);
      w->b = copy(w->b);
    }
    for (auto* m : {&p.kp_mlp, &p.context_mlp, &p.alpha_mlp, &p.knowledge_mlp, &p.goal_mlp}) {
      for (auto& t : m->weights) t = copy(t);
      for (auto& t : m->biases) t = copy(t);
    }
    p.cnn_context_filters = copy(cnn_context_filters);
    p.cnn_context_bias = copy(cnn_context_bias);
    p.cnn_knowledge_filters = copy(cnn_knowledge_filters);
    p.cnn_knowledge_bias = copy(cnn_knowledge_bias);
    return p;
  }
};

// ---------------------------------------------------------------------------
// Inputs and outputs

/// One dialogue turn without its response; token lists hold real ids only.
struct TurnInput {
  std::vector<std::vector<TokenId>> utterances;
  std::vector<TokenId> goal;
  std::vector<std::size_t> goal_entity;
  std::vector<std::vector<TokenId>> triples;

  bool operator==(const TurnInput&) const = default;
};

inline TurnInput turn_input(const Batch& b, std::size_t row) {
  return {b.utterances(row), b.goal(row), b.goal_entities(row), b.triples(row)};
}

/// Candidate-independent part of the forward pass.
struct ContextEncoding {
  std::vector<Tensor> utterance_emb;     // [a_i × d]
  std::vector<Tensor> utterance_hidden;  // [a_i × h]
  Tensor goal_emb;                       // e^g [n × d]
  Tensor uncovered;                      // v' [n]
  Tensor goal_prime;                     // e^{g'} [n × d]
  Tensor kp_scores;                      // s^{k_j} [M]
  std::vector<Tensor> knowledge_emb;     // e^{k'_j} [b_j × d]
  std::vector<Tensor> knowledge_hidden;  // [b_j × h]
  Tensor goal_last;                      // [h]
};

struct HeadOutputs {
  Tensor s_cr, s_kr, s_gr, y_hat;  // each [1]
};

/// Plain-value diagnostics for one candidate.
struct TurnScores {
  double s_cr = 0, s_kr = 0, s_gr = 0, y_hat = 0;
  std::vector<double> kp_scores;
  std::vector<double> goal_coverage;  // v' per goal token
};

// ---------------------------------------------------------------------------

class KpnModel {
 public:
  KpnModel(Hyperparams hp, ModelParams params) : hp_(std::move(hp)), p_(std::move(params)) { hp_.validate(); }
  KpnModel(Hyperparams hp, std::uint64_t seed) : KpnModel(hp, ModelParams::init(hp, seed)) {}

  const Hyperparams& hyperparams() const { return hp_; }
  Hyperparams& mutable_hyperparams() { return hp_; }
  const ModelParams& params() const { return p_; }
  ModelParams& mutable_params() { return p_; }

  /// Embedding rows for ids; an empty sequence becomes one padding row.
  Tensor embed(const std::vector<TokenId>& ids) const {
    static const std::vector<TokenId> pad = {Vocabulary::kPad};
    return gather_rows(p_.embedding, ids.empty() ? pad : ids);
  }

  /// Returns (v', e^{g'}). Context tokens are all real utterance tokens.
  std::pair<Tensor, Tensor> track_goal(const Tensor& goal_emb, const std::vector<Tensor>& utterance_emb) const {
    const std::size_t n = goal_emb.dim(0);
    if (hp_.disable_goal_tracking) {
      return {Tensor(Shape{n}, std::vector<double>(n, 1.0)), goal_emb};
    }
    Tensor context = concat_rows(utterance_emb);
    Tensor v = relu(pool(cosine_matrix(goal_emb, context), 1, PoolKind::max));
    // The outer ReLU only absorbs rounding when a cosine lands a hair above 1.
    Tensor v_prime = relu(sub_from_one(v));
    return {v_prime, scale_rows(goal_emb, v_prime)};
  }

  /// s^{k_j} from cosines of mean vectors; `recent` holds the last m
  /// utterance embeddings, oldest first (fewer allowed).
  Tensor predict_knowledge(const Tensor& goal_prime, const std::vector<Tensor>& recent,
                           const std::vector<Tensor>& knowledge_emb) const {
    if (knowledge_emb.empty()) throw DomainError("predict_knowledge: no knowledge triples");
    const std::size_t m = hp_.kp_window, d = hp_.embed_dim;
    std::vector<Tensor> queries;
    queries.push_back(pool(goal_prime, 0, PoolKind::mean));
    const std::size_t missing = recent.size() >= m ? 0 : m - recent.size();
    for (std::size_t i = 0; i < missing; ++i) queries.push_back(Tensor::zeros({d}));
    for (std::size_t i = recent.size() - std::min(recent.size(), m); i < recent.size(); ++i) {
      queries.push_back(pool(recent[i], 0, PoolKind::mean));
    }
    std::vector<Tensor> keys;
    for (const auto& k : knowledge_emb) keys.push_back(pool(k, 0, PoolKind::mean));
    Tensor features = transpose(cosine_matrix(stack(queries), stack(keys)));  // [M × (m+1)]
    Tensor s = sigmoid(p_.kp_mlp(features));
    return reshape(s, {knowledge_emb.size()});
  }

  ContextEncoding encode_context(const TurnInput& turn) const {
    if (turn.utterances.empty()) throw DomainError("encode_context: no utterances");
    if (turn.goal.empty()) throw DomainError("track_goal: empty goal");
    if (turn.triples.empty()) throw DomainError("encode_context: no knowledge triples");
    ContextEncoding c;
    for (const auto& u : turn.utterances) {
      c.utterance_emb.push_back(embed(u));
      c.utterance_hidden.push_back(lstm_sequence(c.utterance_emb.back(), p_.encoder).hidden);
    }
    c.goal_emb = embed(turn.goal);
    std::tie(c.uncovered, c.goal_prime) = track_goal(c.goal_emb, c.utterance_emb);
    std::vector<Tensor> raw_knowledge;
    for (const auto& k : turn.triples) raw_knowledge.push_back(embed(k));
    c.kp_scores = predict_knowledge(c.goal_prime, c.utterance_emb, raw_knowledge);
    for (std::size_t j = 0; j < raw_knowledge.size(); ++j) {
      c.knowledge_emb.push_back(mul(raw_knowledge[j], element(c.kp_scores, j)));
      c.knowledge_hidden.push_back(lstm_sequence(c.knowledge_emb.back(), p_.encoder).hidden);
    }
    c.goal_last = lstm_sequence(c.goal_prime, p_.goal_lstm).last;
    return c;
  }

  /// Two-channel [2 × S × S] matching matrix: embedding cosines and hidden
  /// state cosines.
  Tensor matching_matrix(const Tensor& a_emb, const Tensor& a_hidden, const Tensor& b_emb,
                         const Tensor& b_hidden) const {
    const std::size_t S = hp_.match_len;
    auto crop = [S](const Tensor& t) { return t.dim(0) > S ? slice_rows(t, 0, S) : t; };
    return pad_stack({cosine_matrix(crop(a_emb), crop(b_emb)), cosine_matrix(crop(a_hidden), crop(b_hidden))}, S, S);
  }

  Tensor match_context(const ContextEncoding& c, const Tensor& r_emb, const Tensor& r_hidden) const {
    std::vector<Tensor> features;
    for (std::size_t i = 0; i < c.utterance_emb.size(); ++i) {
      Tensor mm = matching_matrix(c.utterance_emb[i], c.utterance_hidden[i], r_emb, r_hidden);
      features.push_back(conv2d_block(mm, p_.cnn_context_filters, p_.cnn_context_bias));
    }
    Tensor last = lstm_sequence(stack(features), p_.aggregate).last;
    return reshape(p_.context_mlp(reshape(last, {1, hp_.lstm_hidden})), {1});
  }

  Tensor match_knowledge(const ContextEncoding& c, const Tensor& r_emb, const Tensor& r_hidden) const {
    if (c.knowledge_emb.empty()) throw DomainError("match_knowledge: no knowledge triples");
    std::vector<Tensor> features;
    for (std::size_t j = 0; j < c.knowledge_emb.size(); ++j) {
      Tensor mm = matching_matrix(c.knowledge_emb[j], c.knowledge_hidden[j], r_emb, r_hidden);
      features.push_back(conv2d_block(mm, p_.cnn_knowledge_filters, p_.cnn_knowledge_bias));
    }
    Tensor vk = stack(features);  // [M × F]
    const std::size_t M = features.size();
    Tensor alpha = reshape(relu(p_.alpha_mlp(vk)), {M});
    Tensor w = reshape(softmax(alpha), {1, M});
    Tensor h2 = matmul(w, vk);  // [1 × F]
    return reshape(p_.knowledge_mlp(h2), {1});
  }

  Tensor match_goal(const ContextEncoding& c, const Tensor& r_last) const {
    Tensor joined = reshape(concat({c.goal_last, r_last}), {1, 2 * hp_.lstm_hidden});
    return reshape(p_.goal_mlp(joined), {1});
  }

  HeadOutputs score_candidate(const ContextEncoding& c, const std::vector<TokenId>& response) const {
    Tensor r_emb = embed(response);
    LstmOutput r = lstm_sequence(r_emb, p_.encoder);
    HeadOutputs out;
    out.s_cr = match_context(c, r_emb, r.hidden);
    out.s_kr = hp_.disable_knowledge_head ? Tensor::scalar(0.0) : match_knowledge(c, r_emb, r.hidden);
    out.s_gr = hp_.disable_goal_head ? Tensor::scalar(0.0) : match_goal(c, r.last);
    out.y_hat = scale(add(add(out.s_cr, out.s_kr), out.s_gr), 1.0 / 3.0);
    return out;
  }

  struct TurnForward {
    ContextEncoding context;
    std::vector<HeadOutputs> heads;

    Tensor logits() const {
      std::vector<Tensor> y;
      for (const auto& h : heads) y.push_back(h.y_hat);
      return concat(y);
    }
  };

  TurnForward forward(const TurnInput& turn, const std::vector<std::vector<TokenId>>& responses) const {
    TurnForward f{encode_context(turn), {}};
    for (const auto& r : responses) f.heads.push_back(score_candidate(f.context, r));
    return f;
  }

  static TurnScores diagnostics(const ContextEncoding& c, const HeadOutputs& h) {
    TurnScores s;
    s.s_cr = h.s_cr.item();
    s.s_kr = h.s_kr.item();
    s.s_gr = h.s_gr.item();
    s.y_hat = h.y_hat.item();
    s.kp_scores.assign(c.kp_scores.data().begin(), c.kp_scores.data().end());
    s.goal_coverage.assign(c.uncovered.data().begin(), c.uncovered.data().end());
    return s;
  }

  /// Inference over every row of a batch; consecutive rows with the same
  /// turn share one context encoding.
  std::vector<TurnScores> score(const Batch& batch) const {
    NoGradGuard guard;
    std::vector<TurnScores> out;
    std::size_t r = 0;
    while (r < batch.rows) {
      TurnInput turn = turn_input(batch, r);
      std::vector<std::vector<TokenId>> responses;
      std::size_t end = r;
      while (end < batch.rows && (end == r || turn_input(batch, end) == turn)) responses.push_back(batch.response(end++));
      auto f = forward(turn, responses);
      for (const auto& h : f.heads) out.push_back(diagnostics(f.context, h));
      r = end;
    }
    return out;
  }

  /// Scores free-text candidates for one turn without recording gradients.
  std::vector<TurnScores> score_texts(const TurnInput& turn, const std::vector<std::vector<TokenId>>& responses) const {
    NoGradGuard guard;
    auto f = forward(turn, responses);
    std::vector<TurnScores> out;
    for (const auto& h : f.heads) out.push_back(diagnostics(f.context, h));
    return out;
  }

 private:
  Hyperparams hp_;
  ModelParams p_;
};

// ---------------------------------------------------------------------------
// Losses

/// Mean BCE of σ(ŷ) against the candidate labels.
inline Tensor rs_loss(const Tensor& y_hat, std::span<const double> labels) {
  for (double y : labels)
    if (y != 0.0 && y != 1.0) throw DomainError("rs_loss: label " + std::to_string(y) + " is not 0 or 1");
  return bce_with_logits(y_hat, labels);
}

/// Mean BCE of the KP scores over real triples.
inline Tensor kp_loss(const Tensor& kp_scores, std::span<const double> weak_labels,
                      std::span<const std::uint8_t> mask) {
  return binary_cross_entropy(kp_scores, weak_labels, mask);
}

}  // namespace kpn
