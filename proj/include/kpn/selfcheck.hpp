#pragma once

// Finite-difference gradient suite over every tensor op and the end-to-end
// joint loss of a tiny model.

#include <chrono>
#include <string>
#include <vector>

#include "kpn/corpus.hpp"
#include "kpn/gradcheck.hpp"
#include "kpn/model.hpp"
#include "kpn/rng.hpp"
#include "kpn/tensor.hpp"
#include "kpn/trainer.hpp"

namespace kpn {

struct GradCheckCase {
  std::string name;
  GradCheckResult result;
};

namespace selfcheck {

inline Tensor random_param(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v), true);
}

inline Tensor random_const(Rng& rng, Shape shape) {
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor(std::move(shape), std::move(v));
}

struct TinyData {
  std::vector<TrainTurn> turns;
  std::size_t vocab_size = 0;
};

/// Two turns over a handful of tokens, with weak labels on both.
inline TinyData tiny_turns() {
  auto sample = [](std::vector<std::string> ctx, std::vector<std::string> goal, std::string resp, int label) {
    DialogueSample s;
    s.context_text = std::move(ctx);
    s.goal.entities = std::move(goal);
    s.knowledge = {{"alpha", "likes", "beta", {}, 0}, {"gamma", "is", "delta eps", {}, 1}, {"alpha", "is", "zeta", {}, 0}};
    s.response_text = std::move(resp);
    s.label = label;
    return s;
  };
  std::vector<DialogueSample> samples = {
      sample({"hi there", "alpha likes beta"}, {"alpha", "gamma"}, "gamma is delta eps", 1),
      sample({"hi there", "alpha likes beta"}, {"alpha", "gamma"}, "zeta there", 0),
      sample({"alpha is zeta"}, {"gamma"}, "delta eps gamma", 1),
      sample({"alpha is zeta"}, {"gamma"}, "beta", 0),
      sample({"alpha is zeta"}, {"gamma"}, "hi beta alpha", 0),
  };
  Vocabulary vocab = build_vocabulary(samples);
  encode(samples, vocab);
  return {make_turns(samples, BatchLimits{4, 6, 4}), vocab.size()};
}

}  // namespace selfcheck

/// Central differences (h = 1e-5) against backward() for every op and for
/// λ·L_kp + L_rs of a tiny seeded model.
inline std::vector<GradCheckCase> gradient_suite(std::uint64_t seed) {
  using namespace selfcheck;
  Rng rng(seed);
  std::vector<GradCheckCase> out;
  auto run = [&](const std::string& name, const std::function<Tensor()>& f, std::vector<NamedTensor> wrt) {
    out.push_back({name, check_gradients(f, std::move(wrt))});
  };

  {
    auto a = random_param(rng, {3, 4}), b = random_param(rng, {4, 2});
    auto c = random_const(rng, {3, 2});
    run("matmul", [&] { return sum(mul(matmul(a, b), c)); }, {{"a", a}, {"b", b}});
  }
  {
    auto x = random_param(rng, {3, 4}), w = random_param(rng, {4, 5}), b = random_param(rng, {5});
    run("linear+tanh", [&] { return sum(tanh(linear(x, w, b))); }, {{"x", x}, {"w", w}, {"b", b}});
  }
  {
    auto a = random_param(rng, {2, 3}), b = random_param(rng, {2, 3}), s = random_param(rng, {1});
    run("elementwise+transpose",
        [&] {
          auto y = add(mul(sigmoid(a), relu(b)), sub_from_one(tanh(transpose(transpose(a)))));
          return sum(mul(sub(y, s), scale(b, 0.7)));
        },
        {{"a", a}, {"b", b}, {"s", s}});
  }
  {
    auto t = random_param(rng, {3, 4, 2});
    run("max_pool", [&] { return sum(tanh(pool(t, 1, PoolKind::max))); }, {{"t", t}});
    run("mean_pool", [&] { return sum(tanh(pool(t, 2, PoolKind::mean))); }, {{"t", t}});
  }
  {
    auto a = random_param(rng, {5}), b = random_param(rng, {5});
    run("cosine", [&] { return cosine(a, b); }, {{"a", a}, {"b", b}});
    auto A = random_param(rng, {3, 4}), B = random_param(rng, {2, 4});
    auto w = random_const(rng, {3, 2});
    run("cosine_matrix", [&] { return sum(mul(cosine_matrix(A, B), w)); }, {{"A", A}, {"B", B}});
  }
  {
    auto v = random_param(rng, {6});
    auto w = random_const(rng, {6});
    run("softmax", [&] { return sum(mul(softmax(v), w)); }, {{"v", v}});
  }
  {
    auto a = random_param(rng, {3, 2}), b = random_param(rng, {2, 2}), v = random_param(rng, {3});
    auto w = random_const(rng, {13});
    run("structural",
        [&] {
          auto rows = concat_rows({a, b});
          auto parts = concat({rows, element(scale_rows(a, v), 3), row(scale_rows(a, v), 1)});
          auto st = stack({slice_rows(rows, 1, 3), reshape(b, {2, 2})});
          return add(sum(mul(tanh(parts), w)), sum(tanh(st)));
        },
        {{"a", a}, {"b", b}, {"v", v}});
  }
  {
    auto table = random_param(rng, {6, 3});
    std::vector<std::int32_t> ids = {2, 0, 5, 2};
    auto other = random_param(rng, {2, 3});
    run("gather_rows+pad_stack",
        [&] {
          auto m = cosine_matrix(gather_rows(table, ids), other);
          return sum(tanh(pad_stack({m, transpose(m)}, 3, 5)));
        },
        {{"table", table}, {"other", other}});
  }
  {
    // Data in the top-left corner only, as produced by pad_stack.
    auto m1 = random_param(rng, {4, 3}), m2 = random_param(rng, {4, 3});
    auto k = random_param(rng, {8, 2, 3, 3}, -0.5, 0.5);
    auto b = random_param(rng, {8}, -0.1, 0.1);
    auto w = random_const(rng, {conv_block_output_size(8, 7, 6, 3)});
    run("conv2d_block", [&] { return sum(mul(conv2d_block(pad_stack({m1, m2}, 7, 6), k, b), w)); },
        {{"m1", m1}, {"m2", m2}, {"k", k}, {"b", b}});
  }
  {
    auto x = random_param(rng, {4, 3});
    LstmWeights p{random_param(rng, {3, 8}, -0.5, 0.5), random_param(rng, {2, 8}, -0.5, 0.5),
                  random_param(rng, {8}, -0.5, 0.5)};
    auto w = random_const(rng, {4, 2});
    run("lstm_sequence", [&] { return sum(mul(lstm_sequence(x, p).hidden, w)); },
        {{"x", x}, {"w_x", p.w_x}, {"w_h", p.w_h}, {"b", p.b}});
  }
  {
    auto z = random_param(rng, {5}, -3, 3);
    std::vector<double> y = {1, 0, 0, 1, 1};
    std::vector<std::uint8_t> mask = {1, 1, 0, 1, 1};
    run("bce_with_logits", [&] { return bce_with_logits(z, y); }, {{"z", z}});
    run("binary_cross_entropy", [&] { return binary_cross_entropy(sigmoid(z), y, mask); }, {{"z", z}});
  }
  {
    const auto tiny = tiny_turns();
    Hyperparams hp;
    hp.vocab_size = tiny.vocab_size;
    hp.embed_dim = 4;
    hp.lstm_hidden = 3;
    hp.mlp_hidden = {3};
    hp.match_len = 5;
    hp.cnn_filters = 2;
    hp.init_scale = 0.5;
    KpnModel model(hp, mix_seed(seed, 77));
    run("joint_loss", [&] { return joint_loss(model, tiny.turns, 0.3).total; }, model.params().named());
  }
  return out;
}

}  // namespace kpn
