#pragma once

// Joint training of response selection and knowledge prediction with
// validation-MRR model selection, early stopping and a JSONL metrics log.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kpn/checkpoint.hpp"
#include "kpn/corpus.hpp"
#include "kpn/errors.hpp"
#include "kpn/metrics.hpp"
#include "kpn/model.hpp"
#include "kpn/optim.hpp"
#include "kpn/rng.hpp"

namespace kpn {

inline void to_json(nlohmann::json& j, const BatchLimits& l) {
  j = {{"max_utterances", l.max_utterances}, {"max_tokens", l.max_tokens}, {"max_triples", l.max_triples}};
}

inline void from_json(const nlohmann::json& j, BatchLimits& l) {
  BatchLimits d;
  l.max_utterances = j.value("max_utterances", d.max_utterances);
  l.max_tokens = j.value("max_tokens", d.max_tokens);
  l.max_triples = j.value("max_triples", d.max_triples);
}

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 8;  // contexts per update, each with all of its candidates
  double lr = 1e-3;
  double lambda_kp = 0.3;
  std::uint64_t seed = 1;
  std::size_t patience = 5;
  std::string checkpoint_dir;  // empty: keep the best model in memory only
  std::string metrics_log;     // empty: no log file
  bool disable_kp_loss = false;
  bool disable_goal_tracking = false;
  bool disable_knowledge_head = false;
  bool disable_goal_head = false;
  /// Keep the embedding table at its initial (or pretrained) values. Random
  /// frozen vectors keep exact token matches distinct in the cosine channel;
  /// tuned on a small corpus they drift together and the matcher overfits.
  bool freeze_embeddings = true;
  double clip_norm = 5.0;
  BatchLimits limits;
  Hyperparams model;  // vocab_size, lambda and ablation flags are filled in by train()

  void validate() const {
    if (epochs < 1) throw DomainError("train config: epochs must be at least 1");
    if (batch_size < 1) throw DomainError("train config: batch_size must be at least 1");
    if (!(lambda_kp >= 0.0)) throw DomainError("train config: lambda must be non-negative");
    if (!(lr >= 0.0)) throw DomainError("train config: lr must be non-negative");
    if (patience < 1) throw DomainError("train config: patience must be at least 1");
    if (!(clip_norm > 0.0)) throw DomainError("train config: clip_norm must be positive");
  }

  /// Lambda actually applied to the KP loss.
  double effective_lambda() const { return disable_kp_loss ? 0.0 : lambda_kp; }

  Hyperparams hyperparams(std::size_t vocab_size) const {
    Hyperparams hp = model;
    hp.vocab_size = vocab_size;
    hp.lambda_kp = effective_lambda();
    hp.disable_goal_tracking = disable_goal_tracking;
    hp.disable_knowledge_head = disable_knowledge_head;
    hp.disable_goal_head = disable_goal_head;
    return hp;
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"lr", c.lr},
       {"lambda", c.lambda_kp},
       {"seed", c.seed},
       {"patience", c.patience},
       {"checkpoint_dir", c.checkpoint_dir},
       {"metrics_log", c.metrics_log},
       {"disable_kp_loss", c.disable_kp_loss},
       {"disable_goal_tracking", c.disable_goal_tracking},
       {"disable_knowledge_head", c.disable_knowledge_head},
       {"disable_goal_head", c.disable_goal_head},
       {"freeze_embeddings", c.freeze_embeddings},
       {"clip_norm", c.clip_norm},
       {"limits", c.limits},
       {"model", c.model}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (!j.is_object()) throw SchemaError("train config: expected a JSON object");
  static const std::set<std::string> known = {"epochs", "batch_size", "lr", "lambda", "seed", "patience",
                                              "checkpoint_dir", "metrics_log", "disable_kp_loss",
                                              "disable_goal_tracking", "disable_knowledge_head",
                                              "disable_goal_head", "freeze_embeddings", "clip_norm", "limits", "model"};
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw SchemaError("train config: unknown key \"" + k + "\"");
  try {
    TrainConfig d;
    c.epochs = j.value("epochs", d.epochs);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.lr = j.value("lr", d.lr);
    c.lambda_kp = j.value("lambda", d.lambda_kp);
    c.seed = j.value("seed", d.seed);
    c.patience = j.value("patience", d.patience);
    c.checkpoint_dir = j.value("checkpoint_dir", d.checkpoint_dir);
    c.metrics_log = j.value("metrics_log", d.metrics_log);
    c.disable_kp_loss = j.value("disable_kp_loss", d.disable_kp_loss);
    c.disable_goal_tracking = j.value("disable_goal_tracking", d.disable_goal_tracking);
    c.disable_knowledge_head = j.value("disable_knowledge_head", d.disable_knowledge_head);
    c.disable_goal_head = j.value("disable_goal_head", d.disable_goal_head);
    c.freeze_embeddings = j.value("freeze_embeddings", d.freeze_embeddings);
    c.clip_norm = j.value("clip_norm", d.clip_norm);
    c.limits = j.value("limits", d.limits);
    c.model = j.value("model", d.model);
  } catch (const nlohmann::json::type_error& e) {
    throw SchemaError(std::string("train config: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Turns

/// One context with all of its candidates, ready for the model.
struct TrainTurn {
  TurnInput input;
  std::vector<std::string> response_texts;
  std::vector<std::vector<TokenId>> responses;
  std::vector<double> labels;
  std::vector<double> weak_labels;  // one per kept triple; empty when absent
  std::vector<KnowledgeTriple> knowledge;
  std::vector<std::string> goal_entities;

  bool has_weak_labels() const { return !weak_labels.empty(); }

  /// Index of the first positive candidate, if any.
  std::optional<std::size_t> truth() const {
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == 1.0) return i;
    return std::nullopt;
  }
};

/// Groups samples into turns (see group_turns) and encodes each one.
inline std::vector<TrainTurn> make_turns(const std::vector<DialogueSample>& samples, const BatchLimits& limits) {
  std::vector<TrainTurn> out;
  for (const auto& group : group_turns(samples)) {
    std::vector<const DialogueSample*> ptrs;
    for (std::size_t i : group) ptrs.push_back(&samples[i]);
    Batch b = make_batch(ptrs, limits);
    TrainTurn t;
    t.input = turn_input(b, 0);
    for (std::size_t r = 0; r < b.rows; ++r) {
      t.responses.push_back(b.response(r));
      t.response_texts.push_back(ptrs[r]->response_text);
      t.labels.push_back(static_cast<double>(b.labels[r]));
    }
    if (b.has_weak_labels[0]) {
      for (std::size_t m = 0; m < b.M(); ++m)
        if (b.triple_mask[m]) t.weak_labels.push_back(b.weak_labels[m]);
    }
    const auto& first = *ptrs.front();
    t.knowledge.assign(first.knowledge.begin(),
                       first.knowledge.begin() + static_cast<std::ptrdiff_t>(std::min(first.knowledge.size(), limits.max_triples)));
    t.goal_entities = first.goal.entities;
    out.push_back(std::move(t));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss

struct LossParts {
  Tensor total, kp, rs;  // kp is undefined when not computed
};

/// λ·L_kp + L_rs; with λ = 0 this is L_rs itself.
inline Tensor combine_losses(const Tensor& l_kp, const Tensor& l_rs, double lambda) {
  if (!(lambda >= 0.0)) throw DomainError("joint_loss: lambda must be non-negative");
  if (lambda == 0.0) return l_rs;
  return add(scale(l_kp, lambda), l_rs);
}

inline LossParts turn_loss(const KpnModel& model, const TrainTurn& turn, double lambda) {
  auto f = model.forward(turn.input, turn.responses);
  LossParts p;
  p.rs = rs_loss(f.logits(), turn.labels);
  if (turn.has_weak_labels()) {
    std::vector<std::uint8_t> mask(turn.weak_labels.size(), 1);
    p.kp = kp_loss(f.context.kp_scores, turn.weak_labels, mask);
  } else if (lambda > 0.0) {
    throw UsageError("joint_loss: weak labels are required when lambda > 0 (run the labeler first)");
  }
  p.total = p.kp.defined() ? combine_losses(p.kp, p.rs, lambda) : p.rs;
  return p;
}

/// Mean of the per-turn joint losses over a batch of turns.
inline LossParts joint_loss(const KpnModel& model, std::span<const TrainTurn> turns, double lambda) {
  if (turns.empty()) throw DomainError("joint_loss: empty batch");
  LossParts sum;
  for (const auto& t : turns) {
    LossParts p = turn_loss(model, t, lambda);
    sum.total = sum.total.defined() ? add(sum.total, p.total) : p.total;
    sum.rs = sum.rs.defined() ? add(sum.rs, p.rs) : p.rs;
    if (p.kp.defined()) sum.kp = sum.kp.defined() ? add(sum.kp, p.kp) : p.kp;
  }
  const double k = 1.0 / static_cast<double>(turns.size());
  if (turns.size() > 1) {
    sum.total = scale(sum.total, k);
    sum.rs = scale(sum.rs, k);
    if (sum.kp.defined()) sum.kp = scale(sum.kp, k);
  }
  return sum;
}

/// Names the first non-finite tensor: a parameter if any is corrupt,
/// otherwise the earliest op on the loss tape.
inline std::string describe_non_finite(const KpnModel& model, const Tensor& loss) {
  auto bad = [](std::span<const double> v) {
    for (double x : v)
      if (!std::isfinite(x)) return true;
    return false;
  };
  for (const auto& nt : model.params().named())
    if (bad(nt.tensor.data())) return "parameter " + nt.name;
  if (loss.defined() && loss.node()->tape_id) {
    Tape tape = Tape::record(loss);
    for (std::size_t i = 0; i < tape.nodes.size(); ++i)
      if (bad(tape.nodes[i]->value)) {
        return std::string("op ") + tape.nodes[i]->op + " (tape position " + std::to_string(i) + ", shape " +
               shape_str(tape.nodes[i]->shape) + ")";
      }
  }
  return "input data";
}

// ---------------------------------------------------------------------------
// Validation

/// Scores every candidate of every turn without gradients. `kp_hits`, if
/// given, counts turns whose top KP score falls on a weakly positive triple
/// (turns without weak labels are skipped).
inline std::vector<RankedTurn> rank_turns(const KpnModel& model, const std::vector<TrainTurn>& turns,
                                          std::pair<std::size_t, std::size_t>* kp_hits = nullptr) {
  NoGradGuard guard;
  std::vector<RankedTurn> out;
  for (const auto& t : turns) {
    auto truth = t.truth();
    if (!truth) continue;
    auto f = model.forward(t.input, t.responses);
    RankedTurn r;
    r.candidates = t.response_texts;
    for (const auto& h : f.heads) r.scores.push_back(h.y_hat.item());
    r.truth = *truth;
    r.knowledge = t.knowledge;
    r.goal_entities = t.goal_entities;
    out.push_back(std::move(r));
    if (kp_hits && t.has_weak_labels()) {
      const auto kp = f.context.kp_scores.data();
      const auto top = static_cast<std::size_t>(std::max_element(kp.begin(), kp.end()) - kp.begin());
      kp_hits->first += t.weak_labels[top] == 1.0;
      ++kp_hits->second;
    }
  }
  return out;
}

struct ValidationScore {
  double mrr = 0, hits1 = 0;
  std::optional<double> kp_accuracy;  // top KP score on a weakly positive triple
};

inline ValidationScore validate_model(const KpnModel& model, const std::vector<TrainTurn>& turns) {
  std::pair<std::size_t, std::size_t> kp{0, 0};
  auto ranked = rank_turns(model, turns, &kp);
  ValidationScore v{mrr(ranked), hits_at_k(ranked, 1), std::nullopt};
  if (kp.second) v.kp_accuracy = static_cast<double>(kp.first) / static_cast<double>(kp.second);
  return v;
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0, loss_kp = 0, loss_rs = 0;
  bool has_kp = false;
  double valid_mrr = 0, valid_hits1 = 0;
  std::optional<double> valid_kp_accuracy;
  double seconds = 0;  // wall time, not logged

  nlohmann::json to_json() const {
    nlohmann::json j = {{"epoch", epoch}, {"L", loss}, {"L_rs", loss_rs}, {"valid_mrr", valid_mrr},
                        {"valid_hits@1", valid_hits1}};
    if (has_kp) j["L_kp"] = loss_kp;
    if (valid_kp_accuracy) j["valid_kp_acc"] = *valid_kp_accuracy;
    return j;
  }
};

struct TrainResult {
  Hyperparams hyperparams;
  ModelParams best_params;
  std::size_t best_epoch = 0;
  double best_mrr = 0;
  std::vector<EpochRecord> history;
  bool stopped_early = false;
  std::string checkpoint_path;  // empty if no checkpoint_dir
};

inline std::string epoch_log_line(const EpochRecord& r) { return r.to_json().dump(); }

/// Trains on `train` (positives followed by their negatives), selecting the
/// epoch with the best validation MRR. `on_epoch` sees each record as it is
/// produced.
inline TrainResult train(const TrainConfig& cfg, const std::vector<DialogueSample>& train_samples,
                         const std::vector<DialogueSample>& valid_samples, const Vocabulary& vocab,
                         const std::function<void(const EpochRecord&)>& on_epoch = {},
                         const std::map<TokenId, std::vector<double>>* pretrained = nullptr) {
  cfg.validate();
  const double lambda = cfg.effective_lambda();
  auto train_turns = make_turns(train_samples, cfg.limits);
  auto valid_turns = make_turns(valid_samples, cfg.limits);
  if (train_turns.empty()) throw DomainError("train: no training samples");
  if (valid_turns.empty()) throw DomainError("train: no validation samples");
  if (lambda > 0.0) {
    for (const auto& t : train_turns)
      if (!t.has_weak_labels()) throw UsageError("train: training samples lack weak labels but lambda > 0");
  }

  const Hyperparams hp = cfg.hyperparams(vocab.size());
  KpnModel model(hp, mix_seed(cfg.seed, 0x1417));
  if (pretrained) {
    auto table = model.mutable_params().embedding.mutable_data();
    for (const auto& [id, v] : *pretrained) {
      if (v.size() != hp.embed_dim) throw DimensionError("train: pretrained vector size differs from embed_dim");
      std::copy(v.begin(), v.end(), table.begin() + static_cast<std::ptrdiff_t>(id) * static_cast<std::ptrdiff_t>(hp.embed_dim));
    }
  }
  std::vector<Tensor> params;
  for (const auto& nt : model.params().named())
    if (!(cfg.freeze_embeddings && nt.name == "embedding")) params.push_back(nt.tensor);
  Adam opt(params, AdamConfig{cfg.lr});

  std::ofstream log;
  if (!cfg.metrics_log.empty()) {
    log.open(cfg.metrics_log, std::ios::binary | std::ios::trunc);
    if (!log) throw IoError("cannot write metrics log " + cfg.metrics_log);
  }
  TrainResult result;
  result.hyperparams = hp;
  result.best_params = model.params().clone();
  if (!cfg.checkpoint_dir.empty()) {
    std::filesystem::create_directories(cfg.checkpoint_dir);
    result.checkpoint_path = (std::filesystem::path(cfg.checkpoint_dir) / "best.ckpt").string();
  }

  std::vector<std::size_t> order(train_turns.size());
  std::optional<double> best;
  std::size_t stale = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng(mix_seed(cfg.seed, 0xE90C + epoch));
    shuffle_rng.shuffle(order);

    EpochRecord rec;
    rec.epoch = epoch;
    std::size_t kp_turns = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      std::vector<TrainTurn> batch;
      for (std::size_t i = b; i < std::min(order.size(), b + cfg.batch_size); ++i) batch.push_back(train_turns[order[i]]);
      opt.zero_grad();
      LossParts loss = joint_loss(model, batch, lambda);
      if (!std::isfinite(loss.total.item())) {
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) + "; first offending tensor: " +
                           describe_non_finite(model, loss.total));
      }
      backward(loss.total);
      clip_grad_norm(params, cfg.clip_norm);
      opt.step();
      const double n = static_cast<double>(batch.size());
      rec.loss += loss.total.item() * n;
      rec.loss_rs += loss.rs.item() * n;
      if (loss.kp.defined()) {
        rec.loss_kp += loss.kp.item() * n;
        kp_turns += batch.size();
      }
    }
    const double n = static_cast<double>(train_turns.size());
    rec.loss /= n;
    rec.loss_rs /= n;
    rec.has_kp = !cfg.disable_kp_loss && kp_turns > 0;
    if (kp_turns) rec.loss_kp /= static_cast<double>(kp_turns);

    const auto v = validate_model(model, valid_turns);
    rec.valid_mrr = v.mrr;
    rec.valid_hits1 = v.hits1;
    rec.valid_kp_accuracy = v.kp_accuracy;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.history.push_back(rec);
    if (log) {
      log << epoch_log_line(rec) << '\n';
      log.flush();
    }
    if (on_epoch) on_epoch(rec);

    if (!best || v.mrr > *best) {
      best = v.mrr;
      stale = 0;
      result.best_epoch = epoch;
      result.best_mrr = v.mrr;
      result.best_params = model.params().clone();
      if (!result.checkpoint_path.empty()) {
        save_checkpoint(result.checkpoint_path, hp, vocab, result.best_params,
                        {{"epoch", epoch}, {"valid_mrr", v.mrr}, {"valid_hits@1", v.hits1}, {"limits", cfg.limits}});
      }
    } else if (++stale >= cfg.patience) {
      result.stopped_early = epoch < cfg.epochs;
      break;
    }
  }
  return result;
}

}  // namespace kpn
