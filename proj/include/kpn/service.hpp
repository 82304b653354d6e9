#pragma once

// Interactive goal-driven chat over a trained model: in-memory sessions,
// BM25 candidates from the response pool, and a JSON HTTP API.
//
//   POST   /v1/sessions                {goal:[...], knowledge:[[s,p,o]...]}
//   POST   /v1/sessions/{id}/messages  {text}
//   GET    /v1/sessions/{id}
//   DELETE /v1/sessions/{id}           ends the session (JSONL dump if configured)
//   POST   /v1/rerank                  {context, goal, knowledge, candidates}
//   GET    /v1/health

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "kpn/checkpoint.hpp"
#include "kpn/corpus.hpp"
#include "kpn/errors.hpp"
#include "kpn/evaluate.hpp"
#include "kpn/model.hpp"
#include "kpn/retriever.hpp"
#include "kpn/trainer.hpp"
#include "kpn/weaklabel.hpp"

namespace kpn {

/// An error carrying the HTTP status it maps to.
class HttpError : public Error {
 public:
  HttpError(int status, const std::string& msg) : Error(msg), status_(status) {}
  int status() const { return status_; }

 private:
  int status_;
};

struct HeadScores {
  double s_cr = 0, s_kr = 0, s_gr = 0, y_hat = 0;
};

struct TurnLog {
  std::string user;
  std::string response;
  std::vector<double> kp_scores;
  std::vector<std::pair<std::string, double>> coverage;  // entity → covered fraction
  HeadScores head_scores;
  std::size_t candidates_considered = 0;

  nlohmann::json to_json() const {
    nlohmann::json cov = nlohmann::json::object();
    for (const auto& [e, c] : coverage) cov[e] = c;
    return {{"user", user},
            {"response", response},
            {"kp_scores", kp_scores},
            {"coverage", cov},
            {"head_scores",
             {{"s_cr", head_scores.s_cr}, {"s_kr", head_scores.s_kr}, {"s_gr", head_scores.s_gr}, {"y_hat", head_scores.y_hat}}},
            {"candidates_considered", candidates_considered}};
  }
};

struct Session {
  std::string id;
  std::vector<std::string> goal;
  std::vector<KnowledgeTriple> knowledge;
  std::vector<std::pair<std::string, std::string>> transcript;  // (speaker, text)
  std::vector<TurnLog> turns;
  std::mutex mutex;

  std::vector<std::string> context() const {
    std::vector<std::string> out;
    for (const auto& [_, text] : transcript) out.push_back(text);
    return out;
  }
};

struct ServiceOptions {
  std::size_t candidates = 50;
  std::uint64_t seed = 1;
  std::string session_dump_dir;  // empty: no dumps
  BatchLimits limits;
};

/// Loaded model plus its vocabulary; shared read-only between sessions.
struct LoadedModel {
  KpnModel model;
  Vocabulary vocab;
  BatchLimits limits;
};

inline std::shared_ptr<const LoadedModel> load_model(const std::string& checkpoint_path) {
  Checkpoint c = load_checkpoint(checkpoint_path);
  BatchLimits limits = c.extra.value("limits", BatchLimits{});
  return std::make_shared<const LoadedModel>(LoadedModel{KpnModel(c.hyperparams, std::move(c.params)), std::move(c.vocab), limits});
}

/// Pool from a JSONL corpus (positive responses) or a saved BM25 index.
inline InvertedIndex load_pool(const std::string& path) {
  if (path.size() >= 6 && path.substr(path.size() - 6) == ".jsonl") {
    std::vector<std::string> texts;
    for (const auto& s : read_jsonl(path))
      if (s.label == 1) texts.push_back(s.response_text);
    return build_index(texts);
  }
  return InvertedIndex::load(path);
}

class ChatService {
 public:
  ChatService(std::shared_ptr<const LoadedModel> model, std::shared_ptr<const InvertedIndex> pool, ServiceOptions opt = {})
      : model_(std::move(model)), pool_(std::move(pool)), opt_(std::move(opt)) {}

  bool ready() const { return model_ && pool_; }

  /// Returns the new id and the initial coverage (all zero).
  nlohmann::json create_session(const std::vector<std::string>& goal, const std::vector<KnowledgeTriple>& knowledge) {
    if (goal.empty()) throw HttpError(400, "goal must contain at least one entity");
    for (const auto& g : goal)
      if (tokenize(g).empty()) throw HttpError(400, "goal entity \"" + g + "\" contains no tokens");
    if (knowledge.empty()) throw HttpError(400, "knowledge must contain at least one triple");
    auto s = std::make_shared<Session>();
    s->goal = goal;
    s->knowledge = knowledge;
    {
      std::unique_lock lock(store_mutex_);
      s->id = make_id();
      sessions_[s->id] = s;
    }
    nlohmann::json cov = nlohmann::json::object();
    for (const auto& g : goal) cov[g] = 0.0;
    return {{"session_id", s->id}, {"coverage", cov}};
  }

  nlohmann::json post_message(const std::string& id, const std::string& text) {
    auto s = find(id);
    if (tokenize(text).empty()) throw HttpError(400, "message text contains no tokens");
    if (!ready()) throw HttpError(503, "model not loaded");
    std::lock_guard lock(s->mutex);
    s->transcript.emplace_back("user", text);
    DialogueSample sample = as_sample(*s);
    auto cands = pool_->retrieve(practical_query(sample), opt_.candidates, {}, mix_seed(opt_.seed, s->turns.size()));
    auto scores = score_candidates(model_->model, model_->vocab, model_->limits, sample, cands);
    std::size_t best = 0;
    for (std::size_t i = 1; i < scores.size(); ++i)
      if (scores[i].y_hat > scores[best].y_hat) best = i;
    TurnLog log;
    log.user = text;
    log.response = cands[best];
    log.kp_scores = scores[best].kp_scores;
    log.coverage = coverage(sample, scores[best].goal_coverage);
    log.head_scores = {scores[best].s_cr, scores[best].s_kr, scores[best].s_gr, scores[best].y_hat};
    log.candidates_considered = cands.size();
    s->transcript.emplace_back("bot", log.response);
    s->turns.push_back(log);
    return log.to_json();
  }

  nlohmann::json get_state(const std::string& id) const {
    auto s = find(id);
    std::lock_guard lock(s->mutex);
    return state_json(*s);
  }

  /// Removes the session, writing its transcript if a dump directory is set.
  void end_session(const std::string& id) {
    std::shared_ptr<Session> s;
    {
      std::unique_lock lock(store_mutex_);
      auto it = sessions_.find(id);
      if (it == sessions_.end()) throw HttpError(404, "unknown session " + id);
      s = it->second;
      sessions_.erase(it);
    }
    if (opt_.session_dump_dir.empty()) return;
    std::lock_guard lock(s->mutex);
    std::filesystem::create_directories(opt_.session_dump_dir);
    const auto path = std::filesystem::path(opt_.session_dump_dir) / (id + ".jsonl");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write session dump " + path.string());
    for (const auto& t : s->turns) out << t.to_json().dump() << '\n';
  }

  /// Scores caller-supplied candidates for a caller-supplied turn.
  nlohmann::json rerank(const DialogueSample& sample, const std::vector<std::string>& candidates) const {
    if (!ready()) throw HttpError(503, "model not loaded");
    if (candidates.empty()) throw HttpError(400, "candidates must not be empty");
    auto scores = score_candidates(model_->model, model_->vocab, model_->limits, sample, candidates);
    nlohmann::json out = nlohmann::json::array();
    for (std::size_t i = 0; i < scores.size(); ++i) {
      out.push_back({{"candidate", candidates[i]},
                     {"s_cr", scores[i].s_cr},
                     {"s_kr", scores[i].s_kr},
                     {"s_gr", scores[i].s_gr},
                     {"y_hat", scores[i].y_hat}});
    }
    return {{"scores", out}};
  }

  std::size_t session_count() const {
    std::shared_lock lock(store_mutex_);
    return sessions_.size();
  }

 private:
  std::shared_ptr<Session> find(const std::string& id) const {
    std::shared_lock lock(store_mutex_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw HttpError(404, "unknown session " + id);
    return it->second;
  }

  std::string make_id() {
    std::ostringstream s;
    s << "s" << std::hex << std::setw(12) << std::setfill('0')
      << (mix_seed(opt_.seed, ++counter_) & 0xFFFFFFFFFFFFULL);
    return s.str();
  }

  DialogueSample as_sample(const Session& s) const {
    DialogueSample d;
    d.context_text = s.context();
    d.goal.entities = s.goal;
    d.knowledge = s.knowledge;
    d.response_text = "";
    d.label = 1;
    return d;
  }

  /// Per-entity covered fraction: mean of 1 − v′ over the entity's tokens
  /// that survive batching.
  std::vector<std::pair<std::string, double>> coverage(const DialogueSample& sample,
                                                       const std::vector<double>& uncovered) const {
    DialogueSample enc = sample;
    encode(enc, model_->vocab);
    std::vector<double> sum(sample.goal.entities.size(), 0.0), n(sample.goal.entities.size(), 0.0);
    for (std::size_t i = 0; i < uncovered.size() && i < enc.goal.token_entity.size(); ++i) {
      sum[enc.goal.token_entity[i]] += 1.0 - uncovered[i];
      n[enc.goal.token_entity[i]] += 1.0;
    }
    std::vector<std::pair<std::string, double>> out;
    for (std::size_t e = 0; e < sum.size(); ++e) out.emplace_back(sample.goal.entities[e], n[e] ? sum[e] / n[e] : 0.0);
    return out;
  }

  static nlohmann::json state_json(const Session& s) {
    nlohmann::json transcript = nlohmann::json::array(), turns = nlohmann::json::array(), knowledge = nlohmann::json::array();
    for (const auto& [who, text] : s.transcript) transcript.push_back({{"speaker", who}, {"text", text}});
    for (const auto& t : s.turns) turns.push_back(t.to_json());
    for (const auto& k : s.knowledge) knowledge.push_back({k.subject, k.predicate, k.object});
    nlohmann::json cov = nlohmann::json::object();
    if (s.turns.empty()) {
      for (const auto& g : s.goal) cov[g] = 0.0;
    } else {
      cov = turns.back()["coverage"];
    }
    return {{"session_id", s.id}, {"goal", s.goal},   {"knowledge", knowledge},
            {"transcript", transcript}, {"turns", turns}, {"coverage", cov}};
  }

  std::shared_ptr<const LoadedModel> model_;
  std::shared_ptr<const InvertedIndex> pool_;
  ServiceOptions opt_;
  mutable std::shared_mutex store_mutex_;
  std::unordered_map<std::string, std::shared_ptr<Session>> sessions_;
  std::uint64_t counter_ = 0;
};

// ---------------------------------------------------------------------------
// HTTP

namespace detail {

inline nlohmann::json parse_body(const httplib::Request& req) {
  try {
    auto j = nlohmann::json::parse(req.body);
    if (!j.is_object()) throw HttpError(400, "request body must be a JSON object");
    return j;
  } catch (const nlohmann::json::parse_error&) {
    throw HttpError(400, "request body is not valid JSON");
  }
}

inline std::vector<std::string> body_strings(const nlohmann::json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || !it->is_array()) throw HttpError(400, std::string("\"") + key + "\" must be an array of strings");
  std::vector<std::string> out;
  for (const auto& v : *it) {
    if (!v.is_string()) throw HttpError(400, std::string("\"") + key + "\" must be an array of strings");
    out.push_back(v.get<std::string>());
  }
  return out;
}

inline std::vector<KnowledgeTriple> body_triples(const nlohmann::json& j) {
  auto it = j.find("knowledge");
  if (it == j.end() || !it->is_array()) throw HttpError(400, "\"knowledge\" must be an array of [s, p, o] triples");
  std::vector<KnowledgeTriple> out;
  for (const auto& t : *it) {
    if (!t.is_array() || t.size() != 3 || !t[0].is_string() || !t[1].is_string() || !t[2].is_string()) {
      throw HttpError(400, "\"knowledge\" entries must be [subject, predicate, object] strings");
    }
    out.push_back({t[0].get<std::string>(), t[1].get<std::string>(), t[2].get<std::string>(), {}, {}});
  }
  return out;
}

inline void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

template <typename F>
auto guarded(F f) {
  return [f](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const HttpError& e) {
      send_json(res, e.status(), {{"error", e.what()}});
    } catch (const SchemaError& e) {
      send_json(res, 400, {{"error", e.what()}});
    } catch (const std::exception& e) {
      send_json(res, 500, {{"error", e.what()}});
    }
  };
}

}  // namespace detail

/// Registers the API routes on `server`. CORS allows `cors_origin`.
inline void install_routes(httplib::Server& server, ChatService& svc, const std::string& cors_origin = "*") {
  server.set_default_headers({{"Access-Control-Allow-Origin", cors_origin},
                              {"Access-Control-Allow-Methods", "GET, POST, DELETE, OPTIONS"},
                              {"Access-Control-Allow-Headers", "Content-Type"}});
  server.Options(R"(/v1/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

  server.Get("/v1/health", [&svc](const httplib::Request&, httplib::Response& res) {
    detail::send_json(res, svc.ready() ? 200 : 503, {{"ready", svc.ready()}});
  });
  server.Post("/v1/sessions", detail::guarded([&svc](const httplib::Request& req, httplib::Response& res) {
                auto j = detail::parse_body(req);
                detail::send_json(res, 201, svc.create_session(detail::body_strings(j, "goal"), detail::body_triples(j)));
              }));
  server.Post(R"(/v1/sessions/([^/]+)/messages)", detail::guarded([&svc](const httplib::Request& req, httplib::Response& res) {
                auto j = detail::parse_body(req);
                auto it = j.find("text");
                if (it == j.end() || !it->is_string()) throw HttpError(400, "\"text\" must be a string");
                detail::send_json(res, 200, svc.post_message(req.matches[1], it->get<std::string>()));
              }));
  server.Get(R"(/v1/sessions/([^/]+))", detail::guarded([&svc](const httplib::Request& req, httplib::Response& res) {
               detail::send_json(res, 200, svc.get_state(req.matches[1]));
             }));
  server.Delete(R"(/v1/sessions/([^/]+))", detail::guarded([&svc](const httplib::Request& req, httplib::Response& res) {
                  svc.end_session(req.matches[1]);
                  res.status = 204;
                }));
  server.Post("/v1/rerank", detail::guarded([&svc](const httplib::Request& req, httplib::Response& res) {
                auto j = detail::parse_body(req);
                DialogueSample s;
                s.context_text = detail::body_strings(j, "context");
                if (s.context_text.empty()) throw HttpError(400, "\"context\" needs at least one utterance");
                s.goal.entities = detail::body_strings(j, "goal");
                if (s.goal.entities.empty()) throw HttpError(400, "\"goal\" needs at least one entity");
                s.knowledge = detail::body_triples(j);
                if (s.knowledge.empty()) throw HttpError(400, "\"knowledge\" needs at least one triple");
                detail::send_json(res, 200, svc.rerank(s, detail::body_strings(j, "candidates")));
              }));
}

/// Splits "host:port"; a bare port binds to 127.0.0.1.
inline std::pair<std::string, int> parse_address(const std::string& addr) {
  const auto colon = addr.rfind(':');
  std::string host = colon == std::string::npos ? "127.0.0.1" : addr.substr(0, colon);
  const std::string port = colon == std::string::npos ? addr : addr.substr(colon + 1);
  try {
    std::size_t used = 0;
    int p = std::stoi(port, &used);
    if (used != port.size() || p < 0 || p > 65535) throw std::invalid_argument(port);
    return {host.empty() ? "127.0.0.1" : host, p};
  } catch (const std::exception&) {
    throw UsageError("invalid address \"" + addr + "\" (expected host:port)");
  }
}

}  // namespace kpn
