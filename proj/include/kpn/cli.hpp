#pragma once

// The `kpn` command: synth, label, train, eval, index, gradcheck, serve.
// Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.

#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "kpn/checkpoint.hpp"
#include "kpn/corpus.hpp"
#include "kpn/errors.hpp"
#include "kpn/evaluate.hpp"
#include "kpn/retriever.hpp"
#include "kpn/selfcheck.hpp"
#include "kpn/service.hpp"
#include "kpn/synth.hpp"
#include "kpn/trainer.hpp"
#include "kpn/weaklabel.hpp"

namespace kpn {

namespace cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInvalid = 1;
inline constexpr int kExitRuntime = 2;

inline void require_file(const std::string& path, const std::string& flag) {
  if (!std::filesystem::is_regular_file(path)) throw UsageError(flag + ": no such file \"" + path + "\"");
}

inline std::filesystem::path prepare_out(const std::string& out) {
  std::filesystem::path p(out);
  std::error_code ec;
  std::filesystem::create_directories(p, ec);
  if (ec || !std::filesystem::is_directory(p)) throw IoError("--out: cannot create directory \"" + out + "\"");
  return p;
}

/// Records the produced files of one subcommand run.
struct Manifest {
  std::string command;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json artifacts = nlohmann::json::array();
  nlohmann::json results = nlohmann::json::object();

  void add(const std::string& file, const std::string& kind, std::optional<std::size_t> records = std::nullopt) {
    nlohmann::json a = {{"path", file}, {"kind", kind}};
    if (records) a["records"] = *records;
    artifacts.push_back(std::move(a));
  }

  void write(const std::filesystem::path& dir) const {
    std::ofstream out(dir / "manifest.json", std::ios::binary);
    if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
    out << nlohmann::json{{"command", command}, {"config", config}, {"artifacts", artifacts}, {"results", results}}.dump(2)
        << '\n';
  }
};

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

/// A flag that, when given, overrides the config-file value.
template <class Config>
struct Overrides {
  std::vector<std::pair<CLI::Option*, std::function<void(const Config&, Config&)>>> items;

  template <class Get>
  void bind(CLI::App& app, Config& parsed, const std::string& flag, Get get, const std::string& help) {
    using T = std::remove_reference_t<decltype(get(parsed))>;
    CLI::Option* opt;
    if constexpr (std::is_same_v<T, bool>) {
      opt = app.add_flag(flag, get(parsed), help);
    } else {
      opt = app.add_option(flag, get(parsed), help)->capture_default_str();
    }
    items.emplace_back(opt, [get](const Config& from, Config& to) { get(to) = get(const_cast<Config&>(from)); });
  }

  void apply(const Config& parsed, Config& target) const {
    for (const auto& [opt, copy] : items)
      if (opt->count() > 0) copy(parsed, target);
  }
};

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  SynthSpec spec;
  std::uint64_t seed = 1;
  std::string out;
};

inline void add_synth(CLI::App& app, SynthArgs& a) {
  app.add_option("--entities", a.spec.entities, "Number of made-up entities")->capture_default_str();
  app.add_option("--dialogues", a.spec.dialogues, "Number of dialogues (one turn each)")->capture_default_str();
  app.add_option("--vocab_size", a.spec.vocab_size, "Size of the value word pool")->capture_default_str();
  app.add_option("--valid_fraction", a.spec.valid_fraction, "Share of dialogues for validation")->capture_default_str();
  app.add_option("--test_fraction", a.spec.test_fraction, "Share of dialogues for test")->capture_default_str();
  app.add_option("--negatives", a.spec.negatives, "Negatives per train/valid turn")->capture_default_str();
  app.add_option("--hard_negatives", a.spec.hard_negatives, "Negatives stating facts about the covered goal entity")
      ->capture_default_str();
  app.add_option("--same_entity_negatives", a.spec.same_entity_negatives,
                 "Negatives stating other facts about the target entity")
      ->capture_default_str();
  app.add_option("--covered_fraction", a.spec.covered_fraction, "Chance the context covers the first goal entity")
      ->capture_default_str();
  app.add_option("--seed", a.seed, "Random seed")->capture_default_str();
  app.add_option("--out", a.out, "Output directory")->required();
}

inline int run_synth(const SynthArgs& a, std::ostream& out) {
  auto dir = prepare_out(a.out);
  auto corpus = generate_synthetic_corpus(a.spec, a.seed);
  Manifest m{"synth"};
  m.config = {{"seed", a.seed},
              {"entities", a.spec.entities},
              {"dialogues", a.spec.dialogues},
              {"vocab_size", a.spec.vocab_size},
              {"valid_fraction", a.spec.valid_fraction},
              {"test_fraction", a.spec.test_fraction},
              {"negatives", a.spec.negatives},
              {"hard_negatives", a.spec.hard_negatives},
              {"same_entity_negatives", a.spec.same_entity_negatives},
              {"covered_fraction", a.spec.covered_fraction}};
  for (auto [name, samples] : {std::pair<const char*, const std::vector<DialogueSample>*>{"train.jsonl", &corpus.train},
                               {"valid.jsonl", &corpus.valid},
                               {"test.jsonl", &corpus.test}}) {
    save_jsonl((dir / name).string(), *samples);
    m.add(name, "samples", samples->size());
  }
  m.write(dir);
  out << "wrote " << corpus.train.size() << " train, " << corpus.valid.size() << " valid, " << corpus.test.size()
      << " test samples to " << dir.string() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// label

struct LabelArgs {
  std::vector<std::string> inputs;
  std::string human;
  std::string out;
  LinkConfig link;
  std::uint64_t seed = 1;
};

inline void add_label(CLI::App& app, LabelArgs& a) {
  app.add_option("--input", a.inputs, "JSONL sample files to label")->required();
  app.add_option("--human", a.human, "Annotation file; prints agreement against the first input");
  app.add_option("--descriptive_threshold", a.link.descriptive_threshold,
                 "Coverage a descriptive object must exceed")
      ->capture_default_str();
  app.add_option("--descriptive_min_tokens", a.link.descriptive_min_tokens,
                 "Object length from which the coverage rule applies")
      ->capture_default_str();
  app.add_option("--seed", a.seed, "Accepted for uniformity; labeling is deterministic")->capture_default_str();
  app.add_option("--out", a.out, "Output directory")->required();
}

inline int run_label(const LabelArgs& a, std::ostream& out) {
  for (const auto& in : a.inputs) require_file(in, "--input");
  if (!a.human.empty()) require_file(a.human, "--human");
  a.link.validate();
  auto dir = prepare_out(a.out);
  Manifest m{"label"};
  m.config = {{"inputs", a.inputs},
              {"descriptive_threshold", a.link.descriptive_threshold},
              {"descriptive_min_tokens", a.link.descriptive_min_tokens}};
  std::set<std::string> names;
  for (const auto& in : a.inputs) {
    const std::string name = std::filesystem::path(in).filename().string();
    if (!names.insert(name).second) throw UsageError("--input: two inputs share the file name \"" + name + "\"");
    auto samples = read_jsonl(in);
    label_corpus(samples, a.link);
    std::size_t positives = 0, linked = 0;
    for (const auto& s : samples) {
      if (s.label != 1) continue;
      ++positives;
      linked += std::any_of(s.knowledge.begin(), s.knowledge.end(), [](const auto& k) { return k.weak_label == 1; });
    }
    save_jsonl((dir / name).string(), samples);
    m.add(name, "labeled_samples", samples.size());
    out << name << ": " << positives << " positives, " << linked << " with at least one linked triple\n";
  }
  if (!a.human.empty()) {
    auto agree = agreement(read_jsonl(a.inputs.front()), load_annotations(a.human), a.link);
    m.results["agreement_percent"] = agree.percent_agree;
    m.results["fleiss_kappa"] = agree.fleiss_kappa;
    m.results["items"] = agree.items;
    out << std::fixed << std::setprecision(2) << "agreement " << agree.percent_agree << "% over " << agree.items
        << " items, fleiss kappa " << std::setprecision(3) << agree.fleiss_kappa << '\n';
  }
  m.write(dir);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  TrainConfig cfg;
  std::string train_path, valid_path, config_path, out, embeddings;
  Overrides<TrainConfig> overrides;
};

inline void add_train(CLI::App& app, TrainArgs& a) {
  app.add_option("--train", a.train_path, "Labeled training JSONL")->required();
  app.add_option("--valid", a.valid_path, "Labeled validation JSONL")->required();
  app.add_option("--config", a.config_path, "JSON config; flags given on the command line take precedence");
  app.add_option("--embeddings", a.embeddings, "Pretrained word vectors (word followed by numbers per line)");
  app.add_option("--out", a.out, "Output directory (checkpoint, log, manifest)")->required();
  auto& o = a.overrides;
  auto& c = a.cfg;
  o.bind(app, c, "--epochs", [](TrainConfig& t) -> auto& { return t.epochs; }, "Maximum epochs");
  o.bind(app, c, "--batch_size", [](TrainConfig& t) -> auto& { return t.batch_size; }, "Contexts per update");
  o.bind(app, c, "--lr", [](TrainConfig& t) -> auto& { return t.lr; }, "Adam learning rate");
  o.bind(app, c, "--lambda", [](TrainConfig& t) -> auto& { return t.lambda_kp; }, "Weight of the KP loss");
  o.bind(app, c, "--seed", [](TrainConfig& t) -> auto& { return t.seed; }, "Random seed");
  o.bind(app, c, "--patience", [](TrainConfig& t) -> auto& { return t.patience; }, "Epochs without improvement");
  o.bind(app, c, "--checkpoint_dir", [](TrainConfig& t) -> auto& { return t.checkpoint_dir; },
         "Checkpoint directory (default: --out)");
  o.bind(app, c, "--metrics_log", [](TrainConfig& t) -> auto& { return t.metrics_log; },
         "JSONL epoch log (default: <out>/train_log.jsonl)");
  o.bind(app, c, "--disable_kp_loss", [](TrainConfig& t) -> auto& { return t.disable_kp_loss; }, "Train with lambda 0");
  o.bind(app, c, "--disable_goal_tracking", [](TrainConfig& t) -> auto& { return t.disable_goal_tracking; },
         "Use the raw goal instead of the uncovered goal");
  o.bind(app, c, "--disable_knowledge_head", [](TrainConfig& t) -> auto& { return t.disable_knowledge_head; },
         "Zero the knowledge head");
  o.bind(app, c, "--disable_goal_head", [](TrainConfig& t) -> auto& { return t.disable_goal_head; },
         "Zero the goal head");
  o.bind(app, c, "--freeze_embeddings", [](TrainConfig& t) -> auto& { return t.freeze_embeddings; },
         "Keep the embedding table fixed (default on; pass =false to tune it)");
  o.bind(app, c, "--clip_norm", [](TrainConfig& t) -> auto& { return t.clip_norm; }, "Global gradient norm clip");
  o.bind(app, c, "--max_utterances", [](TrainConfig& t) -> auto& { return t.limits.max_utterances; },
         "Context utterances kept (most recent)");
  o.bind(app, c, "--max_tokens", [](TrainConfig& t) -> auto& { return t.limits.max_tokens; }, "Tokens per sequence");
  o.bind(app, c, "--max_triples", [](TrainConfig& t) -> auto& { return t.limits.max_triples; }, "Triples per turn");
  o.bind(app, c, "--embed_dim", [](TrainConfig& t) -> auto& { return t.model.embed_dim; }, "Embedding size");
  o.bind(app, c, "--lstm_hidden", [](TrainConfig& t) -> auto& { return t.model.lstm_hidden; }, "LSTM state size");
  o.bind(app, c, "--kp_window", [](TrainConfig& t) -> auto& { return t.model.kp_window; },
         "Recent utterances seen by knowledge prediction");
  o.bind(app, c, "--mlp_hidden", [](TrainConfig& t) -> auto& { return t.model.mlp_hidden; }, "MLP hidden sizes");
  o.bind(app, c, "--match_len", [](TrainConfig& t) -> auto& { return t.model.match_len; }, "Matching matrix side");
  o.bind(app, c, "--cnn_filters", [](TrainConfig& t) -> auto& { return t.model.cnn_filters; }, "CNN filters");
  o.bind(app, c, "--cnn_kernel", [](TrainConfig& t) -> auto& { return t.model.cnn_kernel; }, "CNN kernel side");
  o.bind(app, c, "--init_scale", [](TrainConfig& t) -> auto& { return t.model.init_scale; },
         "Uniform init half-width");
}

inline TrainConfig load_train_config(const std::string& path) {
  require_file(path, "--config");
  std::ifstream in(path, std::ios::binary);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path + ": malformed JSON (" + e.what() + ")");
  }
  try {
    return j.get<TrainConfig>();
  } catch (const SchemaError& e) {
    throw SchemaError(path + ": " + e.what());
  }
}

inline int run_train(const TrainArgs& a, std::ostream& out) {
  require_file(a.train_path, "--train");
  require_file(a.valid_path, "--valid");
  if (!a.embeddings.empty()) require_file(a.embeddings, "--embeddings");
  TrainConfig cfg = a.config_path.empty() ? TrainConfig{} : load_train_config(a.config_path);
  a.overrides.apply(a.cfg, cfg);
  cfg.validate();
  auto dir = prepare_out(a.out);
  if (cfg.checkpoint_dir.empty()) cfg.checkpoint_dir = dir.string();
  if (cfg.metrics_log.empty()) cfg.metrics_log = (dir / "train_log.jsonl").string();

  auto train_samples = read_jsonl(a.train_path);
  auto valid_samples = read_jsonl(a.valid_path);
  Vocabulary vocab = build_vocabulary(train_samples);
  encode(train_samples, vocab);
  encode(valid_samples, vocab);
  std::optional<std::map<TokenId, std::vector<double>>> pretrained;
  if (!a.embeddings.empty()) pretrained = load_embeddings(a.embeddings, vocab, cfg.model.embed_dim);

  auto result = train(
      cfg, train_samples, valid_samples, vocab,
      [&out](const EpochRecord& e) {
        out << "epoch " << e.epoch << "  loss " << std::fixed << std::setprecision(4) << e.loss << "  valid mrr "
            << e.valid_mrr << "  hits@1 " << e.valid_hits1 << '\n';
      },
      pretrained ? &*pretrained : nullptr);

  Manifest m{"train"};
  m.config = cfg;
  m.add(std::filesystem::path(result.checkpoint_path).filename().string(), "checkpoint");
  m.add(std::filesystem::path(cfg.metrics_log).filename().string(), "epoch_log", result.history.size());
  m.results = {{"best_epoch", result.best_epoch},
               {"best_valid_mrr", result.best_mrr},
               {"epochs_run", result.history.size()},
               {"stopped_early", result.stopped_early}};
  m.write(dir);
  out << "best epoch " << result.best_epoch << " (valid mrr " << std::setprecision(4) << result.best_mrr << "), saved "
      << result.checkpoint_path << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string checkpoint, test, scenario = "ranked10", index, pool, out;
  std::uint64_t seed = 1;
};

inline void add_eval(CLI::App& app, EvalArgs& a) {
  app.add_option("--checkpoint", a.checkpoint, "Trained checkpoint")->required();
  app.add_option("--test", a.test, "Test JSONL (ranked10 needs \"candidates\" on every sample)")->required();
  app.add_option("--scenario", a.scenario, "ranked10 or practical49")->capture_default_str();
  app.add_option("--index", a.index, "BM25 index file for practical49");
  app.add_option("--pool", a.pool, "JSONL whose positive responses form the practical49 pool (instead of --index)");
  app.add_option("--seed", a.seed, "Seed for candidate placement and padding")->capture_default_str();
  app.add_option("--out", a.out, "Output directory")->required();
}

inline int run_eval(const EvalArgs& a, std::ostream& out) {
  const Scenario scenario = parse_scenario(a.scenario);
  require_file(a.checkpoint, "--checkpoint");
  require_file(a.test, "--test");
  if (!a.index.empty()) require_file(a.index, "--index");
  if (!a.pool.empty()) require_file(a.pool, "--pool");
  if (scenario == Scenario::practical_49 && a.index.empty() && a.pool.empty()) {
    throw UsageError("--scenario practical49 needs --index or --pool");
  }
  auto dir = prepare_out(a.out);
  auto loaded = load_model(a.checkpoint);
  auto test = read_jsonl(a.test);
  std::optional<InvertedIndex> index;
  if (scenario == Scenario::practical_49) index = load_pool(a.index.empty() ? a.pool : a.index);
  auto result = evaluate(model_scorer(loaded->model, loaded->vocab, loaded->limits), test, scenario,
                         index ? &*index : nullptr, a.seed);
  const std::string file = "eval_" + scenario_name(scenario) + ".json";
  write_json(dir / file, result.to_json());
  Manifest m{"eval"};
  m.config = {{"checkpoint", a.checkpoint}, {"test", a.test}, {"scenario", scenario_name(scenario)}, {"seed", a.seed}};
  m.add(file, "eval_report", result.turns.size());
  m.results = result.to_json();
  m.write(dir);
  out << result.table();
  return kExitOk;
}

// ---------------------------------------------------------------------------
// index

struct IndexArgs {
  std::vector<std::string> pool;
  std::string out;
  std::uint64_t seed = 1;
};

inline void add_index(CLI::App& app, IndexArgs& a) {
  app.add_option("--pool", a.pool, "JSONL files whose positive responses are indexed")->required();
  app.add_option("--seed", a.seed, "Accepted for uniformity; indexing is deterministic")->capture_default_str();
  app.add_option("--out", a.out, "Output directory")->required();
}

inline int run_index(const IndexArgs& a, std::ostream& out) {
  for (const auto& p : a.pool) require_file(p, "--pool");
  auto dir = prepare_out(a.out);
  std::vector<std::string> texts;
  for (const auto& p : a.pool)
    for (const auto& s : read_jsonl(p))
      if (s.label == 1) texts.push_back(s.response_text);
  auto index = build_index(texts);
  index.save((dir / "index.bm25").string());
  Manifest m{"index"};
  m.config = {{"pool", a.pool}};
  m.add("index.bm25", "bm25_index", index.size());
  m.results = {{"documents", index.size()}, {"terms", index.vocabulary_size()}};
  m.write(dir);
  out << "indexed " << index.size() << " responses (" << index.vocabulary_size() << " terms)\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckArgs {
  std::uint64_t seed = 1;
  double tolerance = 1e-4;
  std::string out;
};

inline void add_gradcheck(CLI::App& app, GradcheckArgs& a) {
  app.add_option("--seed", a.seed, "Seed for the random inputs and model")->capture_default_str();
  app.add_option("--tolerance", a.tolerance, "Largest accepted relative error")->capture_default_str();
  app.add_option("--out", a.out, "Optional output directory for a JSON report");
}

inline int run_gradcheck(const GradcheckArgs& a, std::ostream& out) {
  if (!(a.tolerance > 0)) throw UsageError("--tolerance must be positive");
  auto cases = gradient_suite(a.seed);
  double worst = 0;
  nlohmann::json report = nlohmann::json::array();
  for (const auto& c : cases) {
    worst = std::max(worst, c.result.max_rel_error);
    out << std::left << std::setw(24) << c.name << std::scientific << std::setprecision(3) << c.result.max_rel_error
        << "  (" << c.result.checked << " entries, worst in " << c.result.worst_param << ")\n";
    report.push_back({{"name", c.name},
                      {"max_rel_error", c.result.max_rel_error},
                      {"checked", c.result.checked},
                      {"worst_param", c.result.worst_param}});
  }
  const bool ok = worst < a.tolerance;
  out << "max relative error " << std::scientific << std::setprecision(3) << worst << (ok ? " < " : " >= ")
      << a.tolerance << '\n';
  if (!a.out.empty()) {
    auto dir = prepare_out(a.out);
    write_json(dir / "gradcheck.json", {{"seed", a.seed}, {"cases", report}, {"max_rel_error", worst}, {"ok", ok}});
    Manifest m{"gradcheck"};
    m.config = {{"seed", a.seed}, {"tolerance", a.tolerance}};
    m.add("gradcheck.json", "gradcheck_report", cases.size());
    m.results = {{"max_rel_error", worst}, {"ok", ok}};
    m.write(dir);
  }
  return ok ? kExitOk : kExitRuntime;
}

// ---------------------------------------------------------------------------
// serve

struct ServeArgs {
  std::string addr, checkpoint, pool, cors_origin = "*", session_dump_dir;
  std::size_t candidates = 50;
  std::uint64_t seed = 1;
};

inline std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v && *v ? std::string(v) : fallback;
}

inline void add_serve(CLI::App& app, ServeArgs& a) {
  app.add_option("--addr", a.addr, "host:port to listen on (env KPN_ADDR, default 127.0.0.1:8080)");
  app.add_option("--checkpoint", a.checkpoint, "Trained checkpoint (env KPN_CHECKPOINT)");
  app.add_option("--pool", a.pool, "Response pool: JSONL or BM25 index file (env KPN_POOL)");
  app.add_option("--cors_origin", a.cors_origin, "Allowed CORS origin")->capture_default_str();
  app.add_option("--session_dump_dir", a.session_dump_dir, "Write each ended session as JSONL here");
  app.add_option("--candidates", a.candidates, "Candidates retrieved per turn")->capture_default_str();
  app.add_option("--seed", a.seed, "Seed for candidate padding")->capture_default_str();
}

inline httplib::Server*& active_server() {
  static httplib::Server* server = nullptr;
  return server;
}

inline int run_serve(ServeArgs a, std::ostream& out) {
  a.addr = a.addr.empty() ? env_or("KPN_ADDR", "127.0.0.1:8080") : a.addr;
  a.checkpoint = a.checkpoint.empty() ? env_or("KPN_CHECKPOINT", "") : a.checkpoint;
  a.pool = a.pool.empty() ? env_or("KPN_POOL", "") : a.pool;
  if (a.checkpoint.empty()) throw UsageError("--checkpoint (or KPN_CHECKPOINT) is required");
  if (a.pool.empty()) throw UsageError("--pool (or KPN_POOL) is required");
  require_file(a.checkpoint, "--checkpoint");
  require_file(a.pool, "--pool");
  if (a.candidates < 1) throw UsageError("--candidates must be at least 1");
  const auto [host, port] = parse_address(a.addr);

  ServiceOptions opt;
  opt.candidates = a.candidates;
  opt.seed = a.seed;
  opt.session_dump_dir = a.session_dump_dir;
  auto model = load_model(a.checkpoint);
  opt.limits = model->limits;
  ChatService svc(model, std::make_shared<const InvertedIndex>(load_pool(a.pool)), opt);
  httplib::Server server;
  install_routes(server, svc, a.cors_origin);
  if (!server.bind_to_port(host, port)) throw IoError("cannot listen on " + a.addr);
  active_server() = &server;
  std::signal(SIGINT, [](int) {
    if (active_server()) active_server()->stop();
  });
  std::signal(SIGTERM, [](int) {
    if (active_server()) active_server()->stop();
  });
  out << "listening on " << host << ':' << port << std::endl;
  server.listen_after_bind();
  active_server() = nullptr;
  return kExitOk;
}

}  // namespace cli

/// Entry point of the `kpn` binary.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using namespace cli;
  CLI::App app{"Knowledge-prediction retrieval dialogue toolkit", "kpn"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  SynthArgs synth_args;
  LabelArgs label_args;
  TrainArgs train_args;
  EvalArgs eval_args;
  IndexArgs index_args;
  GradcheckArgs grad_args;
  ServeArgs serve_args;
  auto* synth = app.add_subcommand("synth", "Generate a seeded synthetic corpus");
  add_synth(*synth, synth_args);
  auto* label = app.add_subcommand("label", "Attach weak knowledge labels");
  add_label(*label, label_args);
  auto* trainc = app.add_subcommand("train", "Train a model with early stopping on validation MRR");
  add_train(*trainc, train_args);
  auto* evalc = app.add_subcommand("eval", "Evaluate a checkpoint on ranked10 or practical49");
  add_eval(*evalc, eval_args);
  auto* indexc = app.add_subcommand("index", "Build a BM25 index over a response pool");
  add_index(*indexc, index_args);
  auto* grad = app.add_subcommand("gradcheck", "Run the finite-difference gradient suite");
  add_gradcheck(*grad, grad_args);
  auto* serve = app.add_subcommand("serve", "Start the HTTP chat service");
  add_serve(*serve, serve_args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    const CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << sub->help();
    return kExitInvalid;
  }

  try {
    if (synth->parsed()) return run_synth(synth_args, out);
    if (label->parsed()) return run_label(label_args, out);
    if (trainc->parsed()) return run_train(train_args, out);
    if (evalc->parsed()) return run_eval(eval_args, out);
    if (indexc->parsed()) return run_index(index_args, out);
    if (grad->parsed()) return run_gradcheck(grad_args, out);
    if (serve->parsed()) return run_serve(serve_args, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    const CLI::App* sub = app.get_subcommands().front();
    err << sub->help();
    return kExitInvalid;
  } catch (const SchemaError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const DomainError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const DimensionError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const IndexError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitInvalid;
}

}  // namespace kpn
