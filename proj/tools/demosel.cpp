// demosel: train, evaluate, ablate and audit demonstration-selection policies
// on the synthetic task suite.
//
// Exit codes: 0 ok, 2 configuration, 3 numeric abort, 4 I/O or corrupt file.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "demosel/harness/experiment.hpp"

namespace {

namespace fs = std::filesystem;
using namespace demosel;
using namespace demosel::harness;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitIo = 4;

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("demosel");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%H:%M:%S] [%^%l%$] %v");
  spdlog::set_level(spdlog::level::info);
  if (const char* env = std::getenv("DEMOSEL_LOG_LEVEL")) {
    const auto level = spdlog::level::from_str(env);
    // from_str maps unknown names to "off"; only accept it when asked for.
    if (level != spdlog::level::off || std::string(env) == "off") {
      spdlog::set_level(level);
    } else {
      spdlog::warn("ignoring unknown DEMOSEL_LOG_LEVEL '{}'", env);
    }
  }
}

LogSink info_sink() {
  return [](const std::string& msg) { spdlog::info("{}", msg); };
}

void write_output(const fs::path& path, const std::string& text) {
  write_file(path.string(), text);
  spdlog::info("wrote {}", path.string());
}

fs::path ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir + "': " + ec.message());
  return dir;
}

struct TrainArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::string out = "runs/train";
  std::optional<std::string> resume;
};

int cmd_train(const TrainArgs& a) {
  ExperimentConfig cfg = load_config(a.config);
  if (a.seed) set_seed(cfg, *a.seed);
  if (a.epochs) cfg.train.epochs = *a.epochs;
  spdlog::info("training {} (n={}, m={}, queries={}) for {} epochs, seed {}", to_string(cfg.task.kind), cfg.task.n,
               cfg.task.m, cfg.task.queries, cfg.train.epochs, cfg.seed);
  RunOptions opts;
  opts.out_dir = a.out;
  opts.resume_from = a.resume;
  opts.log = info_sink();
  const auto outcome = run_training(cfg, opts);
  const SyntheticTask task = envsim::generate_task(cfg.task);
  spdlog::info("greedy mean reward after training: {:.4f}", greedy_mean_reward(*outcome.model, task, cfg.task.m));
  spdlog::info("checkpoint and metrics in {}", a.out);
  return kExitOk;
}

struct EvalArgs {
  std::string ckpt;
  std::string task;
  std::string strategies = "random,fixed,similarity,bm25,policy-greedy,policy-beam";
  std::uint64_t seed = 0;
  std::string out = "runs/eval";
};

int cmd_eval(const EvalArgs& a) {
  const auto names = parse_strategies(a.strategies);
  const TaskSpec spec = load_task(a.task);
  const SyntheticTask task = envsim::generate_task(spec);
  const bool needs_policy = std::any_of(names.begin(), names.end(), [](const std::string& s) { return s.rfind("policy-", 0) == 0; });
  std::unique_ptr<PolicyModel> model;
  SearchConfig search;
  if (needs_policy) {
    if (a.ckpt.empty()) throw ConfigError("--ckpt is required for policy strategies");
    const Checkpoint ck = load_checkpoint(a.ckpt);
    const ExperimentConfig cfg = checkpoint_config(ck);
    if (cfg.model.feature_dim != spec.d_e) {
      throw ConfigError("checkpoint expects d_e=" + std::to_string(cfg.model.feature_dim) + ", task has " + std::to_string(spec.d_e));
    }
    model = std::make_unique<PolicyModel>(cfg.model, cfg.seed);
    restore_parameters(ck, *model);
    search = cfg.train.search();
  }
  const EvalReport report = evaluate(task, model.get(), names, spec.m, a.seed, search);
  std::cout << report_table(report);
  const fs::path dir = ensure_dir(a.out);
  write_output(dir / "report.csv", report_csv(report));
  write_output(dir / "report_queries.csv", report_queries_csv(report));
  return kExitOk;
}

struct AblateArgs {
  std::string config;
  std::string axes;
  std::optional<std::uint64_t> seed;
  std::size_t seeds = 1;
  std::optional<std::size_t> epochs;
  std::string out = "runs/ablate";
};

int cmd_ablate(const AblateArgs& a) {
  const auto axes = parse_axes(a.axes);
  ExperimentConfig cfg = load_config(a.config);
  if (a.seed) set_seed(cfg, *a.seed);
  if (a.epochs) cfg.train.epochs = *a.epochs;
  if (a.seeds == 0) throw ConfigError("--seeds must be positive");
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < a.seeds; ++i) seeds.push_back(cfg.seed + i);
  const auto rows = ablate(cfg, axes, seeds, info_sink());
  const std::string csv = ablation_csv(rows);
  std::cout << csv;
  write_output(ensure_dir(a.out) / "ablation.csv", csv);
  return kExitOk;
}

int cmd_oracle(const std::string& task_path, const std::string& out) {
  const TaskSpec spec = load_task(task_path);
  const SyntheticTask task = envsim::generate_task(spec);
  const std::string csv = oracle_csv(task, spec.m);
  if (out.empty()) {
    std::cout << csv;
  } else {
    write_output(out, csv);
  }
  return kExitOk;
}

int run(int argc, char** argv) {
  CLI::App app{"Learned selection of in-context demonstration combinations"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train a selection policy from a config file");
  t->add_option("--config", train.config, "Experiment config (JSON)")->required();
  t->add_option("--seed", train.seed, "Override the experiment seed");
  t->add_option("--epochs", train.epochs, "Override train.epochs");
  t->add_option("--out", train.out, "Output directory")->capture_default_str();
  t->add_option("--resume", train.resume, "Continue from a checkpoint");

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Compare selection strategies on a task");
  e->add_option("--ckpt", eval.ckpt, "Checkpoint for policy strategies");
  e->add_option("--task", eval.task, "Task spec (JSON)")->required();
  e->add_option("--strategies", eval.strategies, "Comma-separated strategy list")->capture_default_str();
  e->add_option("--seed", eval.seed, "Shared seed for stochastic strategies")->capture_default_str();
  e->add_option("--out", eval.out, "Output directory")->capture_default_str();

  AblateArgs abl;
  auto* b = app.add_subcommand("ablate", "Run ablation variants of a config");
  b->add_option("--config", abl.config, "Experiment config (JSON)")->required();
  b->add_option("--axes", abl.axes, "Comma-separated: no-sbs,no-ar,preference-loss,m-sweep,temperature-sweep")->required();
  b->add_option("--seed", abl.seed, "Override the first seed");
  b->add_option("--seeds", abl.seeds, "Number of consecutive seeds")->capture_default_str();
  b->add_option("--epochs", abl.epochs, "Override train.epochs");
  b->add_option("--out", abl.out, "Output directory")->capture_default_str();

  std::string oracle_task, oracle_out;
  auto* o = app.add_subcommand("oracle", "Dump the exhaustive reward table of a task");
  o->add_option("--task", oracle_task, "Task spec (JSON)")->required();
  o->add_option("--out", oracle_out, "CSV path (stdout if omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  setup_logging();
  try {
    if (*t) return cmd_train(train);
    if (*e) return cmd_eval(eval);
    if (*b) return cmd_ablate(abl);
    if (*o) return cmd_oracle(oracle_task, oracle_out);
  } catch (const ConfigError& err) {
    spdlog::error("config: {}", err.what());
    return kExitConfig;
  } catch (const TrainingAbort& err) {
    spdlog::error("numeric abort: {}", err.what());
    return kExitNumeric;
  } catch (const DegenerateInputError& err) {
    spdlog::error("numeric abort: {}", err.what());
    return kExitNumeric;
  } catch (const IoError& err) {
    spdlog::error("i/o: {}", err.what());
    return kExitIo;
  } catch (const ParseError& err) {
    spdlog::error("corrupt file: {}", err.what());
    return kExitIo;
  } catch (const Error& err) {
    spdlog::error("{}", err.what());
    return kExitConfig;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) { return run(argc, argv); }
