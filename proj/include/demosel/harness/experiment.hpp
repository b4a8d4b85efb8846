#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "demosel/harness/checkpoint.hpp"

namespace demosel::harness {

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string join_indices(const std::vector<std::size_t>& idx, char sep = ' ') {
  std::string out;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (i) out += sep;
    out += std::to_string(idx[i]);
  }
  return out;
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (ch != ' ') {
      cur += ch;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

inline std::string metrics_header() { return "epoch,mean_reward,loss,degenerate_fraction"; }

inline std::string metrics_row(const EpochMetrics& m) {
  return std::to_string(m.epoch) + "," + format_double(m.mean_reward) + "," + format_double(m.loss) + "," +
         format_double(m.degenerate_fraction);
}

inline std::string metrics_csv(const std::vector<EpochMetrics>& rows) {
  std::string out = metrics_header() + "\n";
  for (const auto& r : rows) out += metrics_row(r) + "\n";
  return out;
}

/// Mean indicator reward of greedy decoding over every query of the task.
inline double greedy_mean_reward(const PolicyModel& model, const SyntheticTask& task, std::size_t m) {
  diff::NoGradGuard guard;
  double total = 0.0;
  for (std::size_t q = 0; q < task.query_count(); ++q) {
    const auto enc = model.encode(task.query(q), task.pool());
    total += envsim::oracle_reward(task, q, policy::greedy_decode(model, enc, m).indices);
  }
  return total / static_cast<double>(task.query_count());
}

struct RunOptions {
  std::optional<std::string> out_dir;      // metrics.csv, checkpoint.bin, config.json
  std::optional<std::string> resume_from;  // checkpoint to continue from
  LogSink log;
  std::function<void(const EpochMetrics&, const PolicyModel&)> on_epoch;
};

struct TrainOutcome {
  ExperimentConfig config;
  std::unique_ptr<PolicyModel> model;
  std::unique_ptr<Trainer> trainer;
  std::vector<EpochMetrics> metrics;  // epochs run by this call
};

/// Builds the task and model, optionally resumes, trains to config.train.epochs,
/// and writes a checkpoint after every epoch plus a metrics CSV.
inline TrainOutcome run_training(const ExperimentConfig& config, const RunOptions& options = {}) {
  TrainOutcome out;
  out.config = config;
  const SyntheticTask task = envsim::generate_task(config.task);
  out.model = std::make_unique<PolicyModel>(config.model, config.seed);
  out.trainer = std::make_unique<Trainer>(*out.model, config.train);
  if (options.resume_from) {
    const Checkpoint ck = load_checkpoint(*options.resume_from);
    restore(ck, *out.model, *out.trainer);
    if (options.log) options.log("resumed from '" + *options.resume_from + "' at epoch " + std::to_string(ck.epoch));
  }

  std::filesystem::path dir;
  std::ofstream metrics_file;
  if (options.out_dir) {
    dir = *options.out_dir;
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory '" + dir.string() + "': " + ec.message());
    write_file((dir / "config.json").string(), config_to_json(config).dump(2) + "\n");
    const auto csv = dir / "metrics.csv";
    const bool append = options.resume_from && std::filesystem::exists(csv);
    metrics_file.open(csv, append ? std::ios::app : std::ios::trunc);
    if (!metrics_file) throw IoError("cannot write '" + csv.string() + "'");
    if (!append) metrics_file << metrics_header() << "\n";
  }
  auto checkpoint = [&] {
    if (options.out_dir) save_checkpoint((dir / "checkpoint.bin").string(), capture(config, *out.model, *out.trainer));
  };

  out.metrics = out.trainer->train(task, options.log, [&](const EpochMetrics& m) {
    if (options.out_dir) {
      metrics_file << metrics_row(m) << "\n";
      metrics_file.flush();
    }
    checkpoint();
    if (options.log) {
      std::ostringstream os;
      os << "epoch " << m.epoch << " mean_reward=" << m.mean_reward << " loss=" << m.loss
         << " degenerate=" << m.degenerate_fraction;
      options.log(os.str());
    }
    if (options.on_epoch) options.on_epoch(m, *out.model);
  });
  if (out.metrics.empty()) checkpoint();
  return out;
}

inline const std::vector<std::string>& known_strategies() {
  static const std::vector<std::string> names{"random", "fixed", "similarity", "bm25", "policy-greedy", "policy-beam"};
  return names;
}

struct StrategyResult {
  std::string name;
  double mean_reward = 0.0;
  std::vector<double> rewards;                    // per query
  std::vector<std::vector<std::size_t>> selections;  // per query
};

struct EvalReport {
  std::vector<std::string> query_ids;
  std::vector<StrategyResult> strategies;
  std::vector<double> optimum;  // per-query brute-force max reward; empty if over budget
  double optimum_mean = std::numeric_limits<double>::quiet_NaN();

  const StrategyResult& strategy(const std::string& name) const {
    for (const auto& s : strategies)
      if (s.name == name) return s;
    throw ContractError("strategy '" + name + "' not in report");
  }
};

inline std::vector<std::string> parse_strategies(const std::string& list) {
  auto names = split_list(list);
  if (names.empty()) throw ConfigError("no strategies given");
  for (const auto& n : names) {
    if (std::find(known_strategies().begin(), known_strategies().end(), n) == known_strategies().end()) {
      throw ConfigError("unknown strategy '" + n + "'");
    }
  }
  return names;
}

/// Runs every strategy on every query with a shared seed and compares against
/// the exhaustive optimum. `model` may be null when no policy strategy is asked.
inline EvalReport evaluate(const SyntheticTask& task, const PolicyModel* model, const std::vector<std::string>& strategies,
                           std::size_t m, std::uint64_t seed, SearchConfig search = {}) {
  EvalReport report;
  for (std::size_t q = 0; q < task.query_count(); ++q) report.query_ids.push_back(task.query(q).id);
  search.m = m;
  for (const auto& name : strategies) {
    const bool is_policy = name.rfind("policy-", 0) == 0;
    if (is_policy && !model) throw ConfigError("strategy '" + name + "' needs a checkpoint");
    std::mt19937_64 rng(seed);
    StrategyResult res;
    res.name = name;
    diff::NoGradGuard guard;
    for (std::size_t q = 0; q < task.query_count(); ++q) {
      std::vector<std::size_t> pick;
      if (name == "policy-greedy" || name == "policy-beam") {
        const auto enc = model->encode(task.query(q), task.pool());
        pick = name == "policy-greedy" ? policy::greedy_decode(*model, enc, m).indices
                                       : search::stochastic_beam_search(*model, enc, search, nullptr).front().indices;
      } else {
        envsim::Baseline b = name == "random"       ? envsim::Baseline::random
                             : name == "fixed"      ? envsim::Baseline::fixed
                             : name == "similarity" ? envsim::Baseline::similarity
                                                    : envsim::Baseline::bm25;
        pick = envsim::baseline_select(b, task.query(q), task.pool(), m, rng).indices;
      }
      const double r = envsim::oracle_reward(task, q, pick);
      res.rewards.push_back(r);
      res.selections.push_back(std::move(pick));
      res.mean_reward += r;
    }
    res.mean_reward /= static_cast<double>(task.query_count());
    report.strategies.push_back(std::move(res));
  }
  try {
    double total = 0.0;
    for (std::size_t q = 0; q < task.query_count(); ++q) {
      report.optimum.push_back(envsim::brute_force_best(task, q, m).max_reward);
      total += report.optimum.back();
    }
    report.optimum_mean = total / static_cast<double>(task.query_count());
  } catch (const BudgetExceeded&) {
    report.optimum.clear();
  }
  return report;
}

inline std::string report_table(const EvalReport& r) {
  std::ostringstream os;
  const bool has_opt = !r.optimum.empty();
  os << std::left << std::setw(16) << "strategy" << std::right << std::setw(12) << "mean_reward";
  if (has_opt) os << std::setw(14) << "vs_optimum";
  os << "\n";
  os << std::fixed << std::setprecision(4);
  for (const auto& s : r.strategies) {
    os << std::left << std::setw(16) << s.name << std::right << std::setw(12) << s.mean_reward;
    if (has_opt) os << std::setw(14) << (s.mean_reward - r.optimum_mean);
    os << "\n";
  }
  os << std::left << std::setw(16) << "optimum" << std::right << std::setw(12);
  if (has_opt) {
    os << r.optimum_mean;
  } else {
    os << "n/a";
  }
  os << "\n";
  return os.str();
}

inline std::string report_csv(const EvalReport& r) {
  std::string out = "strategy,mean_reward,optimum_mean,delta_vs_optimum\n";
  const bool has_opt = !r.optimum.empty();
  for (const auto& s : r.strategies) {
    out += s.name + "," + format_double(s.mean_reward) + "," + (has_opt ? format_double(r.optimum_mean) : "") + "," +
           (has_opt ? format_double(s.mean_reward - r.optimum_mean) : "") + "\n";
  }
  return out;
}

inline std::string report_queries_csv(const EvalReport& r) {
  std::string out = "query_id,strategy,selection,reward,optimum\n";
  for (const auto& s : r.strategies) {
    for (std::size_t q = 0; q < r.query_ids.size(); ++q) {
      out += r.query_ids[q] + "," + s.name + "," + join_indices(s.selections[q]) + "," + format_double(s.rewards[q]) +
             "," + (r.optimum.empty() ? "" : format_double(r.optimum[q])) + "\n";
    }
  }
  return out;
}

/// Full reward table of every query, one row per ordered sequence.
inline std::string oracle_csv(const SyntheticTask& task, std::size_t m) {
  std::string out = "query_id,sequence,reward,is_best\n";
  for (std::size_t q = 0; q < task.query_count(); ++q) {
    const auto res = envsim::brute_force_best(task, q, m);
    for (const auto& e : res.table) {
      out += task.query(q).id + "," + join_indices(e.sequence) + "," + format_double(e.reward) + "," +
             (e.reward == res.max_reward ? "1" : "0") + "\n";
    }
  }
  return out;
}

inline const std::vector<std::string>& known_axes() {
  static const std::vector<std::string> axes{"no-sbs", "no-ar", "preference-loss", "m-sweep", "temperature-sweep"};
  return axes;
}

inline std::vector<std::string> parse_axes(const std::string& list) {
  auto axes = split_list(list);
  if (axes.empty()) throw ConfigError("no ablation axes given");
  for (const auto& a : axes) {
    if (std::find(known_axes().begin(), known_axes().end(), a) == known_axes().end()) {
      throw ConfigError("unknown ablation axis '" + a + "'");
    }
  }
  return axes;
}

struct AblationRow {
  std::string axis;
  std::string setting;
  std::uint64_t seed = 0;
  double final_reward = 0.0;       // greedy mean reward after training
  double last_train_reward = 0.0;  // mean exploration reward of the final epoch
};

inline const std::vector<double>& sweep_temperatures() {
  static const std::vector<double> t{0.25, 0.5, 1.0, 2.0, 4.0};
  return t;
}

/// Trains one variant and scores it by greedy reward.
inline AblationRow run_variant(const ExperimentConfig& config, std::string axis, std::string setting, const LogSink& log) {
  auto outcome = run_training(config, RunOptions{{}, {}, {}, {}});
  const SyntheticTask task = envsim::generate_task(config.task);
  AblationRow row{std::move(axis), std::move(setting), config.seed,
                  greedy_mean_reward(*outcome.model, task, config.task.m),
                  outcome.metrics.empty() ? 0.0 : outcome.metrics.back().mean_reward};
  if (log) log("ablation " + row.axis + "=" + row.setting + " seed " + std::to_string(row.seed) + ": " + format_double(row.final_reward));
  return row;
}

/// One row per (axis, setting, seed). Toggle axes share a "full" reference row.
inline std::vector<AblationRow> ablate(const ExperimentConfig& base, const std::vector<std::string>& axes,
                                       const std::vector<std::uint64_t>& seeds, const LogSink& log = {}) {
  std::vector<AblationRow> rows;
  const bool toggles = std::any_of(axes.begin(), axes.end(), [](const std::string& a) {
    return a == "no-sbs" || a == "no-ar" || a == "preference-loss";
  });
  for (std::uint64_t seed : seeds) {
    ExperimentConfig cfg = base;
    set_seed(cfg, seed);
    if (toggles) rows.push_back(run_variant(cfg, "full", "-", log));
    for (const auto& axis : axes) {
      if (axis == "no-sbs") {
        ExperimentConfig v = cfg;
        v.train.exploration = Exploration::deterministic_beam;
        rows.push_back(run_variant(v, axis, "deterministic-beam", log));
      } else if (axis == "no-ar") {
        ExperimentConfig v = cfg;
        v.model.autoregressive = false;
        rows.push_back(run_variant(v, axis, "start-state-only", log));
      } else if (axis == "preference-loss") {
        ExperimentConfig v = cfg;
        v.train.objective = Objective::preference;
        rows.push_back(run_variant(v, axis, "preference", log));
      } else if (axis == "m-sweep") {
        for (std::size_t m = 1; m <= std::min<std::size_t>(4, cfg.task.n); ++m) {
          ExperimentConfig v = cfg;
          v.task.m = m;
          v.train.m = m;
          // Small m can leave fewer sequences than the beam asks for.
          const auto count = static_cast<std::size_t>(envsim::ordered_count(cfg.task.n, m));
          v.train.c = std::min(v.train.c, count);
          v.train.beam_width = std::min(v.train.beam_width, std::max(count, v.train.c));
          if (v.train.c < 2) continue;
          rows.push_back(run_variant(v, axis, std::to_string(m), log));
        }
      } else if (axis == "temperature-sweep") {
        for (double t : sweep_temperatures()) {
          ExperimentConfig v = cfg;
          v.train.temperature = t;
          rows.push_back(run_variant(v, axis, format_double(t), log));
        }
      } else {
        throw ConfigError("unknown ablation axis '" + axis + "'");
      }
    }
  }
  return rows;
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "axis,setting,seed,final_reward,last_train_reward\n";
  for (const auto& r : rows) {
    out += r.axis + "," + r.setting + "," + std::to_string(r.seed) + "," + format_double(r.final_reward) + "," +
           format_double(r.last_train_reward) + "\n";
  }
  return out;
}

}  // namespace demosel::harness
