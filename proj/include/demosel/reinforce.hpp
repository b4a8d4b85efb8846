#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "demosel/search.hpp"

namespace demosel {

/// The task side of training: queries with ground truth, a shared pool, and a
/// black-box responder standing in for the vision-language model.
class Environment {
 public:
  virtual ~Environment() = default;
  virtual const CandidatePool& pool() const = 0;
  virtual std::size_t query_count() const = 0;
  virtual const Query& query(std::size_t index) const = 0;
  /// Model output for a query prompted with the given demonstrations. May throw.
  virtual std::string respond(std::size_t query_index, const SelectionSequence& selection) const = 0;
};

struct RewardRecord {
  SelectionSequence sequence;
  std::string output;
  double reward = 0.0;
};

struct AdvantageBatch {
  std::string query_id;
  std::vector<RewardRecord> records;
  std::vector<double> advantages;
  bool degenerate = false;
};

enum class AdvantageScale { std_dev, variance };
enum class Objective { policy_gradient, preference };
enum class Exploration { stochastic_beam, deterministic_beam };

struct Advantages {
  std::vector<double> values;
  bool degenerate = false;
};

inline constexpr double kAdvantageEps = 1e-8;

namespace detail {
inline std::string normalize_token(std::string_view s) {
  auto is_space = [](unsigned char ch) { return std::isspace(ch) != 0; };
  std::size_t begin = 0, end = s.size();
  while (begin < end && is_space(static_cast<unsigned char>(s[begin]))) ++begin;
  while (end > begin && is_space(static_cast<unsigned char>(s[end - 1]))) --end;
  std::string out(s.substr(begin, end - begin));
  for (char& ch : out) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return out;
}
}  // namespace detail

/// 1 iff the output matches the truth after trimming and case folding.
inline double indicator_reward(std::string_view output, std::string_view truth) {
  return detail::normalize_token(output) == detail::normalize_token(truth) ? 1.0 : 0.0;
}

/// Query-wise normalization: (A_i - mean) / max(scale, eps), with the
/// population standard deviation (default) or variance as the scale.
/// All-equal rewards are degenerate and map to zeros.
inline Advantages normalize_advantages(std::span<const double> rewards, AdvantageScale scale = AdvantageScale::std_dev) {
  if (rewards.size() < 2) throw ConfigError("advantage normalization needs c >= 2 rewards");
  Advantages out;
  out.values.assign(rewards.size(), 0.0);
  const auto [lo, hi] = std::minmax_element(rewards.begin(), rewards.end());
  if (*lo == *hi) {
    out.degenerate = true;
    return out;
  }
  const double n = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  var /= n;
  const double denom = std::max(scale == AdvantageScale::std_dev ? std::sqrt(var) : var, kAdvantageEps);
  for (std::size_t i = 0; i < rewards.size(); ++i) out.values[i] = (rewards[i] - mean) / denom;
  return out;
}

inline void check_joints(std::span<const AdvantageBatch> batches, std::span<const std::vector<Var>> joints) {
  if (batches.size() != joints.size()) throw ContractError("one joint log-prob list per batch is required");
  for (std::size_t b = 0; b < batches.size(); ++b) {
    if (batches[b].degenerate) continue;
    if (joints[b].size() != batches[b].advantages.size()) {
      throw ContractError("batch '" + batches[b].query_id + "' has mismatched advantages and log-probs");
    }
    for (const auto& j : joints[b]) {
      if (!std::isfinite(j.item())) {
        throw TrainingAbort("non-finite joint log-probability in batch '" + batches[b].query_id + "'");
      }
    }
  }
}

/// -(1/|B|) sum_b (1/c) sum_i A_hat_i * log pi(E_i). Advantages are constants;
/// degenerate batches contribute zero but still count in |B|.
inline Var policy_gradient_loss(std::span<const AdvantageBatch> batches, std::span<const std::vector<Var>> joints) {
  check_joints(batches, joints);
  std::vector<Var> terms;
  for (std::size_t b = 0; b < batches.size(); ++b) {
    if (batches[b].degenerate) continue;
    const double weight = 1.0 / static_cast<double>(batches[b].advantages.size());
    for (std::size_t i = 0; i < joints[b].size(); ++i) {
      const double a = batches[b].advantages[i];
      if (a == 0.0) continue;
      terms.push_back(diff::scale(joints[b][i], a * weight));
    }
  }
  if (batches.empty()) return Var::constant(Tensor::scalar(0.0));
  return diff::scale(diff::add_scalars(terms), -1.0 / static_cast<double>(batches.size()));
}

/// Pairwise logistic loss on (best, worst) per batch, averaged over batches.
/// All-tied batches contribute zero.
inline Var preference_loss(std::span<const AdvantageBatch> batches, std::span<const std::vector<Var>> joints,
                           double beta = 1.0) {
  check_joints(batches, joints);
  std::vector<Var> terms;
  for (std::size_t b = 0; b < batches.size(); ++b) {
    const auto& recs = batches[b].records;
    if (batches[b].degenerate || recs.size() < 2) continue;
    std::size_t best = 0, worst = 0;
    for (std::size_t i = 1; i < recs.size(); ++i) {
      if (recs[i].reward > recs[best].reward) best = i;
      if (recs[i].reward < recs[worst].reward) worst = i;
    }
    if (recs[best].reward == recs[worst].reward) continue;
    const Var gap = diff::scale(diff::sub(joints[b][best], joints[b][worst]), beta);
    terms.push_back(diff::scale(diff::log_sigmoid(gap), -1.0));
  }
  if (batches.empty()) return Var::constant(Tensor::scalar(0.0));
  return diff::scale(diff::add_scalars(terms), 1.0 / static_cast<double>(batches.size()));
}

struct TrainConfig {
  std::size_t epochs = 10;
  double learning_rate = 5e-5;
  std::size_t batch_size = 8;
  std::size_t c = 4;
  std::size_t beam_width = 9;
  double temperature = 1.0;
  std::size_t m = 2;
  std::uint64_t seed = 0;
  double weight_decay = 0.01;
  double preference_beta = 1.0;
  AdvantageScale advantage_scale = AdvantageScale::std_dev;
  Objective objective = Objective::policy_gradient;
  Exploration exploration = Exploration::stochastic_beam;

  SearchConfig search() const { return {m, beam_width, c, temperature}; }
};

inline void validate(const TrainConfig& c) {
  if (!(c.learning_rate > 0.0)) throw ConfigError("train.learning_rate must be positive");
  if (c.batch_size == 0) throw ConfigError("train.batch_size must be positive");
  if (c.c < 2) throw ConfigError("train.c must be at least 2");
  if (c.beam_width < c.c) throw ConfigError("train.beam_width must be at least train.c");
  if (!(c.temperature > 0.0)) throw ConfigError("train.temperature must be positive");
  if (c.m == 0) throw ConfigError("train.m must be positive");
  if (c.weight_decay < 0.0) throw ConfigError("train.weight_decay must be nonnegative");
}

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  double mean_reward = 0.0;
  double loss = 0.0;
  double degenerate_fraction = 0.0;
  std::size_t skipped_episodes = 0;

  bool operator==(const EpochMetrics&) const = default;
};

using LogSink = std::function<void(const std::string&)>;

/// Exploration-exploitation training loop. Holds everything needed to resume:
/// optimizer moments, RNG stream, and the completed-epoch counter.
class Trainer {
 public:
  Trainer(PolicyModel& model, TrainConfig config)
      : model_(model), config_(config), optimizer_(diff::AdamWConfig{0.9, 0.999, 1e-8, config.weight_decay}),
        rng_(config.seed) {
    validate(config_);
  }

  const TrainConfig& config() const noexcept { return config_; }
  diff::AdamW& optimizer() noexcept { return optimizer_; }
  const diff::AdamW& optimizer() const noexcept { return optimizer_; }
  std::mt19937_64& rng() noexcept { return rng_; }
  const std::mt19937_64& rng() const noexcept { return rng_; }
  std::size_t epochs_completed() const noexcept { return epoch_; }
  void set_epochs_completed(std::size_t e) noexcept { epoch_ = e; }

  /// One pass over every query in a freshly shuffled order.
  EpochMetrics run_epoch(const Environment& env, const LogSink& log = {}) {
    if (env.pool().size() < config_.m) throw ConfigError("candidate pool is smaller than m");
    std::vector<std::size_t> order(env.query_count());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng_);

    EpochMetrics metrics;
    metrics.epoch = epoch_ + 1;
    double reward_sum = 0.0;
    std::size_t reward_count = 0, episodes = 0, degenerate = 0, steps = 0;
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config_.batch_size) {
      const std::size_t stop = std::min(order.size(), start + config_.batch_size);
      std::vector<AdvantageBatch> batches;
      std::vector<std::vector<Var>> joints;
      for (std::size_t k = start; k < stop; ++k) {
        const std::size_t qi = order[k];
        auto episode = rollout(env, qi, log);
        if (!episode) {
          ++metrics.skipped_episodes;
          continue;
        }
        ++episodes;
        for (const auto& rec : episode->batch.records) {
          reward_sum += rec.reward;
          ++reward_count;
        }
        if (episode->batch.degenerate) ++degenerate;
        batches.push_back(std::move(episode->batch));
        joints.push_back(std::move(episode->joints));
      }
      ++steps;
      const bool any_signal =
          std::any_of(batches.begin(), batches.end(), [](const AdvantageBatch& b) { return !b.degenerate; });
      if (!any_signal) continue;
      const Var loss = config_.objective == Objective::policy_gradient
                           ? policy_gradient_loss(batches, joints)
                           : preference_loss(batches, joints, config_.preference_beta);
      if (!std::isfinite(loss.item())) throw TrainingAbort("loss became non-finite");
      loss_sum += loss.item();
      model_.parameters().zero_grad();
      diff::backward(loss);
      optimizer_.step(model_.parameters(), config_.learning_rate);
    }
    metrics.mean_reward = reward_count ? reward_sum / static_cast<double>(reward_count) : 0.0;
    metrics.loss = steps ? loss_sum / static_cast<double>(steps) : 0.0;
    metrics.degenerate_fraction = episodes ? static_cast<double>(degenerate) / static_cast<double>(episodes) : 0.0;
    ++epoch_;
    return metrics;
  }

  /// Runs the remaining epochs up to config.epochs; `on_epoch` sees each result.
  std::vector<EpochMetrics> train(const Environment& env, const LogSink& log = {},
                                  const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
    std::vector<EpochMetrics> out;
    while (epoch_ < config_.epochs) {
      out.push_back(run_epoch(env, log));
      if (on_epoch) on_epoch(out.back());
    }
    return out;
  }

 private:
  struct Episode {
    AdvantageBatch batch;
    std::vector<Var> joints;
  };

  std::optional<Episode> rollout(const Environment& env, std::size_t qi, const LogSink& log) {
    const Query& query = env.query(qi);
    const EncodedQuery enc = model_.encode(query, env.pool());
    const bool stochastic = config_.exploration == Exploration::stochastic_beam;
    const auto sequences = search::stochastic_beam_search(model_, enc, config_.search(), stochastic ? &rng_ : nullptr);

    Episode ep;
    ep.batch.query_id = query.id;
    std::vector<double> rewards;
    for (const auto& seq : sequences) {
      RewardRecord rec;
      rec.sequence = seq;
      try {
        rec.output = env.respond(qi, seq);
      } catch (const std::exception& e) {
        if (log) log("query '" + query.id + "': responder failed (" + e.what() + "); episode skipped");
        return std::nullopt;
      }
      rec.reward = indicator_reward(rec.output, query.answer);
      rewards.push_back(rec.reward);
      ep.batch.records.push_back(std::move(rec));
    }
    if (rewards.size() < 2) {
      if (log) log("query '" + query.id + "': fewer than two explored combinations; episode skipped");
      return std::nullopt;
    }
    const Advantages adv = normalize_advantages(rewards, config_.advantage_scale);
    ep.batch.advantages = adv.values;
    ep.batch.degenerate = adv.degenerate;
    if (!adv.degenerate) {
      for (const auto& rec : ep.batch.records) {
        ep.joints.push_back(policy::sequence_log_prob(model_, enc, rec.sequence.indices, config_.temperature).joint);
      }
    }
    return ep;
  }

  PolicyModel& model_;
  TrainConfig config_;
  diff::AdamW optimizer_;
  std::mt19937_64 rng_;
  std::size_t epoch_ = 0;
};

}  // namespace demosel
