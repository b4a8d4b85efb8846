#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "demosel/policy.hpp"

namespace demosel {

/// A partial combination with its log joint probability.
struct BeamItem {
  double log_score = 0.0;
  SelectionSequence partial;
};

struct Beam {
  std::vector<BeamItem> items;
};

struct SearchConfig {
  std::size_t m = 2;
  std::size_t width = 9;
  std::size_t c = 4;
  double temperature = 1.0;
};

namespace search {

/// Higher score first; equal scores go to the lexicographically smaller sequence.
inline bool ranks_before(const BeamItem& a, const BeamItem& b) {
  if (a.log_score != b.log_score) return a.log_score > b.log_score;
  return a.partial.indices < b.partial.indices;
}

/// Every (item, eligible candidate) child, scored parent + step log-prob.
inline std::vector<BeamItem> expand(const Beam& beam, const PolicyModel& model, const EncodedQuery& enc,
                                    std::size_t m, double temperature) {
  std::vector<BeamItem> children;
  const std::size_t n = enc.pool_size();
  for (const auto& item : beam.items) {
    const auto& prefix = item.partial.indices;
    const std::vector<double> lp = policy::next_log_probs(model, enc, prefix, m, temperature);
    for (std::size_t j = 0; j < n; ++j) {
      if (std::find(prefix.begin(), prefix.end(), j) != prefix.end()) continue;
      BeamItem child = item;
      child.partial.indices.push_back(j);
      child.partial.step_log_probs.push_back(lp[j]);
      child.partial.joint_log_prob += lp[j];
      child.log_score = item.log_score + lp[j];
      children.push_back(std::move(child));
    }
  }
  return children;
}

/// Normalized selection weights exp(s - max) / sum, computed in log space.
inline std::vector<double> normalized_weights(const std::vector<BeamItem>& items) {
  double peak = -std::numeric_limits<double>::infinity();
  for (const auto& it : items) peak = std::max(peak, it.log_score);
  std::vector<double> w(items.size());
  double total = 0.0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    w[i] = std::exp(items[i].log_score - peak);
    total += w[i];
  }
  for (double& v : w) v /= total;
  return w;
}

/// Draws `width` distinct children without replacement, proportionally to their
/// normalized scores. Without an RNG the top-`width` by score are kept.
inline Beam sample_beam(std::vector<BeamItem> expanded, std::size_t width, std::mt19937_64* rng) {
  if (expanded.empty()) throw ContractError("sample_beam: nothing to sample from");
  Beam out;
  if (expanded.size() <= width) {
    out.items = std::move(expanded);
    std::sort(out.items.begin(), out.items.end(), ranks_before);
    return out;
  }
  if (!rng) {
    std::partial_sort(expanded.begin(), expanded.begin() + static_cast<std::ptrdiff_t>(width), expanded.end(),
                      ranks_before);
    expanded.resize(width);
    out.items = std::move(expanded);
    return out;
  }
  std::vector<double> weights = normalized_weights(expanded);
  std::vector<char> taken(expanded.size(), 0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  for (std::size_t draw = 0; draw < width; ++draw) {
    double remaining = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (!taken[i]) remaining += weights[i];
    }
    std::size_t chosen = weights.size();
    if (remaining > 0.0) {
      const double target = uniform(*rng) * remaining;
      double cumulative = 0.0;
      for (std::size_t i = 0; i < weights.size(); ++i) {
        if (taken[i]) continue;
        cumulative += weights[i];
        chosen = i;
        if (target < cumulative) break;
      }
    } else {
      // All remaining mass underflowed; fall back to score order.
      for (std::size_t i = 0; i < expanded.size(); ++i) {
        if (!taken[i] && (chosen == weights.size() || ranks_before(expanded[i], expanded[chosen]))) chosen = i;
      }
    }
    taken[chosen] = 1;
    out.items.push_back(expanded[chosen]);
  }
  std::sort(out.items.begin(), out.items.end(), ranks_before);
  return out;
}

/// Runs depths 1..m and returns the c best distinct complete sequences of the
/// final beam. A null RNG gives the deterministic (top-width) variant.
inline std::vector<SelectionSequence> stochastic_beam_search(const PolicyModel& model, const EncodedQuery& enc,
                                                             const SearchConfig& config, std::mt19937_64* rng) {
  if (config.c == 0) throw ConfigError("c must be at least 1");
  if (config.width < config.c) {
    throw ConfigError("beam width (" + std::to_string(config.width) + ") must be at least c (" +
                      std::to_string(config.c) + ")");
  }
  if (enc.pool_size() < config.m) {
    throw ContractError("pool of " + std::to_string(enc.pool_size()) + " cannot supply " + std::to_string(config.m) +
                        " picks");
  }
  diff::kernels::check_temperature(config.temperature);
  Beam beam;
  beam.items.push_back(BeamItem{});
  for (std::size_t depth = 0; depth < config.m; ++depth) {
    beam = sample_beam(expand(beam, model, enc, config.m, config.temperature), config.width, rng);
  }
  std::sort(beam.items.begin(), beam.items.end(), ranks_before);
  std::vector<SelectionSequence> out;
  for (std::size_t i = 0; i < beam.items.size() && out.size() < config.c; ++i) out.push_back(beam.items[i].partial);
  return out;
}

}  // namespace search

}  // namespace demosel
