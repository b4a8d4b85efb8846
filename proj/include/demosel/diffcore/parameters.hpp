#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "demosel/diffcore/graph.hpp"

namespace demosel::diff {

/// Named, insertion-ordered set of trainable leaves.
class ParameterStore {
 public:
  Var& add(const std::string& name, Tensor value) {
    if (index_.count(name)) throw ContractError("duplicate parameter name '" + name + "'");
    index_[name] = params_.size();
    params_.push_back(Var::parameter(std::move(value), name));
    return params_.back();
  }

  Var& add_normal(const std::string& name, Shape shape, double stddev, std::mt19937_64& rng) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& v : t.storage()) v = dist(rng);
    return add(name, std::move(t));
  }

  const Var& operator[](const std::string& name) const { return params_.at(lookup(name)); }
  Var& operator[](const std::string& name) { return params_.at(lookup(name)); }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::vector<Var>& all() noexcept { return params_; }
  const std::vector<Var>& all() const noexcept { return params_; }
  std::size_t size() const noexcept { return params_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  // Deep copy: fresh leaves with identical values and zeroed gradients.
  ParameterStore clone() const {
    ParameterStore out;
    for (const auto& p : params_) out.add(p.name(), p.value());
    return out;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
    return it->second;
  }

  std::vector<Var> params_;
  std::map<std::string, std::size_t> index_;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Adaptive moments with decoupled weight decay. Moments are keyed by
/// parameter name so they survive checkpoint round-trips.
class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  const AdamWConfig& config() const noexcept { return config_; }
  std::uint64_t step_count() const noexcept { return step_; }
  void set_step_count(std::uint64_t s) noexcept { step_ = s; }

  std::map<std::string, std::vector<double>>& first_moments() noexcept { return m_; }
  std::map<std::string, std::vector<double>>& second_moments() noexcept { return v_; }
  const std::map<std::string, std::vector<double>>& first_moments() const noexcept { return m_; }
  const std::map<std::string, std::vector<double>>& second_moments() const noexcept { return v_; }

  /// One update from the accumulated gradients. Gradients are checked for
  /// finiteness before any parameter moves.
  void step(ParameterStore& params, double lr) {
    for (const auto& p : params.all()) {
      for (double g : p.grad()) {
        if (!std::isfinite(g)) throw TrainingAbort("non-finite gradient in parameter '" + p.name() + "'");
      }
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
    for (auto& p : params.all()) {
      auto& m = m_[p.name()];
      auto& v = v_[p.name()];
      if (m.size() != p.size()) m.assign(p.size(), 0.0);
      if (v.size() != p.size()) v.assign(p.size(), 0.0);
      auto& w = p.mutable_value().storage();
      const auto& g = p.grad();
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
        v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
        const double m_hat = m[i] / bc1;
        const double v_hat = v[i] / bc2;
        w[i] -= lr * config_.weight_decay * w[i];
        w[i] -= lr * m_hat / (std::sqrt(v_hat) + config_.eps);
      }
    }
  }

 private:
  AdamWConfig config_;
  std::uint64_t step_ = 0;
  std::map<std::string, std::vector<double>> m_;
  std::map<std::string, std::vector<double>> v_;
};

}  // namespace demosel::diff
