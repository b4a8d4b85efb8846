#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "demosel/encoding.hpp"

namespace demosel {

/// Ordered combination of distinct candidate indices with its log-probabilities.
struct SelectionSequence {
  std::vector<std::size_t> indices;
  std::vector<double> step_log_probs;
  double joint_log_prob = 0.0;

  bool operator==(const SelectionSequence&) const = default;
};

struct StepDistribution {
  std::vector<double> probs;
  diff::Mask mask;  // nonzero = ineligible
};

/// A teacher-forced evaluation: plain values plus the differentiable joint.
struct ScoredSequence {
  SelectionSequence sequence;
  Var joint;
};

/// Owns the configuration and every learnable weight of the selection
/// policy: projection, role/positional embeddings, fusion encoder, decoder.
class PolicyModel {
 public:
  PolicyModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
    validate(config_);
    std::mt19937_64 rng(seed);
    encoding::add_parameters(params_, config_, rng);
    params_.add_normal("dec.start", Shape{config_.d_model}, config_.init_std, rng);
    params_.add_normal("dec.pos", Shape{config_.max_steps, config_.d_model}, config_.init_std, rng);
    for (std::size_t l = 0; l < config_.decoder_layers; ++l) {
      nn::add_decoder_layer(params_, "dec.l" + std::to_string(l), config_.layer_shape(), config_.init_std, rng);
    }
    if (config_.learn_alpha) {
      params_.add("policy.log_alpha", Tensor::vector({std::log(std::max(config_.alpha_text, 1e-6)),
                                                      std::log(std::max(config_.alpha_image, 1e-6))}));
    }
  }

  const ModelConfig& config() const noexcept { return config_; }
  ModelConfig& mutable_config() noexcept { return config_; }
  ParameterStore& parameters() noexcept { return params_; }
  const ParameterStore& parameters() const noexcept { return params_; }

  EncodedQuery encode(const Query& query, const CandidatePool& pool) const {
    if (pool.size() > config_.max_slots) {
      throw CapacityError("pool of " + std::to_string(pool.size()) + " exceeds positional table of " +
                          std::to_string(config_.max_slots));
    }
    return encoding::encode(params_, config_, query, pool);
  }

  /// (alpha_text, alpha_image) as scalars; learnable ones stay positive via exp.
  std::pair<Var, Var> alphas() const {
    if (config_.learn_alpha) {
      const Var a = diff::exp(params_["policy.log_alpha"]);
      return {diff::pick(a, 0), diff::pick(a, 1)};
    }
    return {Var::constant(Tensor::scalar(config_.alpha_text)), Var::constant(Tensor::scalar(config_.alpha_image))};
  }

 private:
  ModelConfig config_;
  ParameterStore params_;
};

namespace policy {

/// Decoder input rows: the start token, then one re-embedded token per selected
/// demonstration (mean of its projected text and image features), each with its
/// decoding-position embedding.
inline Var decoder_inputs(const PolicyModel& model, const EncodedQuery& enc, std::span<const std::size_t> prefix) {
  const auto& ps = model.parameters();
  const Var& pos = ps["dec.pos"];
  if (prefix.size() + 1 > pos.rows()) {
    throw CapacityError("decoding position " + std::to_string(prefix.size()) + " exceeds table of " +
                        std::to_string(pos.rows()));
  }
  std::vector<std::size_t> ids(prefix.begin(), prefix.end());
  std::vector<std::size_t> positions(prefix.size() + 1);
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;
  Var start = diff::reshape(ps["dec.start"], Shape{1, model.config().d_model});
  Var tokens = start;
  if (!ids.empty()) {
    const Var selected =
        diff::scale(diff::add(diff::gather_rows(enc.candidate_text, ids), diff::gather_rows(enc.candidate_image, ids)), 0.5);
    tokens = diff::concat_rows({start, selected});
  }
  return diff::add(tokens, diff::gather_rows(pos, positions));
}

/// Decoder outputs for every prefix length 0..len(prefix): row i is the state
/// used to choose the (i+1)-th demonstration. Causal masking makes row i depend
/// only on the first i selections.
inline Var decode_states(const PolicyModel& model, const EncodedQuery& enc, std::span<const std::size_t> prefix) {
  const auto& c = model.config();
  Var x = decoder_inputs(model, enc, prefix);
  for (std::size_t l = 0; l < c.decoder_layers; ++l) {
    x = nn::decoder_layer(model.parameters(), "dec.l" + std::to_string(l), x, enc.memory.at(l), c.heads);
  }
  return x;
}

/// Decoder state for the next position after `partial`. In the
/// non-autoregressive variant the state ignores the partial sequence.
inline Var decode_state(const PolicyModel& model, const EncodedQuery& enc, std::span<const std::size_t> partial,
                        std::size_t m) {
  if (partial.size() >= m) {
    throw ContractError("partial sequence already has " + std::to_string(partial.size()) + " of " +
                        std::to_string(m) + " entries");
  }
  if (!model.config().autoregressive) return diff::row(decode_states(model, enc, {}), 0);
  const Var states = decode_states(model, enc, partial);
  return diff::row(states, states.rows() - 1);
}

/// logit_j = alpha_t cos(state, text_j) + alpha_i cos(state, image_j).
inline Var step_logits(const PolicyModel& model, const Var& state, const EncodedQuery& enc) {
  for (double v : state.value().data()) {
    if (!std::isfinite(v)) throw DegenerateInputError("decoder state is not finite");
  }
  const auto [alpha_t, alpha_i] = model.alphas();
  return diff::add(diff::scale_by(diff::cosine_rows(state, enc.candidate_text), alpha_t),
                   diff::scale_by(diff::cosine_rows(state, enc.candidate_image), alpha_i));
}

/// Softmax over eligible logits at the given temperature; masked entries are 0.
inline StepDistribution step_distribution(std::span<const double> logits, const diff::Mask& mask, double temperature) {
  diff::kernels::check_temperature(temperature);
  if (mask.size() != logits.size()) throw DimensionError("step_distribution: mask length does not match logits");
  if (std::all_of(mask.begin(), mask.end(), [](char m) { return m != 0; })) {
    throw ExhaustedPoolError("every candidate is masked");
  }
  StepDistribution out{std::vector<double>(logits.size()), mask};
  diff::kernels::softmax_row(logits, out.probs, temperature, mask.data());
  return out;
}

inline diff::Mask selection_mask(std::size_t n, std::span<const std::size_t> selected) {
  diff::Mask mask(n, 0);
  for (std::size_t i : selected) mask.at(i) = 1;
  return mask;
}

inline void check_indices(std::span<const std::size_t> indices, std::size_t n) {
  std::vector<char> seen(n, 0);
  for (std::size_t i : indices) {
    if (i >= n) throw ContractError("candidate index " + std::to_string(i) + " out of range for pool of " + std::to_string(n));
    if (seen[i]) throw ContractError("candidate index " + std::to_string(i) + " repeated in selection");
    seen[i] = 1;
  }
}

/// Teacher-forced joint log-probability of an ordered selection; the returned
/// Var is differentiable with respect to every model parameter.
inline ScoredSequence sequence_log_prob(const PolicyModel& model, const EncodedQuery& enc,
                                        std::span<const std::size_t> indices, double temperature) {
  diff::kernels::check_temperature(temperature);
  const std::size_t n = enc.pool_size();
  check_indices(indices, n);
  ScoredSequence out;
  out.sequence.indices.assign(indices.begin(), indices.end());
  if (indices.empty()) {
    out.joint = Var::constant(Tensor::scalar(0.0));
    return out;
  }
  const bool ar = model.config().autoregressive;
  const Var states = ar ? decode_states(model, enc, indices.first(indices.size() - 1)) : decode_states(model, enc, {});
  std::vector<Var> terms;
  terms.reserve(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const Var state = diff::row(states, ar ? k : 0);
    const Var logits = step_logits(model, state, enc);
    const diff::Mask mask = selection_mask(n, indices.first(k));
    const Var lp = diff::pick(diff::log_softmax(logits, temperature, &mask), indices[k]);
    out.sequence.step_log_probs.push_back(lp.item());
    terms.push_back(lp);
  }
  out.joint = diff::add_scalars(terms);
  out.sequence.joint_log_prob = out.joint.item();
  return out;
}

/// Log-probabilities of every candidate as the next pick after `prefix`
/// (-inf for already-selected ones). Value-only, no tape.
inline std::vector<double> next_log_probs(const PolicyModel& model, const EncodedQuery& enc,
                                          std::span<const std::size_t> prefix, std::size_t m, double temperature) {
  diff::NoGradGuard guard;
  const Var state = decode_state(model, enc, prefix, m);
  const Var logits = step_logits(model, state, enc);
  const diff::Mask mask = selection_mask(enc.pool_size(), prefix);
  std::vector<double> out(enc.pool_size());
  diff::kernels::log_softmax_row(logits.value().data(), out, temperature, mask.data());
  return out;
}

/// Picks the unmasked argmax logit at each step; ties go to the lowest index.
inline SelectionSequence greedy_decode(const PolicyModel& model, const EncodedQuery& enc, std::size_t m,
                                       double temperature = 1.0) {
  const std::size_t n = enc.pool_size();
  if (n < m) throw ContractError("pool of " + std::to_string(n) + " cannot supply " + std::to_string(m) + " picks");
  diff::NoGradGuard guard;
  SelectionSequence seq;
  for (std::size_t step = 0; step < m; ++step) {
    const Var state = decode_state(model, enc, seq.indices, m);
    const Var logits = step_logits(model, state, enc);
    const diff::Mask mask = selection_mask(n, seq.indices);
    std::size_t best = n;
    for (std::size_t j = 0; j < n; ++j) {
      if (mask[j]) continue;
      if (best == n || logits.value()[j] > logits.value()[best]) best = j;
    }
    std::vector<double> lp(n);
    diff::kernels::log_softmax_row(logits.value().data(), lp, temperature, mask.data());
    seq.indices.push_back(best);
    seq.step_log_probs.push_back(lp[best]);
    seq.joint_log_prob += lp[best];
  }
  return seq;
}

}  // namespace policy

}  // namespace demosel
