#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "demosel/diffcore.hpp"

namespace demosel::nn {

using diff::Mask;
using diff::ParameterStore;
using diff::Shape;
using diff::Tensor;
using diff::Var;

struct LayerShape {
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t ff_dim = 128;
};

inline void validate(const LayerShape& s) {
  if (s.d_model == 0 || s.heads == 0 || s.ff_dim == 0) throw ConfigError("transformer dimensions must be positive");
  if (s.d_model % s.heads != 0) {
    throw ConfigError("d_model (" + std::to_string(s.d_model) + ") must be divisible by heads (" +
                      std::to_string(s.heads) + ")");
  }
}

inline void add_linear(ParameterStore& ps, const std::string& prefix, std::size_t in, std::size_t out, double stddev,
                       std::mt19937_64& rng) {
  ps.add_normal(prefix + ".w", Shape{in, out}, stddev, rng);
  ps.add(prefix + ".b", Tensor(Shape{out}));
}

inline void add_norm(ParameterStore& ps, const std::string& prefix, std::size_t width) {
  ps.add(prefix + ".gain", Tensor(Shape{width}, 1.0));
  ps.add(prefix + ".bias", Tensor(Shape{width}));
}

inline void add_attention(ParameterStore& ps, const std::string& prefix, std::size_t d, double stddev,
                          std::mt19937_64& rng) {
  for (const char* part : {"q", "k", "v", "o"}) add_linear(ps, prefix + "." + part, d, d, stddev, rng);
}

inline void add_encoder_layer(ParameterStore& ps, const std::string& prefix, const LayerShape& s, double stddev,
                              std::mt19937_64& rng) {
  add_attention(ps, prefix + ".attn", s.d_model, stddev, rng);
  add_norm(ps, prefix + ".norm1", s.d_model);
  add_linear(ps, prefix + ".ff1", s.d_model, s.ff_dim, stddev, rng);
  add_linear(ps, prefix + ".ff2", s.ff_dim, s.d_model, stddev, rng);
  add_norm(ps, prefix + ".norm2", s.d_model);
}

inline void add_decoder_layer(ParameterStore& ps, const std::string& prefix, const LayerShape& s, double stddev,
                              std::mt19937_64& rng) {
  add_attention(ps, prefix + ".self", s.d_model, stddev, rng);
  add_norm(ps, prefix + ".norm1", s.d_model);
  add_attention(ps, prefix + ".cross", s.d_model, stddev, rng);
  add_norm(ps, prefix + ".norm2", s.d_model);
  add_linear(ps, prefix + ".ff1", s.d_model, s.ff_dim, stddev, rng);
  add_linear(ps, prefix + ".ff2", s.ff_dim, s.d_model, stddev, rng);
  add_norm(ps, prefix + ".norm3", s.d_model);
}

inline Var linear(const ParameterStore& ps, const std::string& prefix, const Var& x) {
  return diff::add_bias(diff::matmul(x, ps[prefix + ".w"]), ps[prefix + ".b"]);
}

inline Var norm(const ParameterStore& ps, const std::string& prefix, const Var& x) {
  return diff::layer_norm(x, ps[prefix + ".gain"], ps[prefix + ".bias"]);
}

inline Var feed_forward(const ParameterStore& ps, const std::string& prefix, const Var& x) {
  return linear(ps, prefix + ".ff2", diff::gelu(linear(ps, prefix + ".ff1", x)));
}

/// Projected keys and values of an attention source; cacheable across calls
/// that attend over the same memory.
struct KeyValue {
  Var keys;
  Var values;
};

inline KeyValue project_key_value(const ParameterStore& ps, const std::string& prefix, const Var& source) {
  return {linear(ps, prefix + ".k", source), linear(ps, prefix + ".v", source)};
}

/// Scaled dot-product multi-head attention. `mask` has one entry per
/// (query, key) score; nonzero blocks that pair.
inline Var attend(const ParameterStore& ps, const std::string& prefix, const Var& queries, const KeyValue& kv,
                  std::size_t heads, const Mask* mask = nullptr) {
  const std::size_t d = queries.cols();
  const std::size_t head_dim = d / heads;
  const Var q = linear(ps, prefix + ".q", queries);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  std::vector<Var> outputs;
  outputs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Var qh = diff::slice_cols(q, h * head_dim, head_dim);
    const Var kh = diff::slice_cols(kv.keys, h * head_dim, head_dim);
    const Var vh = diff::slice_cols(kv.values, h * head_dim, head_dim);
    const Var scores = diff::scale(diff::matmul(qh, diff::transpose(kh)), inv_sqrt);
    outputs.push_back(diff::matmul(diff::softmax(scores, 1.0, mask), vh));
  }
  const Var merged = heads == 1 ? outputs.front() : diff::concat_cols(outputs);
  return linear(ps, prefix + ".o", merged);
}

/// Post-norm encoder layer with full (unmasked) self-attention.
inline Var encoder_layer(const ParameterStore& ps, const std::string& prefix, const Var& x, std::size_t heads) {
  const KeyValue kv = project_key_value(ps, prefix + ".attn", x);
  Var h = norm(ps, prefix + ".norm1", diff::add(x, attend(ps, prefix + ".attn", x, kv, heads)));
  return norm(ps, prefix + ".norm2", diff::add(h, feed_forward(ps, prefix, h)));
}

inline Mask causal_mask(std::size_t len) {
  Mask m(len * len, 0);
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t j = i + 1; j < len; ++j) m[i * len + j] = 1;
  return m;
}

/// Post-norm decoder layer: causal self-attention, cross-attention over a
/// projected memory, feed-forward.
inline Var decoder_layer(const ParameterStore& ps, const std::string& prefix, const Var& x, const KeyValue& memory,
                         std::size_t heads) {
  const Mask causal = causal_mask(x.rows());
  const KeyValue self_kv = project_key_value(ps, prefix + ".self", x);
  Var h = norm(ps, prefix + ".norm1", diff::add(x, attend(ps, prefix + ".self", x, self_kv, heads, &causal)));
  h = norm(ps, prefix + ".norm2", diff::add(h, attend(ps, prefix + ".cross", h, memory, heads)));
  return norm(ps, prefix + ".norm3", diff::add(h, feed_forward(ps, prefix, h)));
}

}  // namespace demosel::nn
