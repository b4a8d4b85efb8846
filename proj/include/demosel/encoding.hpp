#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "demosel/diffcore.hpp"
#include "demosel/transformer.hpp"

namespace demosel {

using diff::ParameterStore;
using diff::Shape;
using diff::Tensor;
using diff::Var;

enum class Modality : std::uint8_t { text, image };

inline const char* to_string(Modality m) { return m == Modality::text ? "text" : "image"; }

struct FeatureVector {
  std::vector<double> values;
  Modality modality = Modality::text;
};

/// One (text, images, answer) item. Queries and demonstrations share this
/// shape; `text` is an optional synthetic text field used by lexical baselines.
struct Item {
  std::string id;
  FeatureVector text_feature;
  std::vector<FeatureVector> image_features;
  std::string answer;
  std::string text;
};

using Query = Item;
using Demonstration = Item;

struct CandidatePool {
  std::vector<Demonstration> demos;

  std::size_t size() const noexcept { return demos.size(); }
  const Demonstration& operator[](std::size_t i) const { return demos.at(i); }
};

/// Architecture and scoring knobs shared by the encoder and the policy.
struct ModelConfig {
  std::size_t feature_dim = 32;  // provider dimension d_e
  std::size_t d_model = 64;
  std::size_t encoder_layers = 2;
  std::size_t decoder_layers = 2;
  std::size_t heads = 4;
  std::size_t ff_dim = 128;
  std::size_t max_slots = 64;  // positional table size for candidates
  std::size_t max_steps = 16;  // decoder positional table size
  double alpha_text = 0.5;
  double alpha_image = 0.5;
  bool learn_alpha = false;
  bool autoregressive = true;  // false: every step scores from the start state
  double init_std = 0.02;

  nn::LayerShape layer_shape() const { return {d_model, heads, ff_dim}; }
};

inline void validate(const ModelConfig& c) {
  nn::validate(c.layer_shape());
  if (c.feature_dim == 0) throw ConfigError("feature_dim must be positive");
  if (c.max_slots == 0 || c.max_steps == 0) throw ConfigError("positional tables must be non-empty");
  if (c.alpha_text < 0.0 || c.alpha_image < 0.0) throw ConfigError("alpha weights must be nonnegative");
  if (!(c.alpha_text + c.alpha_image > 0.0)) throw ConfigError("alpha_text + alpha_image must be positive");
  if (!(c.init_std > 0.0)) throw ConfigError("init_std must be positive");
}

/// Which item and modality a row of the interactive feature matrix holds.
struct TokenRef {
  static constexpr int kQuery = -1;
  int item = kQuery;  // kQuery or a candidate index
  Modality modality = Modality::text;

  bool operator==(const TokenRef&) const = default;
};

struct InteractiveFeatures {
  Var matrix;  // [tokens x d_model]
  std::vector<TokenRef> token_map;
};

/// Everything the policy needs about one (query, pool) pair after encoding.
struct EncodedQuery {
  InteractiveFeatures features;
  Var candidate_text;   // [n x d_model], projected candidate text features
  Var candidate_image;  // [n x d_model], projected (pooled) image features or the placeholder
  std::vector<nn::KeyValue> memory;  // per decoder layer cross-attention keys/values over M

  std::size_t pool_size() const { return candidate_text.rows(); }
};

namespace encoding {

inline void add_parameters(ParameterStore& ps, const ModelConfig& c, std::mt19937_64& rng) {
  const double s = c.init_std;
  ps.add_normal("enc.proj.w", Shape{c.feature_dim, c.d_model}, s, rng);
  ps.add("enc.proj.b", Tensor(Shape{c.d_model}));
  ps.add_normal("enc.role.text", Shape{c.d_model}, s, rng);
  ps.add_normal("enc.role.image", Shape{c.d_model}, s, rng);
  ps.add_normal("enc.pos", Shape{c.max_slots, c.d_model}, s, rng);
  ps.add_normal("enc.no_image", Shape{c.d_model}, s, rng);
  for (std::size_t l = 0; l < c.encoder_layers; ++l) {
    nn::add_encoder_layer(ps, "enc.l" + std::to_string(l), c.layer_shape(), s, rng);
  }
}

/// Learned affine adapter from provider width d_e to d_model.
inline Var project_features(const ParameterStore& ps, const FeatureVector& raw) {
  const Var& w = ps["enc.proj.w"];
  if (raw.values.size() != w.rows()) {
    throw ConfigError("feature vector has dimension " + std::to_string(raw.values.size()) + ", expected " +
                      std::to_string(w.rows()));
  }
  for (double v : raw.values) {
    if (!std::isfinite(v)) throw ContractError("feature vector contains a non-finite value");
  }
  const Var x = Var::constant(Tensor(Shape{1, raw.values.size()}, raw.values));
  return diff::reshape(diff::add_bias(diff::matmul(x, w), ps["enc.proj.b"]), Shape{w.cols()});
}

/// Mean of an item's image features, or nothing when it has none.
inline std::optional<FeatureVector> pooled_image(const Item& item) {
  if (item.image_features.empty()) return std::nullopt;
  FeatureVector out{std::vector<double>(item.image_features.front().values.size(), 0.0), Modality::image};
  for (const auto& f : item.image_features) {
    if (f.values.size() != out.values.size()) throw ConfigError("item '" + item.id + "' has ragged image features");
    for (std::size_t i = 0; i < f.values.size(); ++i) out.values[i] += f.values[i];
  }
  for (double& v : out.values) v /= static_cast<double>(item.image_features.size());
  return out;
}

inline Var project_image(const ParameterStore& ps, const Item& item) {
  if (auto pooled = pooled_image(item)) return project_features(ps, *pooled);
  return ps["enc.no_image"];
}

/// Token layout [q_text, q_image, c0_text, c0_image, c1_text, ...].
inline std::vector<TokenRef> token_layout(std::size_t pool_size) {
  std::vector<TokenRef> map;
  map.reserve(2 * (pool_size + 1));
  map.push_back({TokenRef::kQuery, Modality::text});
  map.push_back({TokenRef::kQuery, Modality::image});
  for (std::size_t k = 0; k < pool_size; ++k) {
    map.push_back({static_cast<int>(k), Modality::text});
    map.push_back({static_cast<int>(k), Modality::image});
  }
  return map;
}

/// Query tokens receive the functional embedding only; candidate k's tokens
/// receive the functional embedding plus positional slot k.
inline Var apply_role_position(const ParameterStore& ps, const Var& tokens, const std::vector<TokenRef>& token_map) {
  if (tokens.rows() != token_map.size() || tokens.value().rank() != 2) {
    throw DimensionError("apply_role_position: token matrix does not match the token map");
  }
  const Var& pos = ps["enc.pos"];
  std::vector<Var> rows;
  rows.reserve(token_map.size());
  for (std::size_t r = 0; r < token_map.size(); ++r) {
    const TokenRef& ref = token_map[r];
    Var offset = ref.modality == Modality::text ? ps["enc.role.text"] : ps["enc.role.image"];
    if (ref.item != TokenRef::kQuery) {
      const auto slot = static_cast<std::size_t>(ref.item);
      if (slot >= pos.rows()) {
        throw CapacityError("candidate slot " + std::to_string(slot) + " exceeds positional table of " +
                            std::to_string(pos.rows()));
      }
      offset = diff::add(offset, diff::row(pos, slot));
    }
    rows.push_back(offset);
  }
  return diff::add(tokens, diff::concat_rows(rows));
}

/// Fusion encoder: stacked full self-attention layers, one output row per token.
inline InteractiveFeatures fuse(const ParameterStore& ps, const ModelConfig& c, const Var& tokens,
                                std::vector<TokenRef> token_map) {
  const bool has_candidate =
      std::any_of(token_map.begin(), token_map.end(), [](const TokenRef& t) { return t.item != TokenRef::kQuery; });
  if (tokens.rows() < 2 || !has_candidate) {
    throw ContractError("fuse needs the query tokens and at least one candidate token");
  }
  if (tokens.rows() != token_map.size()) throw DimensionError("fuse: token matrix does not match the token map");
  Var x = tokens;
  for (std::size_t l = 0; l < c.encoder_layers; ++l) x = nn::encoder_layer(ps, "enc.l" + std::to_string(l), x, c.heads);
  return {x, std::move(token_map)};
}

/// Projects the raw tokens of a query and its pool, in token-layout order.
/// Items without images get the learned placeholder in their image row.
inline Var raw_tokens(const ParameterStore& ps, const Query& query, const CandidatePool& pool) {
  const Var& w = ps["enc.proj.w"];
  const std::size_t de = w.rows();
  const std::size_t tokens = 2 * (pool.size() + 1);
  Tensor x(Shape{tokens, de});
  std::vector<std::size_t> missing_image;
  auto put = [&](std::size_t r, const FeatureVector& f) {
    if (f.values.size() != de) {
      throw ConfigError("feature vector has dimension " + std::to_string(f.values.size()) + ", expected " +
                        std::to_string(de));
    }
    for (std::size_t j = 0; j < de; ++j) {
      if (!std::isfinite(f.values[j])) throw ContractError("feature vector contains a non-finite value");
      x[r * de + j] = f.values[j];
    }
  };
  auto put_item = [&](std::size_t r, const Item& item) {
    put(r, item.text_feature);
    if (auto pooled = pooled_image(item)) {
      put(r + 1, *pooled);
    } else {
      missing_image.push_back(r + 1);
    }
  };
  put_item(0, query);
  for (std::size_t k = 0; k < pool.size(); ++k) put_item(2 + 2 * k, pool.demos[k]);

  Var projected = diff::add_bias(diff::matmul(Var::constant(std::move(x)), w), ps["enc.proj.b"]);
  if (missing_image.empty()) return projected;
  std::vector<Var> rows;
  rows.reserve(tokens);
  std::size_t next_missing = 0;
  for (std::size_t r = 0; r < tokens; ++r) {
    if (next_missing < missing_image.size() && missing_image[next_missing] == r) {
      rows.push_back(ps["enc.no_image"]);
      ++next_missing;
    } else {
      rows.push_back(diff::row(projected, r));
    }
  }
  return diff::concat_rows(rows);
}

/// Full encoding pass: projection, role/position offsets, fusion, and the
/// per-decoder-layer cross-attention memory.
inline EncodedQuery encode(const ParameterStore& ps, const ModelConfig& c, const Query& query,
                           const CandidatePool& pool) {
  if (pool.size() == 0) throw ContractError("cannot encode against an empty candidate pool");
  const Var raw = raw_tokens(ps, query, pool);
  auto layout = token_layout(pool.size());
  const Var tokens = apply_role_position(ps, raw, layout);
  EncodedQuery out;
  out.features = fuse(ps, c, tokens, std::move(layout));
  std::vector<std::size_t> text_rows, image_rows;
  for (std::size_t k = 0; k < pool.size(); ++k) {
    text_rows.push_back(2 + 2 * k);
    image_rows.push_back(3 + 2 * k);
  }
  out.candidate_text = diff::gather_rows(raw, text_rows);
  out.candidate_image = diff::gather_rows(raw, image_rows);
  for (std::size_t l = 0; l < c.decoder_layers; ++l) {
    out.memory.push_back(nn::project_key_value(ps, "dec.l" + std::to_string(l) + ".cross", out.features.matrix));
  }
  return out;
}

}  // namespace encoding

}  // namespace demosel
