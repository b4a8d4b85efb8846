#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "demosel/encoding.hpp"

namespace demosel {

/// Source of per-modality features for items, keyed by id.
class FeatureProvider {
 public:
  virtual ~FeatureProvider() = default;
  virtual std::size_t dimension() const = 0;
  virtual Item item(const std::string& id) const = 0;
};

/// Seeded stand-in for a pretrained multi-modal encoder: unit-norm Gaussian
/// features that depend only on (seed, id, modality, image index).
class SyntheticFeatureProvider : public FeatureProvider {
 public:
  SyntheticFeatureProvider(std::size_t dimension, std::uint64_t seed, std::size_t images_per_item = 1)
      : dim_(dimension), seed_(seed), images_(images_per_item) {
    if (dim_ == 0) throw ConfigError("feature dimension must be positive");
  }

  std::size_t dimension() const override { return dim_; }

  Item item(const std::string& id) const override {
    Item out;
    out.id = id;
    out.text_feature = {draw(id, 0), Modality::text};
    for (std::size_t k = 0; k < images_; ++k) out.image_features.push_back({draw(id, k + 1), Modality::image});
    out.answer = "answer-" + id;
    return out;
  }

 private:
  std::vector<double> draw(const std::string& id, std::size_t stream) const {
    // FNV-1a keeps the mapping stable across builds, unlike std::hash.
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : id) {
      h ^= ch;
      h *= 1099511628211ULL;
    }
    std::mt19937_64 rng(seed_ ^ h ^ (0x9e3779b97f4a7c15ULL * (stream + 1)));
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<double> v(dim_);
    double sq = 0.0;
    for (double& x : v) {
      x = dist(rng);
      sq += x * x;
    }
    for (double& x : v) x /= std::sqrt(sq);
    return v;
  }

  std::size_t dim_;
  std::uint64_t seed_;
  std::size_t images_;
};

/// Items read from JSON Lines, one record per line:
/// {"id": str, "text_feat": [..], "image_feats": [[..], ..], "answer": str}
class JsonlFeatureProvider : public FeatureProvider {
 public:
  explicit JsonlFeatureProvider(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open feature file '" + path + "'");
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      add(parse_record(line, path + ":" + std::to_string(line_no)));
    }
  }

  explicit JsonlFeatureProvider(std::vector<Item> items) {
    for (auto& it : items) add(std::move(it));
  }

  std::size_t dimension() const override { return dim_; }

  Item item(const std::string& id) const override {
    auto it = items_.find(id);
    if (it == items_.end()) throw ContractError("no features for item '" + id + "'");
    return it->second;
  }

  const std::vector<std::string>& ids() const noexcept { return order_; }

  static Item parse_record(const std::string& line, const std::string& where) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(where + ": " + e.what(), e.byte);
    }
    auto field = [&](const char* key) -> const nlohmann::json& {
      if (!j.contains(key)) throw ConfigError(where + ": missing field '" + key + "'");
      return j.at(key);
    };
    auto vec = [&](const nlohmann::json& a, const std::string& name) {
      if (!a.is_array()) throw ConfigError(where + ": field '" + name + "' must be an array of numbers");
      std::vector<double> v;
      for (const auto& x : a) {
        if (!x.is_number()) throw ConfigError(where + ": field '" + name + "' must be an array of numbers");
        v.push_back(x.get<double>());
      }
      return v;
    };
    Item out;
    if (!field("id").is_string()) throw ConfigError(where + ": field 'id' must be a string");
    out.id = j["id"].get<std::string>();
    out.text_feature = {vec(field("text_feat"), "text_feat"), Modality::text};
    const auto& imgs = field("image_feats");
    if (!imgs.is_array()) throw ConfigError(where + ": field 'image_feats' must be an array of arrays");
    for (std::size_t k = 0; k < imgs.size(); ++k) {
      out.image_features.push_back({vec(imgs[k], "image_feats[" + std::to_string(k) + "]"), Modality::image});
    }
    if (!field("answer").is_string()) throw ConfigError(where + ": field 'answer' must be a string");
    out.answer = j["answer"].get<std::string>();
    if (j.contains("text") && j["text"].is_string()) out.text = j["text"].get<std::string>();
    return out;
  }

 private:
  void add(Item item) {
    const std::size_t d = item.text_feature.values.size();
    if (items_.empty()) dim_ = d;
    if (d != dim_) throw ConfigError("item '" + item.id + "' has dimension " + std::to_string(d) + ", expected " + std::to_string(dim_));
    for (const auto& f : item.image_features) {
      if (f.values.size() != dim_) throw ConfigError("item '" + item.id + "' has an image feature of the wrong dimension");
    }
    if (items_.count(item.id)) throw ConfigError("duplicate item id '" + item.id + "'");
    order_.push_back(item.id);
    items_.emplace(item.id, std::move(item));
  }

  std::size_t dim_ = 0;
  std::map<std::string, Item> items_;
  std::vector<std::string> order_;
};

}  // namespace demosel
