#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "demosel/reinforce.hpp"

namespace demosel {

enum class TaskKind { planted_pair, similarity_trap, order_sensitive };

inline std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::planted_pair: return "planted-pair";
    case TaskKind::similarity_trap: return "similarity-trap";
    case TaskKind::order_sensitive: return "order-sensitive";
  }
  return "unknown";
}

inline TaskKind parse_task_kind(const std::string& s) {
  if (s == "planted-pair") return TaskKind::planted_pair;
  if (s == "similarity-trap") return TaskKind::similarity_trap;
  if (s == "order-sensitive") return TaskKind::order_sensitive;
  throw ConfigError("unknown task kind '" + s + "' (expected planted-pair, similarity-trap or order-sensitive)");
}

struct TaskSpec {
  TaskKind kind = TaskKind::planted_pair;
  std::size_t n = 8;
  std::size_t m = 2;
  std::size_t d_e = 32;
  std::size_t queries = 50;
  std::uint64_t seed = 0;

  bool operator==(const TaskSpec&) const = default;
};

/// Rewarded pair of one query. For order-sensitive tasks `first` must precede
/// `second`; otherwise order is irrelevant.
struct HiddenPair {
  std::size_t first = 0;
  std::size_t second = 0;
};

/// Reward 1 iff the selection contains both members of the query's hidden pair
/// (in order, for order-sensitive tasks). For m = 2 this is set equality.
inline double pair_reward(TaskKind kind, const HiddenPair& pair, std::span<const std::size_t> selection) {
  auto pos = [&](std::size_t idx) {
    return static_cast<std::size_t>(std::find(selection.begin(), selection.end(), idx) - selection.begin());
  };
  const std::size_t a = pos(pair.first), b = pos(pair.second);
  if (a == selection.size() || b == selection.size()) return 0.0;
  if (kind == TaskKind::order_sensitive) return a < b ? 1.0 : 0.0;
  return 1.0;
}

/// Synthetic stand-in for a VQA dataset plus a vision-language model: a shared
/// pool, queries with answers, and a hidden rewarded pair per query.
class SyntheticTask : public Environment {
 public:
  SyntheticTask(TaskSpec spec, CandidatePool pool, std::vector<Query> queries, std::vector<HiddenPair> hidden)
      : spec_(spec), pool_(std::move(pool)), queries_(std::move(queries)), hidden_(std::move(hidden)) {}

  const TaskSpec& spec() const noexcept { return spec_; }
  const CandidatePool& pool() const override { return pool_; }
  std::size_t query_count() const override { return queries_.size(); }
  const Query& query(std::size_t index) const override { return queries_.at(index); }
  const std::vector<Query>& queries() const noexcept { return queries_; }

  /// Test and audit access only; the policy never sees it.
  const HiddenPair& hidden(std::size_t index) const { return hidden_.at(index); }

  double reward(std::size_t query_index, std::span<const std::size_t> selection) const {
    policy::check_indices(selection, pool_.size());
    return pair_reward(spec_.kind, hidden_.at(query_index), selection);
  }

  std::string respond(std::size_t query_index, const SelectionSequence& selection) const override {
    return reward(query_index, selection.indices) > 0.0 ? queries_.at(query_index).answer : "unanswerable";
  }

 private:
  TaskSpec spec_;
  CandidatePool pool_;
  std::vector<Query> queries_;
  std::vector<HiddenPair> hidden_;
};

namespace envsim {

using Vec = std::vector<double>;

inline double dot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(const Vec& a) { return std::sqrt(dot(a, a)); }

inline Vec normalized(Vec v) {
  const double n = norm(v);
  for (double& x : v) x /= n;
  return v;
}

inline Vec gaussian(std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Vec v(d);
  for (double& x : v) x = dist(rng);
  return v;
}

inline Vec random_unit(std::size_t d, std::mt19937_64& rng) { return normalized(gaussian(d, rng)); }

/// normalize(base + noise * z / sqrt(d)), z standard normal.
inline Vec perturbed(const Vec& base, double noise, std::mt19937_64& rng) {
  Vec z = gaussian(base.size(), rng);
  Vec out = base;
  const double s = noise / std::sqrt(static_cast<double>(base.size()));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += s * z[i];
  return normalized(std::move(out));
}

inline Vec cosine_feature(const Item& item) {
  Vec avg = item.text_feature.values;
  if (!item.image_features.empty()) {
    const auto pooled = encoding::pooled_image(item);
    for (std::size_t i = 0; i < avg.size(); ++i) avg[i] = 0.5 * (avg[i] + pooled->values[i]);
  }
  return avg;
}

inline double cosine(const Vec& a, const Vec& b) {
  const double na = norm(a), nb = norm(b);
  if (na == 0.0 || nb == 0.0) throw DegenerateInputError("cosine of a zero vector");
  return dot(a, b) / (na * nb);
}

/// Whitespace-tokenized synthetic text: the signed indices of the four
/// largest-magnitude text-feature coordinates.
inline std::string synthetic_text(const Vec& text_feature) {
  std::vector<std::size_t> idx(text_feature.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const std::size_t k = std::min<std::size_t>(4, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      const double fa = std::abs(text_feature[a]), fb = std::abs(text_feature[b]);
                      return fa != fb ? fa > fb : a < b;
                    });
  std::ostringstream os;
  for (std::size_t i = 0; i < k; ++i) {
    if (i) os << ' ';
    os << 'd' << idx[i] << (text_feature[idx[i]] >= 0 ? 'p' : 'n');
  }
  return os.str();
}

inline Item make_item(std::string id, Vec text, Vec image, std::string answer) {
  Item item;
  item.id = std::move(id);
  item.text = synthetic_text(text);
  item.text_feature = {std::move(text), Modality::text};
  item.image_features.push_back({std::move(image), Modality::image});
  item.answer = std::move(answer);
  return item;
}

// Solves the small dense system A x = b in place (partial pivoting).
inline bool solve_linear(std::vector<Vec> a, Vec b, Vec& x) {
  const std::size_t n = b.size();
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
    if (std::abs(a[piv][col]) < 1e-12) return false;
    std::swap(a[piv], a[col]);
    std::swap(b[piv], b[col]);
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = a[r][col] / a[col][col];
      for (std::size_t c = col; c < n; ++c) a[r][c] -= f * a[col][c];
      b[r] -= f * b[col];
    }
  }
  x.resize(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = b[i] / a[i][i];
  return true;
}

/// Unit vector whose cosines with the (unit) anchors equal `targets`, plus a
/// random orthogonal remainder. Fails when the targets are infeasible.
inline bool vector_with_cosines(const std::vector<Vec>& anchors, const Vec& targets, std::mt19937_64& rng, Vec& out) {
  const std::size_t k = anchors.size();
  std::vector<Vec> gram(k, Vec(k));
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) gram[i][j] = dot(anchors[i], anchors[j]);
  Vec lambda;
  if (!solve_linear(gram, targets, lambda)) return false;
  const std::size_t d = anchors.front().size();
  Vec in_span(d, 0.0);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t t = 0; t < d; ++t) in_span[t] += lambda[i] * anchors[i][t];
  const double span_sq = dot(in_span, in_span);
  if (span_sq > 0.95) return false;
  Vec r = gaussian(d, rng);
  // Two Gram-Schmidt passes against the anchors for numerical safety.
  for (int pass = 0; pass < 2; ++pass) {
    std::vector<Vec> basis;
    for (const auto& a : anchors) {
      Vec b = a;
      for (const auto& e : basis) {
        const double p = dot(b, e);
        for (std::size_t t = 0; t < d; ++t) b[t] -= p * e[t];
      }
      const double nb = norm(b);
      if (nb < 1e-9) return false;
      for (double& v : b) v /= nb;
      basis.push_back(std::move(b));
    }
    for (const auto& e : basis) {
      const double p = dot(r, e);
      for (std::size_t t = 0; t < d; ++t) r[t] -= p * e[t];
    }
  }
  const double scale = std::sqrt(1.0 - span_sq) / norm(r);
  out = in_span;
  for (std::size_t t = 0; t < d; ++t) out[t] += scale * r[t];
  return true;
}

inline constexpr double kQueryNoise = 0.6;
inline constexpr double kLinkNoise = 0.3;
inline constexpr double kTwinNoise = 0.3;
inline constexpr double kTrapRewardedLo = 0.1, kTrapRewardedHi = 0.3;
inline constexpr double kTrapDistractorLo = 0.8, kTrapDistractorHi = 0.95;

inline void validate(const TaskSpec& s) {
  if (s.m < 1) throw ConfigError("task m must be at least 1");
  if (s.n < s.m) throw ConfigError("task n (" + std::to_string(s.n) + ") must be at least m (" + std::to_string(s.m) + ")");
  if (s.n < 2) throw ConfigError("task n must be at least 2 to hold a rewarded pair");
  if (s.d_e < 4) throw ConfigError("task d_e must be at least 4");
  if (s.queries == 0) throw ConfigError("task queries must be positive");
  if (s.kind == TaskKind::similarity_trap && s.n < 4) throw ConfigError("similarity-trap needs n >= 4");
}

inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

// Linked pool: candidates are grouped into disjoint (lead, follower) pairs whose
// follower image is a noisy copy of the lead's text. A query's image points at
// one member (the lead, for order-sensitive tasks); its text is uninformative.
// The second pick is reachable only from the first one, not from the query.
inline SyntheticTask generate_linked(const TaskSpec& spec, std::mt19937_64& rng) {
  const std::size_t d = spec.d_e;
  std::vector<Vec> texts(spec.n), images(spec.n);
  for (std::size_t k = 0; k < spec.n; ++k) {
    texts[k] = random_unit(d, rng);
    images[k] = random_unit(d, rng);
  }
  const auto slots = shuffled_indices(spec.n, rng);
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t p = 0; p + 1 < spec.n; p += 2) {
    const std::size_t lead = slots[p], follower = slots[p + 1];
    images[follower] = perturbed(texts[lead], kLinkNoise, rng);
    pairs.emplace_back(lead, follower);
  }
  CandidatePool pool;
  for (std::size_t k = 0; k < spec.n; ++k) {
    pool.demos.push_back(make_item("cand-" + std::to_string(k), texts[k], images[k], "demo-answer-" + std::to_string(k)));
  }
  std::vector<Query> queries;
  std::vector<HiddenPair> hidden;
  std::uniform_int_distribution<std::size_t> pick_pair(0, pairs.size() - 1);
  std::bernoulli_distribution coin(0.5);
  for (std::size_t q = 0; q < spec.queries; ++q) {
    auto [a, b] = pairs[pick_pair(rng)];
    if (spec.kind == TaskKind::planted_pair && coin(rng)) std::swap(a, b);
    queries.push_back(make_item("query-" + std::to_string(q), random_unit(d, rng),
                                perturbed(images[a], kQueryNoise, rng), "answer-" + std::to_string(q)));
    hidden.push_back({a, b});
  }
  return SyntheticTask(spec, std::move(pool), std::move(queries), std::move(hidden));
}

// Similarity trap: half the pool is text-twin clusters (the distractors), the
// other half disjoint rewarded pairs with independent features. Each query sits
// close to one twin cluster in averaged-feature cosine while its rewarded pair
// lies in a low cosine band; the pair is signalled through the query image only.
inline SyntheticTask generate_trap(const TaskSpec& spec, std::mt19937_64& rng) {
  const std::size_t d = spec.d_e;
  const std::size_t n = spec.n;
  std::vector<Vec> texts(n), images(n);
  for (std::size_t k = 0; k < n; ++k) {
    texts[k] = random_unit(d, rng);
    images[k] = random_unit(d, rng);
  }
  const auto slots = shuffled_indices(n, rng);
  const std::size_t units = n / 2;  // groups of two
  const std::size_t twin_units = std::max<std::size_t>(1, units / 2);
  std::vector<std::pair<std::size_t, std::size_t>> twins, pairs;
  for (std::size_t g = 0; g < units; ++g) {
    const std::size_t u = slots[2 * g], v = slots[2 * g + 1];
    if (g < twin_units) {
      texts[v] = perturbed(texts[u], kTwinNoise, rng);
      twins.emplace_back(u, v);
    } else {
      pairs.emplace_back(u, v);
    }
  }
  CandidatePool pool;
  for (std::size_t k = 0; k < n; ++k) {
    pool.demos.push_back(make_item("cand-" + std::to_string(k), texts[k], images[k], "demo-answer-" + std::to_string(k)));
  }
  std::vector<Vec> unit_avg(n);
  for (std::size_t k = 0; k < n; ++k) unit_avg[k] = normalized(cosine_feature(pool.demos[k]));

  std::vector<Query> queries;
  std::vector<HiddenPair> hidden;
  std::uniform_int_distribution<std::size_t> pick_twin(0, twins.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_pair(0, pairs.size() - 1);
  std::uniform_real_distribution<double> distractor_band(kTrapDistractorLo, kTrapDistractorHi);
  std::uniform_real_distribution<double> rewarded_band(kTrapRewardedLo, kTrapRewardedHi);
  for (std::size_t q = 0; q < spec.queries; ++q) {
    for (std::size_t attempt = 0;; ++attempt) {
      if (attempt > 10000) throw ConfigError("similarity-trap geometry could not be realized for this spec");
      const auto [u, v] = twins[pick_twin(rng)];
      const auto [a, b] = pairs[pick_pair(rng)];
      const Vec targets{distractor_band(rng), distractor_band(rng), rewarded_band(rng), rewarded_band(rng)};
      Vec avg;
      if (!vector_with_cosines({unit_avg[u], unit_avg[v], unit_avg[a], unit_avg[b]}, targets, rng, avg)) continue;
      // Every other candidate must rank clearly below both distractors.
      const double floor = std::min(targets[0], targets[1]);
      bool ok = true;
      for (std::size_t k = 0; k < n && ok; ++k) {
        if (k == u || k == v) continue;
        if (dot(avg, unit_avg[k]) >= floor - 0.05) ok = false;
      }
      if (!ok) continue;
      Vec signal = images[a];
      for (std::size_t t = 0; t < d; ++t) signal[t] += images[b][t];
      Vec image = perturbed(normalized(signal), kQueryNoise, rng);
      // Text chosen so the averaged query feature is exactly `avg`.
      Vec text(d);
      for (std::size_t t = 0; t < d; ++t) text[t] = 2.0 * avg[t] - image[t];
      queries.push_back(make_item("query-" + std::to_string(q), std::move(text), std::move(image),
                                  "answer-" + std::to_string(q)));
      hidden.push_back({a, b});
      break;
    }
  }
  return SyntheticTask(spec, std::move(pool), std::move(queries), std::move(hidden));
}

/// Deterministic from (spec, seed).
inline SyntheticTask generate_task(const TaskSpec& spec) {
  validate(spec);
  std::mt19937_64 rng(spec.seed ^ 0x9e3779b97f4a7c15ULL);
  return spec.kind == TaskKind::similarity_trap ? generate_trap(spec, rng) : generate_linked(spec, rng);
}

/// Simulated F-then-indicator composition: 1 iff the responder answers correctly.
inline double oracle_reward(const SyntheticTask& task, std::size_t query_index, std::span<const std::size_t> selection) {
  const SelectionSequence seq{{selection.begin(), selection.end()}, {}, 0.0};
  return indicator_reward(task.respond(query_index, seq), task.query(query_index).answer);
}

struct OracleEntry {
  std::vector<std::size_t> sequence;
  double reward = 0.0;
};

struct OracleResult {
  std::vector<std::vector<std::size_t>> best;  // every argmax sequence, lexicographic order
  double max_reward = 0.0;
  std::vector<OracleEntry> table;  // every ordered m-sequence, lexicographic order
};

inline constexpr unsigned long long kEnumerationBudget = 1'000'000ULL;

/// n!/(n-m)!, saturating at budget+1.
inline unsigned long long ordered_count(std::size_t n, std::size_t m) {
  unsigned long long count = 1;
  for (std::size_t i = 0; i < m; ++i) {
    count *= static_cast<unsigned long long>(n - i);
    if (count > kEnumerationBudget) return count;
  }
  return count;
}

/// Visits every ordered m-sequence of distinct indices in lexicographic order.
inline void for_each_ordered(std::size_t n, std::size_t m, const std::function<void(const std::vector<std::size_t>&)>& fn) {
  std::vector<std::size_t> seq;
  std::vector<char> used(n, 0);
  std::function<void()> rec = [&]() {
    if (seq.size() == m) {
      fn(seq);
      return;
    }
    for (std::size_t j = 0; j < n; ++j) {
      if (used[j]) continue;
      used[j] = 1;
      seq.push_back(j);
      rec();
      seq.pop_back();
      used[j] = 0;
    }
  };
  rec();
}

/// Exhaustive reference: evaluates `reward` on every ordered m-sequence.
inline OracleResult brute_force_best(std::size_t n, std::size_t m,
                                     const std::function<double(std::span<const std::size_t>)>& reward) {
  if (m > n) throw ContractError("cannot enumerate " + std::to_string(m) + "-sequences from " + std::to_string(n));
  const unsigned long long count = ordered_count(n, m);
  if (count > kEnumerationBudget) {
    throw BudgetExceeded("enumeration of " + std::to_string(count) + "+ sequences exceeds the budget of " +
                             std::to_string(kEnumerationBudget),
                         count);
  }
  OracleResult out;
  out.table.reserve(count);
  out.max_reward = -std::numeric_limits<double>::infinity();
  for_each_ordered(n, m, [&](const std::vector<std::size_t>& seq) {
    const double r = reward(seq);
    out.table.push_back({seq, r});
    if (r > out.max_reward) {
      out.max_reward = r;
      out.best.clear();
    }
    if (r == out.max_reward) out.best.push_back(seq);
  });
  return out;
}

inline OracleResult brute_force_best(const SyntheticTask& task, std::size_t query_index, std::size_t m) {
  return brute_force_best(task.pool().size(), m,
                          [&](std::span<const std::size_t> s) { return oracle_reward(task, query_index, s); });
}

enum class Baseline { random, fixed, similarity, bm25 };

inline std::string to_string(Baseline b) {
  switch (b) {
    case Baseline::random: return "random";
    case Baseline::fixed: return "fixed";
    case Baseline::similarity: return "similarity";
    case Baseline::bm25: return "bm25";
  }
  return "unknown";
}

struct Bm25Params {
  double k1 = 1.5;
  double b = 0.75;
};

inline std::vector<std::string> tokenize(const std::string& text) {
  std::istringstream is(text);
  std::vector<std::string> out;
  for (std::string tok; is >> tok;) out.push_back(tok);
  return out;
}

/// Okapi BM25 score of every document for the query, with the non-negative
/// idf ln(1 + (N - df + 0.5) / (df + 0.5)).
inline std::vector<double> bm25_scores(const std::vector<std::string>& query,
                                       const std::vector<std::vector<std::string>>& docs, Bm25Params params = {}) {
  const double N = static_cast<double>(docs.size());
  double avgdl = 0.0;
  for (const auto& d : docs) avgdl += static_cast<double>(d.size());
  avgdl = docs.empty() ? 0.0 : avgdl / N;
  std::map<std::string, std::size_t> df;
  for (const auto& d : docs) {
    std::vector<std::string> uniq = d;
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    for (const auto& t : uniq) ++df[t];
  }
  std::vector<double> scores(docs.size(), 0.0);
  for (std::size_t i = 0; i < docs.size(); ++i) {
    const double dl = static_cast<double>(docs[i].size());
    for (const auto& term : query) {
      const double tf = static_cast<double>(std::count(docs[i].begin(), docs[i].end(), term));
      if (tf == 0.0) continue;
      const double n_t = static_cast<double>(df[term]);
      const double idf = std::log(1.0 + (N - n_t + 0.5) / (n_t + 0.5));
      const double denom = tf + params.k1 * (1.0 - params.b + params.b * (avgdl > 0 ? dl / avgdl : 0.0));
      scores[i] += idf * tf * (params.k1 + 1.0) / denom;
    }
  }
  return scores;
}

inline std::string item_text(const Item& item) {
  return item.text.empty() ? synthetic_text(item.text_feature.values) : item.text;
}

// Top-m indices by descending score; ties to the lower index.
inline std::vector<std::size_t> top_m(const std::vector<double>& scores, std::size_t m) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  idx.resize(m);
  return idx;
}

/// Heuristic, query-independent-or-similarity selection strategies.
inline SelectionSequence baseline_select(Baseline strategy, const Query& query, const CandidatePool& pool, std::size_t m,
                                         std::mt19937_64& rng) {
  const std::size_t n = pool.size();
  if (n < m) throw ContractError("pool of " + std::to_string(n) + " cannot supply " + std::to_string(m) + " picks");
  SelectionSequence out;
  switch (strategy) {
    case Baseline::random: {
      auto idx = shuffled_indices(n, rng);
      idx.resize(m);
      out.indices = std::move(idx);
      break;
    }
    case Baseline::fixed:
      for (std::size_t i = 0; i < m; ++i) out.indices.push_back(i);
      break;
    case Baseline::similarity: {
      const Vec q = cosine_feature(query);
      std::vector<double> scores(n);
      for (std::size_t k = 0; k < n; ++k) scores[k] = cosine(q, cosine_feature(pool.demos[k]));
      out.indices = top_m(scores, m);
      break;
    }
    case Baseline::bm25: {
      std::vector<std::vector<std::string>> docs;
      for (const auto& demo : pool.demos) docs.push_back(tokenize(item_text(demo)));
      out.indices = top_m(bm25_scores(tokenize(item_text(query)), docs), m);
      break;
    }
  }
  return out;
}

}  // namespace envsim

}  // namespace demosel
