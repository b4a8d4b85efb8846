#include <gtest/gtest.h>

#include <cmath>

#include "demosel/policy.hpp"
#include "demosel/search.hpp"
#include "test_util.hpp"

using namespace demosel;
using demosel::testing::enumerate_joint;
using demosel::testing::max_fd_error;
using demosel::testing::random_item;
using demosel::testing::random_pool;
using demosel::testing::tiny_model;

namespace {

struct Fixture {
  PolicyModel model;
  CandidatePool pool;
  Item query;
  EncodedQuery enc;
};

Fixture make(std::uint64_t seed, std::size_t n, ModelConfig c = tiny_model()) {
  std::mt19937_64 rng(seed + 77);
  Fixture f{PolicyModel(c, seed), random_pool(n, c.feature_dim, rng), random_item("q", c.feature_dim, rng), {}};
  f.enc = f.model.encode(f.query, f.pool);
  return f;
}

// Pool of identical items: every logit ties, so the policy is uniform.
Fixture make_uniform(std::size_t n) {
  std::mt19937_64 rng(5);
  const Item proto = random_item("c", 8, rng);
  CandidatePool pool;
  for (std::size_t k = 0; k < n; ++k) pool.demos.push_back(proto);
  Fixture f{PolicyModel(tiny_model(), 5), pool, random_item("q", 8, rng), {}};
  // Identical features still receive distinct slot embeddings; clearing them
  // makes the candidates indistinguishable to the whole model.
  for (double& v : f.model.parameters()["enc.pos"].mutable_value().storage()) v = 0.0;
  f.enc = f.model.encode(f.query, f.pool);
  return f;
}

double naive_cos(std::span<const double> a, std::span<const double> b) {
  double d = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return d / std::sqrt(na * nb);
}

EncodedQuery bare_encoding(const Tensor& text, const Tensor& image) {
  EncodedQuery e;
  e.candidate_text = Var::constant(text);
  e.candidate_image = Var::constant(image);
  return e;
}

}  // namespace

TEST(DecodeState, ZeroDecoderPassesStartTokenThroughNorms) {
  Fixture f = make(1, 4);
  for (auto& p : f.model.parameters().all()) {
    const auto& name = p.name();
    if (name.rfind("dec.l", 0) != 0 || name.find("norm") != std::string::npos) continue;
    for (double& v : p.mutable_value().storage()) v = 0.0;
  }
  f.enc = f.model.encode(f.query, f.pool);
  const Var state = policy::decode_state(f.model, f.enc, {}, 2);
  // Oracle: layer norm (unit gain, zero bias) of start + pos[0], applied once.
  const auto& ps = f.model.parameters();
  const std::size_t d = f.model.config().d_model;
  std::vector<double> x(d);
  double mean = 0.0, var = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    x[j] = ps["dec.start"].value()[j] + ps["dec.pos"].value().at(0, j);
    mean += x[j] / static_cast<double>(d);
  }
  for (double v : x) var += (v - mean) * (v - mean) / static_cast<double>(d);
  for (std::size_t j = 0; j < d; ++j) EXPECT_NEAR(state.value()[j], (x[j] - mean) / std::sqrt(var + 1e-5), 1e-3);
}

TEST(DecodeState, DependsOnSelectionOrder) {
  const Fixture f = make(2, 6);
  const std::vector<std::size_t> ab{2, 5}, ba{5, 2};
  const Var s1 = policy::decode_state(f.model, f.enc, ab, 3);
  const Var s2 = policy::decode_state(f.model, f.enc, ba, 3);
  double diff = 0.0;
  for (std::size_t j = 0; j < s1.size(); ++j) diff += std::abs(s1.value()[j] - s2.value()[j]);
  EXPECT_GT(diff, 1e-6);
}

TEST(DecodeState, DeterministicAndBounded) {
  const Fixture f = make(3, 5);
  const std::vector<std::size_t> p{1};
  EXPECT_EQ(policy::decode_state(f.model, f.enc, p, 2).value(), policy::decode_state(f.model, f.enc, p, 2).value());
  const std::vector<std::size_t> full{1, 3};
  EXPECT_THROW(policy::decode_state(f.model, f.enc, full, 2), ContractError);
}

TEST(DecodeState, NonAutoregressiveIgnoresPrefix) {
  ModelConfig c = tiny_model();
  c.autoregressive = false;
  const Fixture f = make(4, 5, c);
  const std::vector<std::size_t> a{0}, b{3, 1};
  EXPECT_EQ(policy::decode_state(f.model, f.enc, a, 3).value(), policy::decode_state(f.model, f.enc, b, 3).value());
}

TEST(StepLogits, SelfSimilarityIsMaximal) {
  ModelConfig c = tiny_model();
  c.alpha_text = 1.0;
  c.alpha_image = 0.0;
  const Fixture f = make(5, 5, c);
  const Var state = diff::row(f.enc.candidate_text, 3);
  const Var logits = policy::step_logits(f.model, state, f.enc);
  EXPECT_NEAR(logits.value()[3], 1.0, 1e-12);
  for (std::size_t j = 0; j < 5; ++j) EXPECT_LE(logits.value()[j], 1.0 + 1e-12);
}

TEST(StepLogits, MatchesIndependentCosines) {
  const Fixture f = make(6, 5);
  const Var state = policy::decode_state(f.model, f.enc, {}, 2);
  const Var logits = policy::step_logits(f.model, state, f.enc);
  for (std::size_t j = 0; j < 5; ++j) {
    const double want = 0.5 * naive_cos(state.value().data(), f.enc.candidate_text.value().row(j)) +
                        0.5 * naive_cos(state.value().data(), f.enc.candidate_image.value().row(j));
    EXPECT_NEAR(logits.value()[j], want, 1e-12);
  }
}

TEST(StepLogits, OrthogonalCandidatesGiveZero) {
  const PolicyModel model(tiny_model(), 1);
  const Tensor rows = Tensor::matrix(2, 16, std::vector<double>(32, 0.0));
  Tensor text = rows, image = rows;
  text.at(0, 1) = 1;
  text.at(1, 2) = 1;
  image.at(0, 3) = 2;
  image.at(1, 4) = -1;
  const EncodedQuery e = bare_encoding(text, image);
  Tensor s(Shape{16});
  s[0] = 1.0;
  const Var logits = policy::step_logits(model, Var::constant(s), e);
  EXPECT_EQ(logits.value()[0], 0.0);
  EXPECT_EQ(logits.value()[1], 0.0);
}

TEST(StepLogits, ZeroStateIsDegenerate) {
  const Fixture f = make(7, 3);
  EXPECT_THROW(policy::step_logits(f.model, Var::constant(Tensor(Shape{16})), f.enc), DegenerateInputError);
  Tensor nan_state(Shape{16}, 1.0);
  nan_state[2] = std::nan("");
  EXPECT_THROW(policy::step_logits(f.model, Var::constant(nan_state), f.enc), DegenerateInputError);
}

TEST(StepLogits, CommonAlphaScalingKeepsArgmax) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    ModelConfig c = tiny_model();
    c.alpha_text = 0.3;
    c.alpha_image = 0.9;
    Fixture f = make(seed, 6, c);
    const Var state = policy::decode_state(f.model, f.enc, {}, 2);
    const auto base = policy::step_logits(f.model, state, f.enc).value();
    f.model.mutable_config().alpha_text *= 7.5;
    f.model.mutable_config().alpha_image *= 7.5;
    const auto scaled = policy::step_logits(f.model, state, f.enc).value();
    const auto argmax = [](const Tensor& t) {
      return std::distance(t.data().begin(), std::max_element(t.data().begin(), t.data().end()));
    };
    EXPECT_EQ(argmax(base), argmax(scaled));
    for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(scaled[j], 7.5 * base[j], 1e-12);
  }
}

TEST(StepDistribution, Examples) {
  auto d = policy::step_distribution(std::vector<double>{2, 2, 2}, diff::Mask(3, 0), 1.0);
  for (double p : d.probs) EXPECT_NEAR(p, 1.0 / 3, 1e-12);
  d = policy::step_distribution(std::vector<double>{0.5, 0.5}, diff::Mask{0, 1}, 1.0);
  EXPECT_EQ(d.probs, (std::vector<double>{1.0, 0.0}));
  d = policy::step_distribution(std::vector<double>{1, 0, -1}, diff::Mask(3, 0), 1.0);
  EXPECT_NEAR(d.probs[0], 0.6652, 1e-4);
  EXPECT_NEAR(d.probs[1], 0.2447, 1e-4);
  EXPECT_NEAR(d.probs[2], 0.0900, 1e-4);
}

TEST(StepDistribution, Errors) {
  EXPECT_THROW(policy::step_distribution(std::vector<double>{1, 2}, diff::Mask{1, 1}, 1.0), ExhaustedPoolError);
  EXPECT_THROW(policy::step_distribution(std::vector<double>{1, 2}, diff::Mask{0, 0}, 0.0), ParameterError);
  EXPECT_THROW(policy::step_distribution(std::vector<double>{1, 2}, diff::Mask{0}, 1.0), DimensionError);
}

TEST(SequenceLogProb, UniformPolicy) {
  const Fixture f = make_uniform(4);
  const std::vector<std::size_t> one{2}, two{3, 0};
  EXPECT_NEAR(policy::sequence_log_prob(f.model, f.enc, one, 1.0).sequence.joint_log_prob, std::log(0.25), 1e-12);
  const auto s = policy::sequence_log_prob(f.model, f.enc, two, 1.0).sequence;
  EXPECT_NEAR(s.joint_log_prob, std::log(0.25) + std::log(1.0 / 3), 1e-12);
  EXPECT_NEAR(s.step_log_probs[1], std::log(1.0 / 3), 1e-12);
}

TEST(SequenceLogProb, RejectsInvalidIndices) {
  const Fixture f = make(8, 4);
  const std::vector<std::size_t> repeat{1, 1}, out_of_range{0, 4};
  EXPECT_THROW(policy::sequence_log_prob(f.model, f.enc, repeat, 1.0), ContractError);
  EXPECT_THROW(policy::sequence_log_prob(f.model, f.enc, out_of_range, 1.0), ContractError);
}

// exp(joint) equals the product of step-distribution entries recomputed from
// separate forward passes over each prefix.
TEST(SequenceLogProb, ChainRuleAgainstIndependentPasses) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Fixture f = make(seed, 6);
    const double temp = 0.5 + 0.5 * static_cast<double>(seed % 3);
    std::mt19937_64 rng(seed);
    auto order = envsim::shuffled_indices(6, rng);
    const std::vector<std::size_t> seq(order.begin(), order.begin() + 3);
    const auto scored = policy::sequence_log_prob(f.model, f.enc, seq, temp).sequence;
    double product = 1.0, step_sum = 0.0;
    for (std::size_t k = 0; k < seq.size(); ++k) {
      const std::span<const std::size_t> prefix(seq.data(), k);
      const Var state = policy::decode_state(f.model, f.enc, prefix, 3);
      const Var logits = policy::step_logits(f.model, state, f.enc);
      const auto dist = policy::step_distribution(logits.value().data(), policy::selection_mask(6, prefix), temp);
      product *= dist.probs[seq[k]];
      for (std::size_t j : prefix) EXPECT_EQ(dist.probs[j], 0.0);
      EXPECT_LE(scored.step_log_probs[k], 0.0);
      step_sum += scored.step_log_probs[k];
    }
    EXPECT_NEAR(std::exp(scored.joint_log_prob), product, 1e-9);
    EXPECT_NEAR(scored.joint_log_prob, step_sum, 1e-9);
  }
}

TEST(SequenceLogProb, TotalProbabilityIsOne) {
  for (std::size_t n = 2; n <= 6; ++n) {
    for (std::size_t m = 1; m <= std::min<std::size_t>(3, n); ++m) {
      const Fixture f = make(10 * n + m, n);
      double total = 0.0;
      const auto table = enumerate_joint(f.model, f.enc, m, 1.0);
      EXPECT_EQ(table.size(), envsim::ordered_count(n, m));
      for (const auto& [seq, p] : table) total += p;
      EXPECT_NEAR(total, 1.0, 1e-6) << "n=" << n << " m=" << m;
    }
  }
}

TEST(SequenceLogProb, NextLogProbsAgreeWithTeacherForcing) {
  const Fixture f = make(11, 5);
  const std::vector<std::size_t> prefix{4};
  const auto lp = policy::next_log_probs(f.model, f.enc, prefix, 2, 1.3);
  EXPECT_TRUE(std::isinf(lp[4]) && lp[4] < 0);
  for (std::size_t j = 0; j < 4; ++j) {
    const std::vector<std::size_t> seq{4, j};
    EXPECT_NEAR(policy::sequence_log_prob(f.model, f.enc, seq, 1.3).sequence.step_log_probs[1], lp[j], 1e-12);
  }
}

class JointGradient : public ::testing::TestWithParam<int> {};

TEST_P(JointGradient, MatchesFiniteDifferences) {
  ModelConfig c = tiny_model(4, 8, 1, 2);
  c.learn_alpha = GetParam() % 2 == 0;
  c.autoregressive = GetParam() % 3 != 0;
  c.max_slots = 4;
  c.max_steps = 3;
  Fixture f = make(static_cast<std::uint64_t>(GetParam()), 4, c);
  const std::vector<std::size_t> seq{2, 0};
  auto fn = [&] {
    const auto enc = f.model.encode(f.query, f.pool);
    return policy::sequence_log_prob(f.model, enc, seq, 0.8).joint;
  };
  EXPECT_LT(max_fd_error(f.model.parameters().all(), fn), 1e-4);
}

INSTANTIATE_TEST_SUITE_P(Seeds, JointGradient, ::testing::Range(0, 6));

TEST(Greedy, ForcedAndTieBreak) {
  const Fixture f = make(12, 2);
  const auto s = policy::greedy_decode(f.model, f.enc, 2);
  std::vector<std::size_t> sorted = s.indices;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(sorted, (std::vector<std::size_t>{0, 1}));
  const Var logits = policy::step_logits(f.model, policy::decode_state(f.model, f.enc, {}, 2), f.enc);
  EXPECT_EQ(s.indices[0], logits.value()[0] >= logits.value()[1] ? 0u : 1u);

  const Fixture u = make_uniform(5);
  EXPECT_EQ(policy::greedy_decode(u.model, u.enc, 3).indices, (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_THROW(policy::greedy_decode(u.model, u.enc, 6), ContractError);
}

TEST(Greedy, EqualsWidthOneDeterministicSearch) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Fixture f = make(seed, 6);
    const auto greedy = policy::greedy_decode(f.model, f.enc, 3);
    const auto beam = search::stochastic_beam_search(f.model, f.enc, SearchConfig{3, 1, 1, 0.05}, nullptr);
    ASSERT_EQ(beam.size(), 1u);
    EXPECT_EQ(beam[0].indices, greedy.indices);
  }
}
