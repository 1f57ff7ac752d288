#include <cmath>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "loop/error.hpp"
#include "loop/losses.hpp"

namespace loop {
namespace {

using testing::perturbed;
using testing::random_params;
using testing::sampled;

constexpr Granularity kAll[] = {Granularity::kToken, Granularity::kTurn, Granularity::kTrajectory};

// Mean over agent tokens of min(r A, g(A)), computed from scratch.
double token_surrogate(const PolicyParams& p, const Trajectory& t, double a, double eps) {
  std::vector<Token> full = t.context;
  double sum = 0.0;
  std::size_t k = 0;
  for (std::size_t i = 0; i < t.tokens.size(); ++i) {
    if (t.action_mask[i]) {
      const double r = std::exp(logprobs(p, full)[t.tokens[i]] - t.sampling_logprobs[k++]);
      sum += std::min(r * a, a + eps * std::abs(a));
    }
    full.push_back(t.tokens[i]);
  }
  return sum / static_cast<double>(k);
}

// Sum over agent tokens of (scale_i) * d log p_i / dW via the dense gradient.
Matrix dense_score(const PolicyParams& p, const Trajectory& t, const std::vector<double>& scale) {
  Matrix g = p.zeros_like();
  std::vector<Token> full = t.context;
  std::size_t k = 0;
  for (std::size_t i = 0; i < t.tokens.size(); ++i) {
    if (t.action_mask[i]) {
      if (scale[k] != 0.0) g += scale[k] * grad_logprob(p, full, t.tokens[i]);
      ++k;
    }
    full.push_back(t.tokens[i]);
  }
  return g;
}

TEST(GEpsilon, ClipsOnTheAdvantageSide) {
  EXPECT_DOUBLE_EQ(g_epsilon(1.0, 0.2), 1.2);
  EXPECT_DOUBLE_EQ(g_epsilon(-1.0, 0.2), -0.8);
  EXPECT_DOUBLE_EQ(g_epsilon(0.0, 0.2), 0.0);
}

TEST(Ppo, TokenSurrogateGradientMatchesFiniteDifferences) {
  auto vocab = miniworld::make_vocab();
  Rng rng(1);
  std::uniform_real_distribution<double> adv(-1.0, 1.0);
  const double h = 1e-5;
  int checked = 0;
  for (int trial = 0; trial < 100; ++trial) {
    auto behavior = random_params(vocab, 2, rng, 0.3);
    auto t = sampled(behavior, static_cast<std::uint64_t>(trial), 2, 4);
    auto p = perturbed(behavior, rng, 0.02);
    const double a = adv(rng);
    // A large epsilon keeps every term on the gradient-carrying branch.
    auto r = ppo_objective(t, a, p, {10.0, Granularity::kToken});
    ASSERT_EQ(r.clipped, 0);
    EXPECT_NEAR(r.objective, token_surrogate(p, t, a, 10.0), 1e-12);
    // Probe the largest entries of the analytic gradient.
    Eigen::Index row, col;
    r.grad.cwiseAbs().maxCoeff(&row, &col);
    auto plus = p, minus = p;
    plus.weights()(row, col) += h;
    minus.weights()(row, col) -= h;
    const double fd = (token_surrogate(plus, t, a, 10.0) - token_surrogate(minus, t, a, 10.0)) / (2 * h);
    const double an = r.grad(row, col);
    if (std::abs(an) < 1e-8) continue;
    EXPECT_LT(std::abs(fd - an) / std::abs(an), 1e-4) << "trial " << trial;
    ++checked;
  }
  EXPECT_GT(checked, 90);
}

TEST(Ppo, UnitRatiosReduceToReinforceAtEveryGranularity) {
  auto vocab = miniworld::make_vocab();
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    auto p = random_params(vocab, 3, rng, 0.5);
    auto t = sampled(p, static_cast<std::uint64_t>(trial));
    const double a = trial % 2 ? 0.7 : -0.4;
    auto reinforce = reinforce_objective(t, a, p);
    const std::vector<double> scale(t.agent_tokens(), a / static_cast<double>(t.agent_tokens()));
    const Matrix oracle = dense_score(p, t, scale);
    EXPECT_LT((reinforce.grad - oracle).cwiseAbs().maxCoeff(), 1e-10);
    for (auto g : kAll) {
      auto ppo = ppo_objective(t, a, p, {0.2, g});
      EXPECT_EQ(ppo.clipped, 0);
      EXPECT_LT((ppo.grad - reinforce.grad).cwiseAbs().maxCoeff(), 1e-10) << to_string(g);
    }
  }
}

TEST(Ppo, ObjectiveNormalizationPerGranularity) {
  auto vocab = miniworld::make_vocab();
  Rng rng(3);
  auto p = random_params(vocab, 3, rng, 0.5);
  auto t = sampled(p, 9);
  // On-policy every term is A.
  EXPECT_NEAR(ppo_objective(t, 0.5, p, {0.2, Granularity::kToken}).objective, 0.5, 1e-12);
  EXPECT_NEAR(ppo_objective(t, 0.5, p, {0.2, Granularity::kTurn}).objective, 0.5, 1e-12);
  EXPECT_NEAR(ppo_objective(t, 0.5, p, {0.2, Granularity::kTrajectory}).objective, 0.5, 1e-12);
  EXPECT_EQ(ppo_objective(t, 0.5, p, {0.2, Granularity::kTurn}).terms, static_cast<int>(t.turn_spans.size()));
  EXPECT_EQ(ppo_objective(t, 0.5, p, {0.2, Granularity::kTrajectory}).terms, 1);
}

TEST(Ppo, AllClippedGivesExactlyZeroGradient) {
  auto vocab = miniworld::make_vocab();
  Rng rng(4);
  auto p = random_params(vocab, 3, rng, 0.5);
  for (auto g : kAll) {
    // A > 0 with every ratio far above 1 + eps.
    auto up = sampled(p, 1);
    for (auto& lp : up.sampling_logprobs) lp -= 1.0;
    auto r = ppo_objective(up, 0.8, p, {0.2, g});
    EXPECT_EQ(r.clipped, r.terms);
    EXPECT_EQ(r.grad.cwiseAbs().maxCoeff(), 0.0) << to_string(g);
    EXPECT_NEAR(r.objective, g_epsilon(0.8, 0.2), 1e-12);

    // A < 0 with every ratio far below 1 - eps.
    auto down = sampled(p, 2);
    for (auto& lp : down.sampling_logprobs) lp += 1.0;
    auto s = ppo_objective(down, -0.8, p, {0.2, g});
    EXPECT_EQ(s.clipped, s.terms);
    EXPECT_EQ(s.grad.cwiseAbs().maxCoeff(), 0.0) << to_string(g);
  }
}

TEST(Ppo, MixedFixtureZerosExactlyTheClippedTokens) {
  auto vocab = miniworld::make_vocab();
  Rng rng(5);
  auto p = random_params(vocab, 3, rng, 0.5);
  auto t = sampled(p, 3);
  const std::size_t n = t.agent_tokens();
  ASSERT_GE(n, 2u);
  const double a = 0.6;
  std::vector<double> scale(n);
  int expect_clipped = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (i % 2 == 0) {
      t.sampling_logprobs[i] -= 1.0;  // ratio e > 1.2: clipped
      ++expect_clipped;
      scale[i] = 0.0;
    } else {
      t.sampling_logprobs[i] += 0.5;  // ratio e^-0.5 < 1: flows
      scale[i] = a * std::exp(-0.5) / static_cast<double>(n);
    }
  }
  auto r = ppo_objective(t, a, p, {0.2, Granularity::kToken});
  EXPECT_EQ(r.clipped, expect_clipped);
  EXPECT_LT((r.grad - dense_score(p, t, scale)).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Ppo, RejectsScriptedTrajectoriesAndBadInputs) {
  auto vocab = miniworld::make_vocab();
  Rng rng(6);
  auto p = random_params(vocab, 3, rng, 0.5);
  auto t = sampled(p, 3);
  EXPECT_THROW(ppo_objective(t, NAN, p, {}), NumericalError);
  EXPECT_THROW(ppo_objective(t, 1.0, p, {0.0, Granularity::kToken}), ContractViolation);
  t.sampling_logprobs.clear();
  EXPECT_THROW(ppo_objective(t, 1.0, p, {}), ContractViolation);
}

TEST(Kl, ZeroAgainstItselfAndFiniteDifferenceGradient) {
  auto vocab = miniworld::make_vocab();
  Rng rng(7);
  auto ref = random_params(vocab, 2, rng, 0.5);
  auto t = sampled(ref, 4, 2, 4);
  EXPECT_NEAR(kl_penalty(ref, ref, t).objective, 0.0, 1e-12);
  EXPECT_EQ(kl_penalty(ref, ref, t).grad.cwiseAbs().maxCoeff(), 0.0);

  auto p = perturbed(ref, rng, 0.3);
  auto r = kl_penalty(p, ref, t, 0.5);
  EXPECT_GT(r.objective, 0.0);
  const double h = 1e-5;
  for (int probe = 0; probe < 10; ++probe) {
    std::uniform_int_distribution<Eigen::Index> ri(0, r.grad.rows() - 1), ci(0, r.grad.cols() - 1);
    Eigen::Index row, col;
    if (probe == 0) {
      r.grad.cwiseAbs().maxCoeff(&row, &col);
    } else {
      row = ri(rng);
      col = ci(rng);
    }
    auto plus = p, minus = p;
    plus.weights()(row, col) += h;
    minus.weights()(row, col) -= h;
    const double fd = (kl_penalty(plus, ref, t, 0.5).objective - kl_penalty(minus, ref, t, 0.5).objective) / (2 * h);
    EXPECT_NEAR(fd, r.grad(row, col), 1e-6);
  }
}

TEST(GradClip, RescalesAndReportsNorm) {
  Matrix g(2, 2);
  g << 3, 0, 0, 4;
  EXPECT_DOUBLE_EQ(clip_grad_norm(g, 1.0), 5.0);
  EXPECT_NEAR(g.norm(), 1.0, 1e-15);
  Matrix small = Matrix::Constant(2, 2, 0.1);
  const Matrix copy = small;
  clip_grad_norm(small, 1.0);
  EXPECT_EQ(small, copy);
  Matrix bad = Matrix::Zero(2, 2);
  bad(1, 1) = NAN;
  EXPECT_THROW(clip_grad_norm(bad, 1.0), NumericalError);
}

TEST(ApplyUpdate, AscendsAndChecksShape) {
  auto vocab = miniworld::make_vocab();
  PolicyParams p(vocab, FeatureConfig{2});
  Matrix g = p.zeros_like();
  g(0, 0) = 2.0;
  apply_update(p, g, 0.5);
  EXPECT_DOUBLE_EQ(p.weights()(0, 0), 1.0);
  EXPECT_THROW(apply_update(p, Matrix::Zero(2, 2), 0.1), ContractViolation);
}

TEST(GradAccumulator, MeanOfAdded) {
  auto vocab = miniworld::make_vocab();
  PolicyParams p(vocab, FeatureConfig{1});
  GradAccumulator acc(p);
  Matrix a = p.zeros_like(), b = p.zeros_like();
  a(0, 0) = 1.0;
  b(0, 0) = 3.0;
  acc.add(a, 1.0);
  acc.add(b, 2.0);
  EXPECT_EQ(acc.count(), 2);
  EXPECT_DOUBLE_EQ(acc.mean()(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(acc.mean_objective(), 1.5);
}

}  // namespace
}  // namespace loop
