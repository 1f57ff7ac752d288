#ifndef LOOP_LOSSES_HPP_
#define LOOP_LOSSES_HPP_

#include <span>
#include <vector>

#include "loop/policy.hpp"
#include "loop/rollout.hpp"

namespace loop {

struct ClipConfig {
  double epsilon = 0.2;
  Granularity granularity = Granularity::kToken;
};

double g_epsilon(double advantage, double epsilon);

// Features and token ids of a trajectory's agent tokens; reusable across epochs.
struct AgentSteps {
  std::vector<SparseFeatures> phis;
  std::vector<Token> ids;
};
AgentSteps agent_steps(const Trajectory& traj, const PolicyParams& params);

struct LossResult {
  double objective = 0.0;
  Matrix grad;
  int terms = 0;    // ratio terms (tokens, turns or 1)
  int clipped = 0;  // terms on the constant branch of the min
  double sum_abs_ratio_dev = 0.0;  // sum over terms of |ratio - 1|
  int clamped = 0;  // log-ratios clamped before exponentiation
};

// Clipped surrogate. The objective is normalized per granularity: mean over
// agent tokens, mean over turns, or the single trajectory term. The gradient
// is always normalized by the number of agent tokens, so with all ratios equal
// to 1 every granularity returns A times the mean score of the agent tokens.
LossResult ppo_objective(const Trajectory& traj, double advantage, const PolicyParams& params,
                         const ClipConfig& clip);
LossResult ppo_objective(const Trajectory& traj, const AgentSteps& steps, double advantage,
                         const PolicyParams& params, const ClipConfig& clip);

// Token granularity with one advantage per agent token (learned-critic baseline).
LossResult ppo_objective_per_token(const Trajectory& traj, const AgentSteps& steps,
                                   std::span<const double> advantages, const PolicyParams& params,
                                   double epsilon);

// A times the mean over agent tokens of log p; the gradient is its derivative.
LossResult reinforce_objective(const Trajectory& traj, double advantage, const PolicyParams& params);
LossResult reinforce_objective(const AgentSteps& steps, double advantage, const PolicyParams& params);

// beta * sum over agent-token contexts of KL(p_theta || p_ref), exact over the
// vocabulary. Callers subtract it from the objective.
LossResult kl_penalty(const PolicyParams& params, const PolicyParams& ref, const Trajectory& traj,
                      double beta = 0.01);
LossResult kl_penalty(const PolicyParams& params, const PolicyParams& ref, const AgentSteps& steps,
                      double beta = 0.01);

// Mean log-likelihood of the agent tokens and its gradient (cross-entropy fitting).
LossResult mean_loglik(const AgentSteps& steps, const PolicyParams& params);

// Rescales to max_norm when the L2 norm exceeds it. Returns the norm before
// clipping. Throws NumericalError on non-finite entries.
double clip_grad_norm(Matrix& grad, double max_norm);

// W <- W + lr * grad.
void apply_update(PolicyParams& params, const Matrix& grad, double learning_rate);

// Sums per-trajectory gradients and returns their mean.
class GradAccumulator {
 public:
  explicit GradAccumulator(const PolicyParams& params);

  void add(const Matrix& grad, double objective = 0.0);
  int count() const { return count_; }
  Matrix mean() const;
  double mean_objective() const;

 private:
  Matrix sum_;
  double objective_ = 0.0;
  int count_ = 0;
};

}  // namespace loop

#endif  // LOOP_LOSSES_HPP_
