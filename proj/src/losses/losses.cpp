#include "loop/losses.hpp"

#include <cmath>

#include "loop/error.hpp"

namespace loop {

double g_epsilon(double advantage, double epsilon) { return advantage + epsilon * std::abs(advantage); }

AgentSteps agent_steps(const Trajectory& traj, const PolicyParams& params) {
  return {agent_features(traj, params.features(), params.vocab()), agent_token_ids(traj)};
}

namespace {

std::vector<Vector> step_logprobs(const AgentSteps& steps, const PolicyParams& params) {
  std::vector<Vector> out;
  out.reserve(steps.phis.size());
  for (const auto& phi : steps.phis) out.push_back(logprobs(params, phi));
  return out;
}

// Number of agent tokens in each turn span, in order.
std::vector<std::size_t> turn_sizes(const Trajectory& traj) {
  std::vector<std::size_t> sizes;
  for (const auto& s : traj.turn_spans) sizes.push_back(s.end - s.start);
  return sizes;
}

}  // namespace

LossResult ppo_objective(const Trajectory& traj, const AgentSteps& steps, double advantage,
                         const PolicyParams& params, const ClipConfig& clip) {
  if (!std::isfinite(advantage)) throw NumericalError("ppo_objective: non-finite advantage");
  if (!(clip.epsilon > 0.0)) throw ContractViolation("ppo_objective: epsilon must be positive");
  const std::size_t n = steps.ids.size();
  if (traj.sampling_logprobs.size() != n) {
    throw ContractViolation("ppo_objective: trajectory lacks sampling log-probabilities");
  }
  LossResult out;
  out.grad = params.zeros_like();
  if (n == 0) return out;

  auto lps = step_logprobs(steps, params);
  std::vector<double> current(n);
  for (std::size_t i = 0; i < n; ++i) current[i] = lps[i][steps.ids[i]];
  const Ratios ratios = importance_ratios(current, traj, clip.granularity);
  out.clamped = ratios.clamped;
  out.terms = static_cast<int>(ratios.values.size());

  const double bound = g_epsilon(advantage, clip.epsilon);
  const double per_token = 1.0 / static_cast<double>(n);
  std::vector<double> token_scale(n, 0.0);
  double sum = 0.0;

  auto term = [&](double ratio) {
    out.sum_abs_ratio_dev += std::abs(ratio - 1.0);
    const double unclipped = ratio * advantage;
    if (unclipped <= bound) {
      sum += unclipped;
      return advantage * ratio * per_token;
    }
    sum += bound;
    ++out.clipped;
    return 0.0;
  };

  switch (clip.granularity) {
    case Granularity::kToken:
      for (std::size_t i = 0; i < n; ++i) token_scale[i] = term(ratios.values[i]);
      out.objective = sum / static_cast<double>(n);
      break;
    case Granularity::kTurn: {
      std::size_t k = 0;
      const auto sizes = turn_sizes(traj);
      for (std::size_t j = 0; j < sizes.size(); ++j) {
        const double scale = term(ratios.values[j]);
        for (std::size_t c = 0; c < sizes[j]; ++c) token_scale[k++] = scale;
      }
      out.objective = sizes.empty() ? 0.0 : sum / static_cast<double>(sizes.size());
      break;
    }
    case Granularity::kTrajectory: {
      const double scale = term(ratios.values[0]);
      for (auto& s : token_scale) s = scale;
      out.objective = sum;
      break;
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (token_scale[i] != 0.0) accumulate_score(out.grad, lps[i], steps.phis[i], steps.ids[i], token_scale[i]);
  }
  return out;
}

LossResult ppo_objective(const Trajectory& traj, double advantage, const PolicyParams& params,
                         const ClipConfig& clip) {
  return ppo_objective(traj, agent_steps(traj, params), advantage, params, clip);
}

LossResult ppo_objective_per_token(const Trajectory& traj, const AgentSteps& steps,
                                   std::span<const double> advantages, const PolicyParams& params,
                                   double epsilon) {
  const std::size_t n = steps.ids.size();
  if (traj.sampling_logprobs.size() != n) {
    throw ContractViolation("ppo_objective: trajectory lacks sampling log-probabilities");
  }
  if (advantages.size() != n) throw ContractViolation("ppo_objective: one advantage per agent token required");
  LossResult out;
  out.grad = params.zeros_like();
  if (n == 0) return out;
  auto lps = step_logprobs(steps, params);
  std::vector<double> current(n);
  for (std::size_t i = 0; i < n; ++i) current[i] = lps[i][steps.ids[i]];
  const Ratios ratios = importance_ratios(current, traj, Granularity::kToken);
  out.clamped = ratios.clamped;
  out.terms = static_cast<int>(n);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double a = advantages[i];
    const double r = ratios.values[i];
    out.sum_abs_ratio_dev += std::abs(r - 1.0);
    const double bound = g_epsilon(a, epsilon);
    if (r * a <= bound) {
      sum += r * a;
      accumulate_score(out.grad, lps[i], steps.phis[i], steps.ids[i], a * r / static_cast<double>(n));
    } else {
      sum += bound;
      ++out.clipped;
    }
  }
  out.objective = sum / static_cast<double>(n);
  return out;
}

LossResult reinforce_objective(const AgentSteps& steps, double advantage, const PolicyParams& params) {
  if (!std::isfinite(advantage)) throw NumericalError("reinforce_objective: non-finite advantage");
  LossResult out;
  out.grad = params.zeros_like();
  const std::size_t n = steps.ids.size();
  if (n == 0) return out;
  const double scale = advantage / static_cast<double>(n);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    auto lp = logprobs(params, steps.phis[i]);
    sum += lp[steps.ids[i]];
    if (scale != 0.0) accumulate_score(out.grad, lp, steps.phis[i], steps.ids[i], scale);
  }
  out.objective = advantage * sum / static_cast<double>(n);
  out.terms = static_cast<int>(n);
  return out;
}

LossResult reinforce_objective(const Trajectory& traj, double advantage, const PolicyParams& params) {
  return reinforce_objective(agent_steps(traj, params), advantage, params);
}

LossResult kl_penalty(const PolicyParams& params, const PolicyParams& ref, const AgentSteps& steps, double beta) {
  if (params.rows() != ref.rows() || params.cols() != ref.cols()) {
    throw ContractViolation("kl_penalty: reference shape differs");
  }
  LossResult out;
  out.grad = params.zeros_like();
  double total = 0.0;
  for (const auto& phi : steps.phis) {
    const Vector lp = logprobs(params, phi);
    const Vector lq = logprobs(ref, phi);
    const Vector p = lp.array().exp();
    const Vector diff = lp - lq;
    const double kl = std::max(0.0, p.dot(diff));
    total += kl;
    // d KL / d logits = p * (log p - log q - KL)
    const Vector dz = beta * (p.array() * (diff.array() - p.dot(diff))).matrix();
    for (auto c : phi.columns) out.grad.col(static_cast<Eigen::Index>(c)) += dz;
  }
  out.objective = beta * total;
  out.terms = static_cast<int>(steps.phis.size());
  return out;
}

LossResult kl_penalty(const PolicyParams& params, const PolicyParams& ref, const Trajectory& traj, double beta) {
  return kl_penalty(params, ref, agent_steps(traj, params), beta);
}

LossResult mean_loglik(const AgentSteps& steps, const PolicyParams& params) {
  return reinforce_objective(steps, 1.0, params);
}

double clip_grad_norm(Matrix& grad, double max_norm) {
  if (!grad.allFinite()) {
    Eigen::Index bad = 0;
    for (Eigen::Index i = 0; i < grad.size(); ++i) {
      if (!std::isfinite(grad.data()[i])) ++bad;
    }
    throw NumericalError("clip_grad_norm: " + std::to_string(bad) + " non-finite gradient entries");
  }
  const double norm = grad.norm();
  if (norm > max_norm) grad *= max_norm / norm;
  return norm;
}

void apply_update(PolicyParams& params, const Matrix& grad, double learning_rate) {
  if (grad.rows() != params.weights().rows() || grad.cols() != params.weights().cols()) {
    throw ContractViolation("apply_update: gradient shape differs from parameters");
  }
  params.weights() += learning_rate * grad;
}

GradAccumulator::GradAccumulator(const PolicyParams& params) : sum_(params.zeros_like()) {}

void GradAccumulator::add(const Matrix& grad, double objective) {
  sum_ += grad;
  objective_ += objective;
  ++count_;
  if (!sum_.allFinite()) throw NumericalError("GradAccumulator: non-finite accumulated gradient");
}

Matrix GradAccumulator::mean() const {
  if (count_ == 0) return Matrix::Zero(sum_.rows(), sum_.cols());
  return sum_ / static_cast<double>(count_);
}

double GradAccumulator::mean_objective() const { return count_ ? objective_ / count_ : 0.0; }

}  // namespace loop
