#include "loop/advantage.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "loop/error.hpp"

namespace loop {

namespace {

double mean_of(std::span<const double> xs) {
  return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

void require_finite(std::span<const double> xs, const char* where) {
  for (double x : xs) {
    if (!std::isfinite(x)) throw NumericalError(std::string(where) + ": non-finite return");
  }
}

}  // namespace

std::vector<double> loo_advantages(std::span<const double> returns) {
  const std::size_t k = returns.size();
  if (k < 2) throw ContractViolation("loo_advantages: need at least 2 returns");
  require_finite(returns, "loo_advantages");
  const double mean = mean_of(returns);
  const double scale = static_cast<double>(k) / static_cast<double>(k - 1);
  std::vector<double> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = scale * (returns[i] - mean);
  return out;
}

std::vector<double> grpo_advantages(std::span<const double> returns) {
  const std::size_t k = returns.size();
  if (k < 2) throw ContractViolation("grpo_advantages: need at least 2 returns");
  require_finite(returns, "grpo_advantages");
  const double mean = mean_of(returns);
  double var = 0.0;
  for (double r : returns) var += (r - mean) * (r - mean);
  const double std = std::sqrt(var / static_cast<double>(k));
  const double denom = std::max(std, kStdFloor);
  std::vector<double> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = (returns[i] - mean) / denom;
  return out;
}

ValueFunction::ValueFunction(FeatureConfig features, std::size_t vocab_size)
    : features_(features), v_(Vector::Zero(static_cast<Eigen::Index>(features.dim(vocab_size)))) {}

double ValueFunction::predict(const SparseFeatures& phi) const {
  double s = 0.0;
  for (auto c : phi.columns) s += v_[static_cast<Eigen::Index>(c)];
  return s;
}

double ValueFunction::predict_clamped(const SparseFeatures& phi) const {
  return std::clamp(predict(phi), 0.0, 1.0);
}

std::vector<double> gae_advantages(const Trajectory& traj, const ValueFunction& value, const Vocab& vocab,
                                   double gamma, double lambda) {
  if (!(gamma > 0.0 && gamma <= 1.0) || !(lambda > 0.0 && lambda <= 1.0)) {
    throw ContractViolation("gae_advantages: gamma and lambda must be in (0, 1]");
  }
  auto phis = agent_features(traj, value.features(), vocab);
  const std::size_t n = phis.size();
  std::vector<double> v(n + 1, 0.0);
  for (std::size_t t = 0; t < n; ++t) v[t] = value.predict_clamped(phis[t]);
  std::vector<double> adv(n);
  double running = 0.0;
  for (std::size_t t = n; t-- > 0;) {
    const double reward = t + 1 == n ? traj.ret : 0.0;
    const double delta = reward + gamma * v[t + 1] - v[t];
    running = delta + gamma * lambda * running;
    adv[t] = running;
  }
  return adv;
}

double ValueSchedule::coefficient(int iteration) const {
  if (span <= 0) return end;
  const double f = std::clamp(static_cast<double>(iteration) / span, 0.0, 1.0);
  return start + (end - start) * f;
}

double fit_value(ValueFunction& value, const RolloutBuffer& buffer, const Vocab& vocab, int iteration,
                 const ValueFitConfig& config) {
  if (buffer.entries.empty()) throw ContractViolation("fit_value: empty buffer");
  std::vector<SparseFeatures> phis;
  std::vector<double> targets;
  for (const auto& e : buffer.entries) {
    for (auto& phi : agent_features(e.traj, value.features(), vocab)) {
      phis.push_back(std::move(phi));
      targets.push_back(e.traj.ret);
    }
  }
  if (phis.empty()) return 0.0;
  const double n = static_cast<double>(phis.size());
  const double coef = config.schedule.coefficient(iteration);
  double first_mse = 0.0;
  for (int step = 0; step < config.steps; ++step) {
    Vector grad = Vector::Zero(value.weights().size());
    double mse = 0.0;
    for (std::size_t i = 0; i < phis.size(); ++i) {
      const double err = value.predict(phis[i]) - targets[i];
      mse += err * err;
      for (auto c : phis[i].columns) grad[static_cast<Eigen::Index>(c)] += 2.0 * err;
    }
    if (step == 0) first_mse = mse / n;
    value.weights() -= config.lr * coef * grad / n;
  }
  if (!value.weights().allFinite()) throw NumericalError("fit_value: value weights became non-finite");
  return first_mse;
}

RolloutBuffer filter_low_advantage(const RolloutBuffer& buffer, double threshold) {
  RolloutBuffer out;
  out.iteration = buffer.iteration;
  for (const auto& e : buffer.entries) {
    if (!std::isfinite(e.advantage)) throw NumericalError("filter_low_advantage: non-finite advantage");
    if (std::abs(e.advantage) >= threshold) out.entries.push_back(e);
  }
  return out;
}

}  // namespace loop
