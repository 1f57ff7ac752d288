#ifndef LOOP_ADVANTAGE_HPP_
#define LOOP_ADVANTAGE_HPP_

#include <span>
#include <vector>

#include "loop/policy.hpp"
#include "loop/rollout.hpp"

namespace loop {

inline constexpr double kStdFloor = 1e-8;
inline constexpr double kDefaultAdvantageThreshold = 0.01;

// A_k = K/(K-1) * (R_k - mean(R)), i.e. R_k minus the mean of the other returns.
std::vector<double> loo_advantages(std::span<const double> returns);

// (R_k - mean) / max(population std, 1e-8).
std::vector<double> grpo_advantages(std::span<const double> returns);

// Linear value head over the policy's features.
class ValueFunction {
 public:
  ValueFunction(FeatureConfig features, std::size_t vocab_size);

  const FeatureConfig& features() const { return features_; }
  const Vector& weights() const { return v_; }
  Vector& weights() { return v_; }

  double predict(const SparseFeatures& phi) const;
  double predict_clamped(const SparseFeatures& phi) const;

 private:
  FeatureConfig features_;
  Vector v_;
};

// Per agent token. Terminal-only reward R, zero intermediate rewards, V after
// the last step is 0; value predictions are clamped to [0, 1].
std::vector<double> gae_advantages(const Trajectory& traj, const ValueFunction& value, const Vocab& vocab,
                                   double gamma = 1.0, double lambda = 1.0);

// Loss coefficient decaying linearly from `start` to `end` over `span` iterations.
struct ValueSchedule {
  double start = 0.1;
  double end = 0.001;
  int span = 200;

  double coefficient(int iteration) const;
};

struct ValueFitConfig {
  double lr = 0.5;
  int steps = 1;
  ValueSchedule schedule;
};

// Gradient steps on coefficient(iteration) * mean squared error between V and R
// over agent tokens. Returns the mean squared error before the first step.
double fit_value(ValueFunction& value, const RolloutBuffer& buffer, const Vocab& vocab, int iteration,
                 const ValueFitConfig& config = {});

// Drops entries with |A| < threshold, keeping the order of the rest.
RolloutBuffer filter_low_advantage(const RolloutBuffer& buffer, double threshold = kDefaultAdvantageThreshold);

}  // namespace loop

#endif  // LOOP_ADVANTAGE_HPP_
