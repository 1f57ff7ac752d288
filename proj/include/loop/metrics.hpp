#ifndef LOOP_METRICS_HPP_
#define LOOP_METRICS_HPP_

#include <span>

#include <nlohmann/json.hpp>

#include "loop/rollout.hpp"

namespace loop {

struct BehaviorReport {
  double turns_per_rollout = 0.0;
  double commands_per_rollout = 0.0;
  double multi_command_turn_rate = 0.0;
  double execution_errors_per_turn = 0.0;
  double give_up_rate = 0.0;
  double docs_calls_per_rollout = 0.0;
  int rollouts = 0;
};

struct GiveUpCounts {
  int failed = 0;
  int recovered = 0;
};

// Failed-endpoint set tracking per rollout: an erroring turn adds its attempted
// endpoints to the set (new ones count as failed); a clean turn removes its
// endpoints (removals count as recovered).
GiveUpCounts give_up_counts(std::span<const Trajectory> rollouts);
// (failed - recovered) / failed, or 0 when nothing failed.
double give_up_rate(std::span<const Trajectory> rollouts);

BehaviorReport behavior_report(std::span<const Trajectory> rollouts);

nlohmann::json to_json(const BehaviorReport& report);

}  // namespace loop

#endif  // LOOP_METRICS_HPP_
