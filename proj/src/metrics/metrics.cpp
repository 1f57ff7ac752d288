#include "loop/metrics.hpp"

#include <set>

namespace loop {

GiveUpCounts give_up_counts(std::span<const Trajectory> rollouts) {
  GiveUpCounts total;
  for (const auto& r : rollouts) {
    std::set<std::string> pending;
    for (const auto& turn : r.turns) {
      if (turn.execution_error) {
        for (const auto& e : turn.endpoints_attempted) {
          if (pending.insert(e).second) ++total.failed;
        }
      } else {
        for (const auto& e : turn.endpoints_attempted) total.recovered += static_cast<int>(pending.erase(e));
      }
    }
  }
  return total;
}

double give_up_rate(std::span<const Trajectory> rollouts) {
  const auto c = give_up_counts(rollouts);
  if (c.failed == 0) return 0.0;
  return static_cast<double>(c.failed - c.recovered) / static_cast<double>(c.failed);
}

BehaviorReport behavior_report(std::span<const Trajectory> rollouts) {
  BehaviorReport rep;
  rep.rollouts = static_cast<int>(rollouts.size());
  if (rollouts.empty()) return rep;
  long turns = 0, commands = 0, multi = 0, errors = 0, docs = 0;
  for (const auto& r : rollouts) {
    for (const auto& t : r.turns) {
      ++turns;
      commands += t.commands;
      docs += t.docs_calls;
      if (t.commands > 1) ++multi;
      if (t.execution_error) ++errors;
    }
  }
  const double n = static_cast<double>(rollouts.size());
  rep.turns_per_rollout = static_cast<double>(turns) / n;
  rep.commands_per_rollout = static_cast<double>(commands) / n;
  rep.docs_calls_per_rollout = static_cast<double>(docs) / n;
  if (turns > 0) {
    rep.multi_command_turn_rate = static_cast<double>(multi) / static_cast<double>(turns);
    rep.execution_errors_per_turn = static_cast<double>(errors) / static_cast<double>(turns);
  }
  rep.give_up_rate = give_up_rate(rollouts);
  return rep;
}

nlohmann::json to_json(const BehaviorReport& r) {
  return {{"rollouts", r.rollouts},
          {"turns_per_rollout", r.turns_per_rollout},
          {"commands_per_rollout", r.commands_per_rollout},
          {"multi_command_turn_rate", r.multi_command_turn_rate},
          {"execution_errors_per_turn", r.execution_errors_per_turn},
          {"give_up_rate", r.give_up_rate},
          {"docs_calls_per_rollout", r.docs_calls_per_rollout}};
}

}  // namespace loop
