#ifndef LOOP_ROLLOUT_HPP_
#define LOOP_ROLLOUT_HPP_

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stop_token>
#include <string>
#include <vector>

#include "loop/miniworld.hpp"
#include "loop/policy.hpp"

namespace loop {

inline constexpr int kContextCap = 1024;
inline constexpr double kLogRatioClamp = 30.0;

enum class Granularity { kToken, kTurn, kTrajectory };
std::string to_string(Granularity g);
Granularity granularity_from_string(const std::string& s);

// Half-open range [start, end) of agent-token positions in Trajectory::tokens.
struct TurnSpan {
  std::size_t start = 0;
  std::size_t end = 0;
  bool operator==(const TurnSpan&) const = default;
};

// What the environment reported for one turn; enough to recompute the
// behavior metrics without replaying.
struct TurnRecord {
  std::vector<std::string> endpoints_attempted;
  bool execution_error = false;
  int commands = 0;
  int docs_calls = 0;
  bool operator==(const TurnRecord&) const = default;
};

struct Trajectory {
  std::string task_id;
  std::uint64_t seed = 0;
  int replicate = 0;
  std::vector<Token> context;
  std::vector<Token> tokens;
  std::vector<std::uint8_t> action_mask;
  std::vector<TurnSpan> turn_spans;
  // log p at sampling time, one per agent token in position order. Empty for
  // scripted demonstrations.
  std::vector<double> sampling_logprobs;
  std::vector<TurnRecord> turns;
  double ret = 0.0;
  bool truncated = false;

  std::size_t agent_tokens() const;
  bool operator==(const Trajectory&) const = default;
};

struct BufferEntry {
  Trajectory traj;
  double advantage = 0.0;
  // Per agent token; only the learned-critic baseline fills this.
  std::vector<double> token_advantages;
};

struct RolloutBuffer {
  int iteration = 0;
  std::vector<BufferEntry> entries;
};

// Feature rows for every agent token: position i of the result describes the
// context before the i-th agent token.
std::vector<SparseFeatures> agent_features(const Trajectory& traj, const FeatureConfig& features,
                                           const Vocab& vocab);
std::vector<Token> agent_token_ids(const Trajectory& traj);

struct RolloutLimits {
  int turn_limit = miniworld::kTrainTurnLimit;
  int token_cap = miniworld::kTurnTokenCap;
  int context_cap = kContextCap;
};

// Samples one episode. Returns nullopt only if `stop` is requested mid-episode.
std::optional<Trajectory> collect_rollout(const PolicyParams& params, const miniworld::Task& task,
                                          double temperature, std::uint64_t seed, const RolloutLimits& limits,
                                          std::stop_token stop = {});

// Builds a trajectory from fixed turns (demonstrations); no sampling logprobs.
Trajectory scripted_rollout(const miniworld::Task& task, std::span<const std::vector<Token>> turns,
                            std::shared_ptr<const Vocab> vocab, int turn_limit);

double traj_logprob(const PolicyParams& params, const Trajectory& traj);

struct Ratios {
  std::vector<double> values;
  std::vector<double> log_values;  // unclamped
  int clamped = 0;
};
// token: one ratio per agent token; turn: product within each turn span;
// trajectory: a single product over all agent tokens.
Ratios importance_ratios(const PolicyParams& params, const Trajectory& traj, Granularity g);
// Same, from precomputed current log-probabilities of the agent tokens.
Ratios importance_ratios(std::span<const double> current_logprobs, const Trajectory& traj, Granularity g);

std::uint64_t rollout_seed(std::uint64_t seed, const std::string& task_id, int replicate);

struct CollectConfig {
  int K = 6;
  double temperature = 1.0;
  int workers = 1;
  int min_per_task = 4;
  double frac_total = 0.9;
  std::uint64_t seed = 0;
  RolloutLimits limits;
};

struct CollectStats {
  int launched = 0;
  int completed = 0;
  int failed = 0;
  int late = 0;
  int threshold_total = 0;
};

// Runs one rollout job. A throw marks the job failed. Returning nullopt means
// the job was abandoned after a stop request.
using RolloutRunner = std::function<std::optional<Trajectory>(
    const miniworld::Task& task, int replicate, std::uint64_t seed, std::stop_token stop)>;

// Smallest total that satisfies frac_total of K * n_tasks.
int straggler_threshold(int K, int n_tasks, double frac_total);

// K seeded rollouts per task over a worker pool, stopping once every task has
// min_per_task completions and the total reaches the threshold. The returned
// buffer is ordered by (task position, replicate).
RolloutBuffer collect_parallel(const PolicyParams& params, std::span<const miniworld::Task> tasks,
                               const CollectConfig& config, CollectStats* stats = nullptr,
                               const RolloutRunner& runner = {});

// One JSON record per line.
nlohmann::json trajectory_to_json(const Trajectory& traj, const Vocab& vocab);
Trajectory trajectory_from_json(const nlohmann::json& j, const Vocab& vocab);
void write_trajectories(const std::filesystem::path& path, std::span<const Trajectory> trajs, const Vocab& vocab);
std::vector<Trajectory> read_trajectories(const std::filesystem::path& path, const Vocab& vocab);

}  // namespace loop

#endif  // LOOP_ROLLOUT_HPP_
