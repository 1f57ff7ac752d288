#ifndef LOOP_TRAINER_HPP_
#define LOOP_TRAINER_HPP_

#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "loop/advantage.hpp"
#include "loop/losses.hpp"
#include "loop/miniworld.hpp"
#include "loop/policy.hpp"
#include "loop/rollout.hpp"

namespace loop {

enum class Algorithm { kLoop, kRloo, kGrpo, kGrpoNoKl, kLoopRwNorm, kPpoCritic, kRft, kEi };
std::string to_string(Algorithm a);
Algorithm algorithm_from_string(const std::string& s);
// rloo and the grpo variants: one full-batch update per collection.
bool strictly_on_policy(Algorithm a);

struct TrainConfig {
  Algorithm algorithm = Algorithm::kLoop;
  Granularity granularity = Granularity::kToken;
  int K = 6;
  int tasks_per_iter = 40;
  int n_epoch = 2;
  int minibatch = 16;
  // One update per epoch over the whole buffer instead of minibatches.
  bool full_batch = false;
  double epsilon = 0.2;
  double lr = 2.0;
  double max_grad_norm = 1.0;
  double adv_filter_threshold = kDefaultAdvantageThreshold;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  int iterations = 200;
  int eval_every = 10;
  int min_per_task = 4;
  double frac_total = 0.9;
  int workers = 1;
  int max_difficulty = 2;
  double kl_beta = 0.01;
  double divergence_threshold = 10.0;
  int max_divergent_updates = 10;
  RolloutLimits limits;
  int eval_turn_limit = miniworld::kEvalTurnLimit;
  // Learned-critic baseline.
  double gae_gamma = 1.0;
  double gae_lambda = 1.0;
  ValueFitConfig value;
  // Cross-entropy fine-tuning used by rft and ei.
  int ce_epochs = 50;
  double ce_lr = 0.3;

  // Applies the strict-on-policy overrides and checks ranges.
  TrainConfig normalized() const;
};

nlohmann::json to_json(const TrainConfig& c);
// Starts from `base` and overrides the keys present in `j`.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

struct IterationMetrics {
  int iteration = 0;
  double mean_return = 0.0;
  int collected = 0;
  int buffer_size = 0;
  int updates = 0;
  int skipped_updates = 0;
  double grad_norm = 0.0;
  double clip_fraction = 0.0;
  double mean_objective = 0.0;
  int retained = 0;
  std::optional<double> dev_tgc;
  std::optional<double> dev_sgc;
  double seconds = 0.0;
};
nlohmann::json to_json(const IterationMetrics& m);
IterationMetrics iteration_metrics_from_json(const nlohmann::json& j);

struct Checkpoint {
  int iteration = 0;
  PolicyParams params;
  double dev_tgc = 0.0;
  double dev_sgc = 0.0;
  nlohmann::json metrics;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TaskSplits {
  std::vector<miniworld::Task> train;
  std::vector<miniworld::Task> dev;
  std::vector<miniworld::Task> test;
};
TaskSplits split_tasks(std::span<const miniworld::Task> tasks);
std::vector<miniworld::Task> max_difficulty(std::span<const miniworld::Task> tasks, int difficulty);

struct TrainHooks {
  std::function<void(const IterationMetrics&, const PolicyParams&)> on_iteration;
  std::function<void(const Checkpoint&)> on_checkpoint;
};

// Algorithm 1 for the policy-gradient algorithms; rft and ei dispatch to
// their own loops. Iterations run from start_iteration + 1 to
// config.iterations; a dev evaluation at start_iteration is recorded first.
// `reference` is the frozen KL anchor; when null, `base` is used. Resumed
// runs pass the original base here.
std::vector<Checkpoint> train(const TrainConfig& config, const PolicyParams& base, const TaskSplits& splits,
                              const TrainHooks& hooks = {}, int start_iteration = 0,
                              const PolicyParams* reference = nullptr);

// Builds the buffer for one iteration: collection, grouping, advantages and
// filtering. Exposed for the equivalence checks.
struct PreparedBuffer {
  RolloutBuffer buffer;
  int collected = 0;
  double mean_return = 0.0;
};
PreparedBuffer prepare_buffer(const TrainConfig& config, const PolicyParams& params,
                              std::span<const miniworld::Task> tasks, int iteration,
                              const ValueFunction* value = nullptr);
std::vector<miniworld::Task> sample_tasks(std::span<const miniworld::Task> pool, int count, std::uint64_t seed,
                                          int iteration);

struct UpdateStats {
  int updates = 0;
  int skipped = 0;
  double grad_norm = 0.0;
  double clip_fraction = 0.0;
  double mean_objective = 0.0;
};
// The policy-update phase on a prepared buffer. `ref` is the KL reference.
UpdateStats update_policy(const TrainConfig& config, PolicyParams& params, const RolloutBuffer& buffer,
                          const PolicyParams* ref, int iteration, int* divergent_total = nullptr);

// Single collection round with the base policy, keeping R = 1 rollouts.
// Throws std::runtime_error when nothing succeeds.
std::vector<Checkpoint> rft_train(const TrainConfig& config, const PolicyParams& base, const TaskSplits& splits,
                                  const TrainHooks& hooks = {});
std::vector<Checkpoint> ei_train(const TrainConfig& config, const PolicyParams& base, const TaskSplits& splits,
                                 const TrainHooks& hooks = {}, int start_iteration = 0);

struct TaskOutcome {
  std::string task_id;
  std::string scenario_id;
  double ret = 0.0;
  bool success = false;
};
struct EvalResult {
  double tgc = 0.0;
  double sgc = 0.0;
  std::vector<TaskOutcome> records;
  std::vector<Trajectory> rollouts;
};
// TGC: fraction of tasks with R = 1; SGC: fraction of scenarios whose every
// task has R = 1.
EvalResult goal_completion(std::vector<TaskOutcome> records);
EvalResult evaluate_policy(const PolicyParams& params, std::span<const miniworld::Task> tasks,
                           double temperature = 0.0, std::uint64_t seed = 0,
                           int turn_limit = miniworld::kEvalTurnLimit, int workers = 1);

// Highest dev TGC; the earliest iteration wins ties.
const Checkpoint& select_best(std::span<const Checkpoint> history);

// Full-batch gradient ascent on the mean agent-token log-likelihood of `demos`.
PolicyParams clone_pretrain(const PolicyParams& init, std::span<const Trajectory> demos, int epochs, double lr,
                            std::vector<double>* loss_history = nullptr);

// Scripted demonstrations, `per_task` per task, with noise level `noise` used
// for both the DOCS and premature-call rates.
std::vector<Trajectory> demo_corpus(std::span<const miniworld::Task> tasks, std::shared_ptr<const Vocab> vocab,
                                    double noise, int per_task, std::uint64_t seed);

struct PretrainConfig {
  int window = 12;
  int epochs = 3000;
  double lr = 0.3;
  int demos_per_task = 2;
  std::vector<double> noise_grid = {0.5, 0.55, 0.6, 0.65, 0.7, 0.8, 0.9, 1.0};
  double band_low = 0.2;
  double band_high = 0.5;
  std::uint64_t seed = 0;
  int eval_turn_limit = miniworld::kEvalTurnLimit;
};
nlohmann::json to_json(const PretrainConfig& c);
PretrainConfig pretrain_config_from_json(const nlohmann::json& j, PretrainConfig base = {});

struct PretrainResult {
  PolicyParams params;
  double noise = 0.0;
  double dev_tgc = 0.0;
  std::vector<std::pair<double, double>> tried;  // (noise, dev TGC)
};
// Walks the noise grid until the cloned policy's greedy dev TGC lands in the
// band. Throws ConfigError when no grid point does.
PretrainResult pretrain_in_band(std::span<const miniworld::Task> train_tasks,
                                std::span<const miniworld::Task> dev_tasks, const PretrainConfig& config);

}  // namespace loop

#endif  // LOOP_TRAINER_HPP_
