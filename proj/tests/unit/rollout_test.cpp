#include <chrono>
#include <cmath>
#include <filesystem>
#include <map>
#include <thread>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "loop/error.hpp"
#include "loop/rollout.hpp"

namespace loop {
namespace {

using testing::random_params;
using testing::relay_fixture;
using testing::sampled;

std::vector<miniworld::Task> fixture_tasks(int n) {
  std::vector<miniworld::Task> tasks;
  for (int i = 0; i < n; ++i) {
    auto t = relay_fixture();
    t.task_id = "fixture-s" + std::to_string(i) + "-v1";
    t.scenario_id = "fixture-s" + std::to_string(i);
    tasks.push_back(t);
  }
  return tasks;
}

// log p(token | prefix) from the dense path, position by position.
std::vector<double> dense_agent_logprobs(const PolicyParams& p, const Trajectory& t) {
  std::vector<Token> full = t.context;
  std::vector<double> out;
  for (std::size_t i = 0; i < t.tokens.size(); ++i) {
    if (t.action_mask[i]) out.push_back(logprobs(p, full)[t.tokens[i]]);
    full.push_back(t.tokens[i]);
  }
  return out;
}

TEST(Rollout, SamplingLogprobsMatchDenseRecomputation) {
  auto vocab = miniworld::make_vocab();
  Rng rng(3);
  auto p = random_params(vocab, 5, rng, 0.5);
  for (std::uint64_t s = 0; s < 10; ++s) {
    auto t = sampled(p, s);
    auto dense = dense_agent_logprobs(p, t);
    ASSERT_EQ(dense.size(), t.sampling_logprobs.size());
    for (std::size_t i = 0; i < dense.size(); ++i) EXPECT_NEAR(dense[i], t.sampling_logprobs[i], 1e-12);
  }
}

TEST(Rollout, MaskAndSpansAreConsistent) {
  auto vocab = miniworld::make_vocab();
  Rng rng(4);
  auto p = random_params(vocab, 4, rng, 0.5);
  auto t = sampled(p, 7);
  ASSERT_EQ(t.tokens.size(), t.action_mask.size());
  std::size_t covered = 0;
  for (const auto& s : t.turn_spans) {
    ASSERT_LE(s.end, t.tokens.size());
    for (std::size_t i = s.start; i < s.end; ++i) EXPECT_EQ(t.action_mask[i], 1);
    covered += s.end - s.start;
  }
  EXPECT_EQ(covered, t.agent_tokens());
  EXPECT_EQ(t.turn_spans.size(), t.turns.size());
}

TEST(Rollout, ForcedStopAtTokenCapIsNotAnAgentToken) {
  auto vocab = miniworld::make_vocab();
  PolicyParams p(vocab, FeatureConfig{2});
  // Strongly prefer a non-stop symbol so every turn hits the cap.
  p.weights().row(static_cast<Eigen::Index>(vocab->at("c1"))).array() += 50.0;
  RolloutLimits limits;
  limits.turn_limit = 2;
  limits.token_cap = 3;
  auto t = *collect_rollout(p, relay_fixture(), 1.0, 1, limits);
  ASSERT_EQ(t.turn_spans.size(), 2u);
  for (const auto& s : t.turn_spans) {
    EXPECT_EQ(s.end - s.start, 3u);
    EXPECT_EQ(t.tokens[s.end], vocab->stop());
    EXPECT_EQ(t.action_mask[s.end], 0);
  }
}

TEST(Rollout, SameSeedSameTrajectory) {
  auto vocab = miniworld::make_vocab();
  Rng rng(5);
  auto p = random_params(vocab, 4, rng, 0.5);
  EXPECT_EQ(sampled(p, 11), sampled(p, 11));
  EXPECT_NE(rollout_seed(1, "a", 0), rollout_seed(1, "a", 1));
  EXPECT_NE(rollout_seed(1, "a", 0), rollout_seed(1, "b", 0));
}

TEST(Rollout, ScriptedSolutionEarnsFullReward) {
  auto vocab = miniworld::make_vocab();
  auto task = relay_fixture();
  std::vector<std::vector<Token>> turns;
  for (const auto& cmd : task.solution) {
    std::string line;
    for (const auto& w : cmd) line += w + " ";
    turns.push_back(testing::turn(line, *vocab));
  }
  auto t = scripted_rollout(task, turns, vocab, 10);
  EXPECT_DOUBLE_EQ(t.ret, 1.0);
  EXPECT_TRUE(t.sampling_logprobs.empty());
  EXPECT_EQ(t.turns.size(), task.solution.size());
}

TEST(Ratios, DecomposeAcrossGranularities) {
  auto vocab = miniworld::make_vocab();
  Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    auto behavior = random_params(vocab, 3, rng, 0.3);
    auto current = testing::perturbed(behavior, rng, 0.2);
    auto t = sampled(behavior, static_cast<std::uint64_t>(trial));
    auto tok = importance_ratios(current, t, Granularity::kToken);
    auto turn = importance_ratios(current, t, Granularity::kTurn);
    auto traj = importance_ratios(current, t, Granularity::kTrajectory);
    ASSERT_EQ(traj.log_values.size(), 1u);
    ASSERT_EQ(turn.log_values.size(), t.turn_spans.size());

    auto dense = dense_agent_logprobs(current, t);
    double token_sum = 0.0;
    for (std::size_t i = 0; i < dense.size(); ++i) {
      EXPECT_NEAR(tok.log_values[i], dense[i] - t.sampling_logprobs[i], 1e-9);
      token_sum += tok.log_values[i];
    }
    double turn_sum = 0.0;
    std::size_t k = 0;
    for (std::size_t j = 0; j < t.turn_spans.size(); ++j) {
      double within = 0.0;
      for (std::size_t c = 0; c < t.turn_spans[j].end - t.turn_spans[j].start; ++c) within += tok.log_values[k++];
      EXPECT_NEAR(turn.log_values[j], within, 1e-9);
      turn_sum += turn.log_values[j];
    }
    EXPECT_NEAR(traj.log_values[0], turn_sum, 1e-9);
    EXPECT_NEAR(traj.log_values[0], token_sum, 1e-9);
    EXPECT_NEAR(traj.log_values[0], traj_logprob(current, t) - traj_logprob(behavior, t), 1e-9);
  }
}

TEST(Ratios, OnPolicyRatiosAreExactlyOne) {
  auto vocab = miniworld::make_vocab();
  Rng rng(7);
  auto p = random_params(vocab, 4, rng, 0.5);
  auto t = sampled(p, 3);
  for (auto g : {Granularity::kToken, Granularity::kTurn, Granularity::kTrajectory}) {
    for (double r : importance_ratios(p, t, g).values) EXPECT_EQ(r, 1.0);
  }
}

TEST(Ratios, ClampsExtremeLogRatios) {
  auto vocab = miniworld::make_vocab();
  Rng rng(8);
  auto p = random_params(vocab, 3, rng, 0.3);
  auto t = sampled(p, 1);
  ASSERT_FALSE(t.sampling_logprobs.empty());
  for (auto& lp : t.sampling_logprobs) lp -= 100.0;
  auto r = importance_ratios(p, t, Granularity::kTrajectory);
  EXPECT_EQ(r.clamped, 1);
  EXPECT_DOUBLE_EQ(r.values[0], std::exp(kLogRatioClamp));
  EXPECT_GT(r.log_values[0], kLogRatioClamp);
}

TEST(Ratios, ScriptedTrajectoryIsRejected) {
  auto vocab = miniworld::make_vocab();
  auto task = relay_fixture();
  std::vector<std::vector<Token>> turns = {testing::turn("DONE", *vocab)};
  auto t = scripted_rollout(task, turns, vocab, 10);
  PolicyParams p(vocab, FeatureConfig{2});
  EXPECT_THROW(importance_ratios(p, t, Granularity::kToken), ContractViolation);
}

TEST(Straggler, ThresholdRoundsUp) {
  EXPECT_EQ(straggler_threshold(6, 40, 0.9), 216);
  EXPECT_EQ(straggler_threshold(6, 10, 1.0), 60);
  EXPECT_EQ(straggler_threshold(6, 7, 0.5), 21);
  EXPECT_EQ(straggler_threshold(5, 3, 0.9), 14);
}

TEST(Straggler, SingleWorkerEqualsSequentialPrefix) {
  auto vocab = miniworld::make_vocab();
  Rng rng(9);
  auto p = random_params(vocab, 3, rng, 0.3);
  auto tasks = fixture_tasks(40);
  CollectConfig cfg;
  cfg.seed = 17;
  cfg.limits.turn_limit = 2;
  cfg.limits.token_cap = 4;
  CollectStats stats;
  auto buffer = collect_parallel(p, tasks, cfg, &stats);
  ASSERT_EQ(buffer.entries.size(), 216u);
  EXPECT_EQ(stats.completed, 216);
  EXPECT_EQ(stats.threshold_total, 216);

  // Replicate-major order: reps 0-3 everywhere, rep 4 for all 40 tasks, rep 5
  // for the first 16.
  std::vector<Trajectory> expected;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const int reps = 5 + (i < 16 ? 1 : 0);
    for (int r = 0; r < reps; ++r) {
      auto t = collect_rollout(p, tasks[i], cfg.temperature, rollout_seed(cfg.seed, tasks[i].task_id, r), cfg.limits);
      t->replicate = r;
      expected.push_back(*t);
    }
  }
  ASSERT_EQ(expected.size(), buffer.entries.size());
  for (std::size_t i = 0; i < expected.size(); ++i) {
    EXPECT_EQ(buffer.entries[i].traj.task_id, expected[i].task_id);
    EXPECT_EQ(buffer.entries[i].traj.replicate, expected[i].replicate);
    EXPECT_EQ(buffer.entries[i].traj.tokens, expected[i].tokens);
  }
}

TEST(Straggler, DelayedWorkersStillMeetBothThresholds) {
  auto vocab = miniworld::make_vocab();
  Rng rng(10);
  auto p = random_params(vocab, 3, rng, 0.3);
  auto tasks = fixture_tasks(40);
  CollectConfig cfg;
  cfg.workers = 4;
  cfg.limits.turn_limit = 2;
  cfg.limits.token_cap = 4;
  RolloutRunner slow = [&](const miniworld::Task& task, int rep, std::uint64_t seed,
                           std::stop_token stop) -> std::optional<Trajectory> {
    // Every seventh task is a straggler on its late replicates.
    const bool straggler = std::hash<std::string>{}(task.task_id) % 7 == 0 && rep >= 4;
    for (int i = 0; i < (straggler ? 50 : 1); ++i) {
      if (stop.stop_requested()) return std::nullopt;
      std::this_thread::sleep_for(std::chrono::milliseconds(1));
    }
    return collect_rollout(p, task, cfg.temperature, seed, cfg.limits, stop);
  };
  CollectStats stats;
  auto buffer = collect_parallel(p, tasks, cfg, &stats, slow);
  EXPECT_GE(buffer.entries.size(), 216u);
  std::map<std::string, int> per_task;
  for (const auto& e : buffer.entries) ++per_task[e.traj.task_id];
  ASSERT_EQ(per_task.size(), tasks.size());
  for (const auto& [id, n] : per_task) EXPECT_GE(n, 4) << id;
  // Output stays in (task, replicate) order.
  for (std::size_t i = 1; i < buffer.entries.size(); ++i) {
    const auto& a = buffer.entries[i - 1].traj;
    const auto& b = buffer.entries[i].traj;
    if (a.task_id == b.task_id) EXPECT_LT(a.replicate, b.replicate);
  }
}

TEST(Straggler, ThrowingJobsCountAsFailed) {
  auto vocab = miniworld::make_vocab();
  PolicyParams p(vocab, FeatureConfig{2});
  auto tasks = fixture_tasks(3);
  CollectConfig cfg;
  cfg.K = 4;
  cfg.min_per_task = 1;
  cfg.frac_total = 0.5;
  cfg.limits.turn_limit = 1;
  RolloutRunner flaky = [&](const miniworld::Task& task, int rep, std::uint64_t seed,
                            std::stop_token stop) -> std::optional<Trajectory> {
    if (rep == 0) throw std::runtime_error("worker crashed");
    return collect_rollout(p, task, 1.0, seed, cfg.limits, stop);
  };
  CollectStats stats;
  auto buffer = collect_parallel(p, tasks, cfg, &stats, flaky);
  EXPECT_EQ(stats.failed, 3);
  EXPECT_EQ(buffer.entries.size(), 6u);
  for (const auto& e : buffer.entries) EXPECT_NE(e.traj.replicate, 0);
}

TEST(RolloutIo, JsonRoundTrip) {
  auto vocab = miniworld::make_vocab();
  Rng rng(12);
  auto p = random_params(vocab, 3, rng, 0.3);
  std::vector<Trajectory> ts = {sampled(p, 1), sampled(p, 2)};
  const auto path = std::filesystem::temp_directory_path() / "loop_rollout_io.jsonl";
  write_trajectories(path, ts, *vocab);
  auto back = read_trajectories(path, *vocab);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0], ts[0]);
  EXPECT_EQ(back[1], ts[1]);
  std::filesystem::remove(path);
}

TEST(RolloutIo, RejectsInconsistentRecord) {
  auto vocab = miniworld::make_vocab();
  Rng rng(13);
  auto p = random_params(vocab, 3, rng, 0.3);
  auto j = trajectory_to_json(sampled(p, 1), *vocab);
  j["mask"].push_back(1);
  EXPECT_THROW(trajectory_from_json(j, *vocab), MalformedInput);
}

}  // namespace
}  // namespace loop
