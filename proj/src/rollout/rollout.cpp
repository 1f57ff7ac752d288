#include "loop/rollout.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <condition_variable>
#include <fstream>
#include <mutex>
#include <thread>

#include <spdlog/spdlog.h>

#include "loop/error.hpp"
#include "loop/seeding.hpp"

namespace loop {

std::string to_string(Granularity g) {
  switch (g) {
    case Granularity::kToken: return "token";
    case Granularity::kTurn: return "turn";
    case Granularity::kTrajectory: return "trajectory";
  }
  return "token";
}

Granularity granularity_from_string(const std::string& s) {
  if (s == "token") return Granularity::kToken;
  if (s == "turn") return Granularity::kTurn;
  if (s == "trajectory") return Granularity::kTrajectory;
  throw ConfigError("unknown granularity: " + s);
}

std::size_t Trajectory::agent_tokens() const {
  return static_cast<std::size_t>(std::count(action_mask.begin(), action_mask.end(), 1));
}

std::vector<SparseFeatures> agent_features(const Trajectory& traj, const FeatureConfig& features,
                                           const Vocab& vocab) {
  std::vector<Token> full = traj.context;
  full.insert(full.end(), traj.tokens.begin(), traj.tokens.end());
  std::vector<SparseFeatures> out;
  out.reserve(traj.tokens.size());
  const std::size_t offset = traj.context.size();
  for (std::size_t i = 0; i < traj.tokens.size(); ++i) {
    if (!traj.action_mask[i]) continue;
    out.push_back(sparse_featurize(std::span<const Token>(full.data(), offset + i), features, vocab));
  }
  return out;
}

std::vector<Token> agent_token_ids(const Trajectory& traj) {
  std::vector<Token> out;
  for (std::size_t i = 0; i < traj.tokens.size(); ++i) {
    if (traj.action_mask[i]) out.push_back(traj.tokens[i]);
  }
  return out;
}

namespace {

void append_env(Trajectory& tr, std::vector<Token>& full, std::span<const Token> tokens) {
  for (Token t : tokens) {
    tr.tokens.push_back(t);
    tr.action_mask.push_back(0);
    full.push_back(t);
  }
}

TurnRecord record_of(const miniworld::TurnResult& r) {
  return {r.endpoints_attempted, r.execution_error, r.commands, r.docs_calls};
}

}  // namespace

std::optional<Trajectory> collect_rollout(const PolicyParams& params, const miniworld::Task& task,
                                          double temperature, std::uint64_t seed, const RolloutLimits& limits,
                                          std::stop_token stop) {
  const Vocab& vocab = params.vocab();
  Rng rng(seed);
  miniworld::Episode ep(task, params.vocab_ptr(), limits.turn_limit);
  Trajectory tr;
  tr.task_id = task.task_id;
  tr.seed = seed;
  tr.context = ep.context();
  std::vector<Token> full = tr.context;
  const auto cap = static_cast<std::size_t>(limits.context_cap);
  bool context_full = false;

  while (!ep.done()) {
    std::vector<Token> turn;
    const std::size_t start = tr.tokens.size();
    bool stopped = false;
    while (!stopped) {
      if (stop.stop_requested()) return std::nullopt;
      if (full.size() >= cap) {
        context_full = true;
        break;
      }
      if (turn.size() >= static_cast<std::size_t>(limits.token_cap)) break;
      auto lp = logprobs(params, full);
      Token t = sample_token(lp, temperature, rng);
      tr.sampling_logprobs.push_back(lp[t]);
      tr.tokens.push_back(t);
      tr.action_mask.push_back(1);
      full.push_back(t);
      turn.push_back(t);
      stopped = t == vocab.stop();
    }
    if (tr.tokens.size() > start) tr.turn_spans.push_back({start, tr.tokens.size()});
    if (context_full) {
      ep.terminate();
      break;
    }
    if (!stopped) {
      // Token cap reached: the environment forces the stop token.
      const Token forced = vocab.stop();
      append_env(tr, full, std::span<const Token>(&forced, 1));
      turn.push_back(forced);
    }
    auto result = ep.step(turn);
    tr.turns.push_back(record_of(result));
    append_env(tr, full, result.response_tokens);
  }
  tr.truncated = context_full || ep.hit_limit();
  tr.ret = ep.reward();
  return tr;
}

Trajectory scripted_rollout(const miniworld::Task& task, std::span<const std::vector<Token>> turns,
                            std::shared_ptr<const Vocab> vocab, int turn_limit) {
  miniworld::Episode ep(task, vocab, turn_limit);
  Trajectory tr;
  tr.task_id = task.task_id;
  tr.context = ep.context();
  std::vector<Token> full = tr.context;
  for (const auto& turn : turns) {
    if (ep.done()) break;
    const std::size_t start = tr.tokens.size();
    for (Token t : turn) {
      tr.tokens.push_back(t);
      tr.action_mask.push_back(1);
    }
    tr.turn_spans.push_back({start, tr.tokens.size()});
    auto result = ep.step(turn);
    tr.turns.push_back(record_of(result));
    append_env(tr, full, result.response_tokens);
  }
  tr.truncated = ep.hit_limit();
  tr.ret = ep.reward();
  return tr;
}

double traj_logprob(const PolicyParams& params, const Trajectory& traj) {
  auto phis = agent_features(traj, params.features(), params.vocab());
  auto ids = agent_token_ids(traj);
  double total = 0.0;
  for (std::size_t i = 0; i < ids.size(); ++i) total += logprobs(params, phis[i])[ids[i]];
  return total;
}

Ratios importance_ratios(std::span<const double> current, const Trajectory& traj, Granularity g) {
  if (traj.sampling_logprobs.size() != traj.agent_tokens()) {
    throw ContractViolation("importance_ratios: trajectory lacks sampling log-probabilities");
  }
  if (current.size() != traj.sampling_logprobs.size()) {
    throw ContractViolation("importance_ratios: log-probability count mismatch");
  }
  std::vector<double> logs;
  switch (g) {
    case Granularity::kToken:
      for (std::size_t i = 0; i < current.size(); ++i) logs.push_back(current[i] - traj.sampling_logprobs[i]);
      break;
    case Granularity::kTurn: {
      std::size_t k = 0;
      for (const auto& span : traj.turn_spans) {
        double sum = 0.0;
        for (std::size_t n = span.end - span.start; n > 0; --n, ++k) sum += current[k] - traj.sampling_logprobs[k];
        logs.push_back(sum);
      }
      break;
    }
    case Granularity::kTrajectory: {
      double sum = 0.0;
      for (std::size_t i = 0; i < current.size(); ++i) sum += current[i] - traj.sampling_logprobs[i];
      logs.push_back(sum);
      break;
    }
  }
  Ratios out;
  out.log_values = logs;
  out.values.reserve(logs.size());
  for (double l : logs) {
    if (std::abs(l) > kLogRatioClamp) ++out.clamped;
    out.values.push_back(std::exp(std::clamp(l, -kLogRatioClamp, kLogRatioClamp)));
  }
  return out;
}

Ratios importance_ratios(const PolicyParams& params, const Trajectory& traj, Granularity g) {
  auto phis = agent_features(traj, params.features(), params.vocab());
  auto ids = agent_token_ids(traj);
  std::vector<double> current(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) current[i] = logprobs(params, phis[i])[ids[i]];
  return importance_ratios(current, traj, g);
}

std::uint64_t rollout_seed(std::uint64_t seed, const std::string& task_id, int replicate) {
  return mix_seed({seed, fnv1a(task_id), static_cast<std::uint64_t>(replicate)});
}

int straggler_threshold(int K, int n_tasks, double frac_total) {
  return static_cast<int>(std::ceil(frac_total * K * n_tasks - 1e-9));
}

RolloutBuffer collect_parallel(const PolicyParams& params, std::span<const miniworld::Task> tasks,
                               const CollectConfig& config, CollectStats* stats, const RolloutRunner& runner) {
  if (config.K < 2) throw ContractViolation("collect_parallel: K must be >= 2");
  if (config.min_per_task < 1 || config.min_per_task > config.K) {
    throw ContractViolation("collect_parallel: min_per_task must be in [1, K]");
  }
  if (!(config.frac_total > 0.0 && config.frac_total <= 1.0)) {
    throw ContractViolation("collect_parallel: frac_total must be in (0, 1]");
  }
  if (config.workers < 1) throw ContractViolation("collect_parallel: workers must be >= 1");

  const std::size_t n = tasks.size();
  const std::size_t total = n * static_cast<std::size_t>(config.K);
  const int threshold = straggler_threshold(config.K, static_cast<int>(n), config.frac_total);

  RolloutRunner run = runner;
  if (!run) {
    run = [&](const miniworld::Task& task, int, std::uint64_t seed, std::stop_token stop) {
      return collect_rollout(params, task, config.temperature, seed, config.limits, stop);
    };
  }

  std::vector<std::optional<Trajectory>> results(total);
  std::vector<int> per_task(n, 0);
  int tasks_ready = 0;
  CollectStats local;
  local.threshold_total = threshold;
  bool satisfied = n == 0;
  std::mutex mu;
  std::stop_source source;
  std::atomic<std::size_t> next{0};

  auto worker = [&] {
    while (!source.stop_requested()) {
      const std::size_t job = next.fetch_add(1);
      if (job >= total) break;
      // Replicate-major: every task gets its r-th rollout before any gets its (r+1)-th.
      const std::size_t ti = job % n;
      const int rep = static_cast<int>(job / n);
      const auto seed = rollout_seed(config.seed, tasks[ti].task_id, rep);
      {
        std::lock_guard lock(mu);
        ++local.launched;
      }
      std::optional<Trajectory> out;
      bool ok = true;
      try {
        out = run(tasks[ti], rep, seed, source.get_token());
      } catch (const std::exception& e) {
        ok = false;
        spdlog::warn("rollout {} replicate {} failed: {}", tasks[ti].task_id, rep, e.what());
      }
      std::lock_guard lock(mu);
      if (!ok) {
        ++local.failed;
      } else if (!out || satisfied) {
        ++local.late;
        spdlog::debug("discarding late rollout {} replicate {}", tasks[ti].task_id, rep);
      } else {
        out->replicate = rep;
        results[ti * static_cast<std::size_t>(config.K) + static_cast<std::size_t>(rep)] = std::move(out);
        ++local.completed;
        if (++per_task[ti] == config.min_per_task) ++tasks_ready;
        if (tasks_ready == static_cast<int>(n) && local.completed >= threshold) {
          satisfied = true;
          source.request_stop();
        }
      }
    }
  };

  {
    std::vector<std::jthread> pool;
    const int workers = std::min<int>(config.workers, static_cast<int>(std::max<std::size_t>(total, 1)));
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
  }
  if (!satisfied) {
    spdlog::warn("collection ended below the stop thresholds: {} of {} rollouts, {} failed", local.completed,
                 total, local.failed);
  }
  if (local.late > 0) spdlog::info("discarded {} straggler rollouts", local.late);

  RolloutBuffer buffer;
  for (auto& r : results) {
    if (r) buffer.entries.push_back({std::move(*r), 0.0, {}});
  }
  if (stats) *stats = local;
  return buffer;
}

nlohmann::json trajectory_to_json(const Trajectory& traj, const Vocab& vocab) {
  nlohmann::json spans = nlohmann::json::array();
  for (const auto& s : traj.turn_spans) spans.push_back({s.start, s.end});
  nlohmann::json turns = nlohmann::json::array();
  for (const auto& t : traj.turns) {
    turns.push_back({{"endpoints", t.endpoints_attempted},
                     {"error", t.execution_error},
                     {"commands", t.commands},
                     {"docs_calls", t.docs_calls}});
  }
  return {{"task_id", traj.task_id},
          {"seed", traj.seed},
          {"replicate", traj.replicate},
          {"context", vocab.decode(traj.context)},
          {"tokens", vocab.decode(traj.tokens)},
          {"mask", traj.action_mask},
          {"turn_spans", spans},
          {"sampling_logprobs", traj.sampling_logprobs},
          {"turns", turns},
          {"return", traj.ret},
          {"truncated", traj.truncated}};
}

Trajectory trajectory_from_json(const nlohmann::json& j, const Vocab& vocab) {
  try {
    Trajectory t;
    t.task_id = j.at("task_id").get<std::string>();
    t.seed = j.at("seed").get<std::uint64_t>();
    t.replicate = j.value("replicate", 0);
    t.context = vocab.encode(j.at("context").get<std::vector<std::string>>());
    t.tokens = vocab.encode(j.at("tokens").get<std::vector<std::string>>());
    t.action_mask = j.at("mask").get<std::vector<std::uint8_t>>();
    for (const auto& s : j.at("turn_spans")) t.turn_spans.push_back({s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>()});
    t.sampling_logprobs = j.at("sampling_logprobs").get<std::vector<double>>();
    for (const auto& r : j.at("turns")) {
      t.turns.push_back({r.at("endpoints").get<std::vector<std::string>>(), r.at("error").get<bool>(),
                         r.at("commands").get<int>(), r.at("docs_calls").get<int>()});
    }
    t.ret = j.at("return").get<double>();
    t.truncated = j.at("truncated").get<bool>();
    if (t.action_mask.size() != t.tokens.size()) throw MalformedInput("trajectory mask length mismatch");
    if (!t.sampling_logprobs.empty() && t.sampling_logprobs.size() != t.agent_tokens()) {
      throw MalformedInput("trajectory has " + std::to_string(t.sampling_logprobs.size()) +
                           " sampling log-probabilities for " + std::to_string(t.agent_tokens()) +
                           " agent tokens");
    }
    if (!(t.ret >= 0.0 && t.ret <= 1.0)) throw MalformedInput("trajectory return outside [0, 1]");
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw MalformedInput(std::string("trajectory record: ") + e.what());
  }
}

void write_trajectories(const std::filesystem::path& path, std::span<const Trajectory> trajs, const Vocab& vocab) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  for (const auto& t : trajs) out << trajectory_to_json(t, vocab).dump() << '\n';
}

std::vector<Trajectory> read_trajectories(const std::filesystem::path& path, const Vocab& vocab) {
  std::ifstream in(path);
  if (!in) throw MalformedInput("cannot open rollout file: " + path.string());
  std::vector<Trajectory> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(trajectory_from_json(nlohmann::json::parse(line), vocab));
    } catch (const nlohmann::json::exception& e) {
      throw MalformedInput(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const MalformedInput& e) {
      throw MalformedInput(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace loop
