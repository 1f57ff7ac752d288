#include "loop/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <thread>

#include <spdlog/spdlog.h>

#include "loop/error.hpp"
#include "loop/seeding.hpp"

namespace loop {

namespace {

constexpr std::uint64_t kTagTasks = 0x7461736B73ULL;
constexpr std::uint64_t kTagCollect = 0x636F6C6C6563ULL;
constexpr std::uint64_t kTagShuffle = 0x73687566666CULL;
constexpr std::uint64_t kTagEval = 0x6576616CULL;
constexpr int kDemoTurnLimit = 100;

const std::map<Algorithm, std::string>& algorithm_names() {
  static const std::map<Algorithm, std::string> names = {
      {Algorithm::kLoop, "loop"},         {Algorithm::kRloo, "rloo"},
      {Algorithm::kGrpo, "grpo"},         {Algorithm::kGrpoNoKl, "grpo-no-kl"},
      {Algorithm::kLoopRwNorm, "loop-rwnorm"}, {Algorithm::kPpoCritic, "ppo-critic"},
      {Algorithm::kRft, "rft"},           {Algorithm::kEi, "ei"}};
  return names;
}

bool normalized_advantages(Algorithm a) {
  return a == Algorithm::kGrpo || a == Algorithm::kGrpoNoKl || a == Algorithm::kLoopRwNorm;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

std::string to_string(Algorithm a) { return algorithm_names().at(a); }

Algorithm algorithm_from_string(const std::string& s) {
  for (const auto& [a, name] : algorithm_names()) {
    if (name == s) return a;
  }
  throw ConfigError("unknown algorithm: " + s);
}

bool strictly_on_policy(Algorithm a) {
  return a == Algorithm::kRloo || a == Algorithm::kGrpo || a == Algorithm::kGrpoNoKl;
}

TrainConfig TrainConfig::normalized() const {
  TrainConfig c = *this;
  if (strictly_on_policy(c.algorithm)) {
    c.n_epoch = 1;
    c.full_batch = true;
  }
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("invalid training config: " + what);
  };
  require(c.K >= 2, "K must be >= 2");
  require(c.min_per_task >= 1 && c.min_per_task <= c.K, "min_per_task must be in [1, K]");
  require(c.frac_total > 0.0 && c.frac_total <= 1.0, "frac_total must be in (0, 1]");
  require(c.tasks_per_iter >= 1, "tasks_per_iter must be >= 1");
  require(c.n_epoch >= 1, "n_epoch must be >= 1");
  require(c.minibatch >= 1, "minibatch must be >= 1");
  require(c.epsilon > 0.0, "epsilon must be positive");
  require(c.lr >= 0.0, "lr must be >= 0");
  require(c.max_grad_norm > 0.0, "max_grad_norm must be positive");
  require(c.temperature >= 0.0, "temperature must be >= 0");
  require(c.iterations >= 0, "iterations must be >= 0");
  require(c.eval_every >= 1, "eval_every must be >= 1");
  require(c.workers >= 1, "workers must be >= 1");
  require(c.limits.turn_limit >= 1 && c.limits.token_cap >= 1 && c.limits.context_cap >= 1,
          "rollout limits must be >= 1");
  require(c.eval_turn_limit >= 1, "eval_turn_limit must be >= 1");
  require(c.gae_gamma > 0.0 && c.gae_gamma <= 1.0 && c.gae_lambda > 0.0 && c.gae_lambda <= 1.0,
          "gae_gamma and gae_lambda must be in (0, 1]");
  return c;
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"algorithm", to_string(c.algorithm)},
          {"granularity", to_string(c.granularity)},
          {"K", c.K},
          {"tasks_per_iter", c.tasks_per_iter},
          {"n_epoch", c.n_epoch},
          {"minibatch", c.minibatch},
          {"full_batch", c.full_batch},
          {"epsilon", c.epsilon},
          {"lr", c.lr},
          {"max_grad_norm", c.max_grad_norm},
          {"adv_filter_threshold", c.adv_filter_threshold},
          {"temperature", c.temperature},
          {"seed", c.seed},
          {"iterations", c.iterations},
          {"eval_every", c.eval_every},
          {"min_per_task", c.min_per_task},
          {"frac_total", c.frac_total},
          {"workers", c.workers},
          {"max_difficulty", c.max_difficulty},
          {"kl_beta", c.kl_beta},
          {"divergence_threshold", c.divergence_threshold},
          {"max_divergent_updates", c.max_divergent_updates},
          {"limits",
           {{"turn_limit", c.limits.turn_limit},
            {"token_cap", c.limits.token_cap},
            {"context_cap", c.limits.context_cap}}},
          {"eval_turn_limit", c.eval_turn_limit},
          {"gae_gamma", c.gae_gamma},
          {"gae_lambda", c.gae_lambda},
          {"value",
           {{"lr", c.value.lr},
            {"steps", c.value.steps},
            {"coef_start", c.value.schedule.start},
            {"coef_end", c.value.schedule.end},
            {"coef_span", c.value.schedule.span}}},
          {"ce_epochs", c.ce_epochs},
          {"ce_lr", c.ce_lr}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
  if (!j.is_object()) throw ConfigError("training config must be a JSON object");
  try {
    auto known = to_json(c);
    for (const auto& [key, value] : j.items()) {
      if (!known.contains(key)) throw ConfigError("unknown config key: " + key);
      if (known[key].is_object()) {
        if (!value.is_object()) throw ConfigError("config key " + key + " must be an object");
        for (const auto& [sub, v] : value.items()) {
          if (!known[key].contains(sub)) throw ConfigError("unknown config key: " + key + "." + sub);
        }
      }
    }
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    if (j.contains("algorithm")) c.algorithm = algorithm_from_string(j.at("algorithm").get<std::string>());
    if (j.contains("granularity")) c.granularity = granularity_from_string(j.at("granularity").get<std::string>());
    get("K", c.K);
    get("tasks_per_iter", c.tasks_per_iter);
    get("n_epoch", c.n_epoch);
    get("minibatch", c.minibatch);
    get("full_batch", c.full_batch);
    get("epsilon", c.epsilon);
    get("lr", c.lr);
    get("max_grad_norm", c.max_grad_norm);
    get("adv_filter_threshold", c.adv_filter_threshold);
    get("temperature", c.temperature);
    get("seed", c.seed);
    get("iterations", c.iterations);
    get("eval_every", c.eval_every);
    get("min_per_task", c.min_per_task);
    get("frac_total", c.frac_total);
    get("workers", c.workers);
    get("max_difficulty", c.max_difficulty);
    get("kl_beta", c.kl_beta);
    get("divergence_threshold", c.divergence_threshold);
    get("max_divergent_updates", c.max_divergent_updates);
    get("eval_turn_limit", c.eval_turn_limit);
    get("gae_gamma", c.gae_gamma);
    get("gae_lambda", c.gae_lambda);
    get("ce_epochs", c.ce_epochs);
    get("ce_lr", c.ce_lr);
    if (j.contains("limits")) {
      const auto& l = j.at("limits");
      if (l.contains("turn_limit")) c.limits.turn_limit = l.at("turn_limit").get<int>();
      if (l.contains("token_cap")) c.limits.token_cap = l.at("token_cap").get<int>();
      if (l.contains("context_cap")) c.limits.context_cap = l.at("context_cap").get<int>();
    }
    if (j.contains("value")) {
      const auto& v = j.at("value");
      if (v.contains("lr")) c.value.lr = v.at("lr").get<double>();
      if (v.contains("steps")) c.value.steps = v.at("steps").get<int>();
      if (v.contains("coef_start")) c.value.schedule.start = v.at("coef_start").get<double>();
      if (v.contains("coef_end")) c.value.schedule.end = v.at("coef_end").get<double>();
      if (v.contains("coef_span")) c.value.schedule.span = v.at("coef_span").get<int>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("training config: ") + e.what());
  }
  return c;
}

nlohmann::json to_json(const IterationMetrics& m) {
  nlohmann::json j = {{"iteration", m.iteration},
                      {"mean_return", m.mean_return},
                      {"collected", m.collected},
                      {"buffer_size", m.buffer_size},
                      {"updates", m.updates},
                      {"skipped_updates", m.skipped_updates},
                      {"grad_norm", m.grad_norm},
                      {"clip_fraction", m.clip_fraction},
                      {"mean_objective", m.mean_objective},
                      {"retained", m.retained},
                      {"seconds", m.seconds}};
  j["dev_tgc"] = m.dev_tgc ? nlohmann::json(*m.dev_tgc) : nlohmann::json();
  j["dev_sgc"] = m.dev_sgc ? nlohmann::json(*m.dev_sgc) : nlohmann::json();
  return j;
}

IterationMetrics iteration_metrics_from_json(const nlohmann::json& j) {
  IterationMetrics m;
  m.iteration = j.at("iteration").get<int>();
  m.mean_return = j.at("mean_return").get<double>();
  m.collected = j.value("collected", 0);
  m.buffer_size = j.value("buffer_size", 0);
  m.updates = j.value("updates", 0);
  m.skipped_updates = j.value("skipped_updates", 0);
  m.grad_norm = j.value("grad_norm", 0.0);
  m.clip_fraction = j.value("clip_fraction", 0.0);
  m.mean_objective = j.value("mean_objective", 0.0);
  m.retained = j.value("retained", 0);
  m.seconds = j.value("seconds", 0.0);
  if (j.contains("dev_tgc") && !j.at("dev_tgc").is_null()) m.dev_tgc = j.at("dev_tgc").get<double>();
  if (j.contains("dev_sgc") && !j.at("dev_sgc").is_null()) m.dev_sgc = j.at("dev_sgc").get<double>();
  return m;
}

TaskSplits split_tasks(std::span<const miniworld::Task> tasks) {
  TaskSplits s;
  for (const auto& t : tasks) {
    switch (t.split) {
      case miniworld::Split::kTrain: s.train.push_back(t); break;
      case miniworld::Split::kDev: s.dev.push_back(t); break;
      case miniworld::Split::kTest: s.test.push_back(t); break;
    }
  }
  return s;
}

std::vector<miniworld::Task> max_difficulty(std::span<const miniworld::Task> tasks, int difficulty) {
  std::vector<miniworld::Task> out;
  for (const auto& t : tasks) {
    if (t.difficulty <= difficulty) out.push_back(t);
  }
  return out;
}

std::vector<miniworld::Task> sample_tasks(std::span<const miniworld::Task> pool, int count, std::uint64_t seed,
                                          int iteration) {
  std::vector<std::size_t> idx(pool.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(mix_seed({seed, static_cast<std::uint64_t>(iteration), kTagTasks}));
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(idx.size(), static_cast<std::size_t>(count)));
  std::vector<miniworld::Task> out;
  for (auto i : idx) out.push_back(pool[i]);
  return out;
}

PreparedBuffer prepare_buffer(const TrainConfig& config, const PolicyParams& params,
                              std::span<const miniworld::Task> tasks, int iteration, const ValueFunction* value) {
  CollectConfig cc;
  cc.K = config.K;
  cc.temperature = config.temperature;
  cc.workers = config.workers;
  cc.min_per_task = config.min_per_task;
  cc.frac_total = config.frac_total;
  cc.seed = mix_seed({config.seed, static_cast<std::uint64_t>(iteration), kTagCollect});
  cc.limits = config.limits;
  PreparedBuffer out;
  out.buffer = collect_parallel(params, tasks, cc);
  out.buffer.iteration = iteration;
  auto& entries = out.buffer.entries;
  out.collected = static_cast<int>(entries.size());
  if (entries.empty()) return out;

  double total = 0.0;
  for (const auto& e : entries) total += e.traj.ret;
  out.mean_return = total / static_cast<double>(entries.size());

  if (config.algorithm == Algorithm::kPpoCritic) {
    if (!value) throw ContractViolation("prepare_buffer: the critic baseline needs a value function");
    for (auto& e : entries) {
      e.token_advantages = gae_advantages(e.traj, *value, params.vocab(), config.gae_gamma, config.gae_lambda);
      e.advantage = e.token_advantages.empty()
                        ? 0.0
                        : std::accumulate(e.token_advantages.begin(), e.token_advantages.end(), 0.0) /
                              static_cast<double>(e.token_advantages.size());
    }
    return out;
  }

  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < entries.size(); ++i) groups[entries[i].traj.task_id].push_back(i);
  for (const auto& [task_id, idx] : groups) {
    if (idx.size() < 2) {
      for (auto i : idx) entries[i].advantage = 0.0;
      continue;
    }
    std::vector<double> returns;
    for (auto i : idx) returns.push_back(entries[i].traj.ret);
    auto adv = normalized_advantages(config.algorithm) ? grpo_advantages(returns) : loo_advantages(returns);
    for (std::size_t k = 0; k < idx.size(); ++k) entries[idx[k]].advantage = adv[k];
  }
  out.buffer = filter_low_advantage(out.buffer, config.adv_filter_threshold);
  return out;
}

UpdateStats update_policy(const TrainConfig& config, PolicyParams& params, const RolloutBuffer& buffer,
                          const PolicyParams* ref, int iteration, int* divergent_total) {
  UpdateStats stats;
  const auto& entries = buffer.entries;
  if (entries.empty()) return stats;
  const bool use_kl = config.algorithm == Algorithm::kGrpo && config.kl_beta > 0.0;
  if (use_kl && !ref) throw ContractViolation("update_policy: KL penalty needs reference parameters");

  std::vector<AgentSteps> steps;
  steps.reserve(entries.size());
  for (const auto& e : entries) steps.push_back(agent_steps(e.traj, params));

  std::vector<std::size_t> order(entries.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix_seed({config.seed, static_cast<std::uint64_t>(iteration), kTagShuffle}));
  const std::size_t batch = config.full_batch ? entries.size() : static_cast<std::size_t>(config.minibatch);
  long terms = 0, clipped = 0;
  double norm_sum = 0.0, objective_sum = 0.0;

  for (int epoch = 0; epoch < config.n_epoch; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t begin = 0; begin < order.size(); begin += batch) {
      const std::size_t end = std::min(order.size(), begin + batch);
      GradAccumulator acc(params);
      long mb_terms = 0;
      double mb_dev = 0.0;
      for (std::size_t k = begin; k < end; ++k) {
        const auto& e = entries[order[k]];
        const auto& s = steps[order[k]];
        LossResult r;
        switch (config.algorithm) {
          case Algorithm::kRloo:
            r = reinforce_objective(s, e.advantage, params);
            break;
          case Algorithm::kPpoCritic:
            r = ppo_objective_per_token(e.traj, s, e.token_advantages, params, config.epsilon);
            break;
          default:
            r = ppo_objective(e.traj, s, e.advantage, params, {config.epsilon, config.granularity});
            break;
        }
        if (config.algorithm != Algorithm::kRloo) {
          mb_terms += r.terms;
          mb_dev += r.sum_abs_ratio_dev;
          clipped += r.clipped;
        }
        if (use_kl) {
          auto kl = kl_penalty(params, *ref, s, config.kl_beta);
          r.grad -= kl.grad;
          r.objective -= kl.objective;
        }
        acc.add(r.grad, r.objective);
      }
      terms += mb_terms;
      if (mb_terms > 0 && mb_dev / static_cast<double>(mb_terms) > config.divergence_threshold) {
        ++stats.skipped;
        const int total = divergent_total ? ++*divergent_total : stats.skipped;
        spdlog::warn("iteration {}: mean |ratio - 1| = {:.3g} exceeds {}, update skipped", iteration,
                     mb_dev / static_cast<double>(mb_terms), config.divergence_threshold);
        if (total >= config.max_divergent_updates) {
          throw DivergenceError("training diverged: " + std::to_string(total) +
                                " updates skipped for runaway importance ratios");
        }
        continue;
      }
      Matrix grad = acc.mean();
      norm_sum += clip_grad_norm(grad, config.max_grad_norm);
      objective_sum += acc.mean_objective();
      apply_update(params, grad, config.lr);
      ++stats.updates;
    }
  }
  if (!params.all_finite()) throw NumericalError("policy parameters became non-finite");
  if (stats.updates > 0) {
    stats.grad_norm = norm_sum / stats.updates;
    stats.mean_objective = objective_sum / stats.updates;
  }
  stats.clip_fraction = terms > 0 ? static_cast<double>(clipped) / static_cast<double>(terms) : 0.0;
  return stats;
}

namespace {

std::vector<miniworld::Task> training_pool(const TrainConfig& cfg, const TaskSplits& splits) {
  auto pool = max_difficulty(splits.train, cfg.max_difficulty);
  if (pool.empty()) {
    throw ConfigError("no training tasks with difficulty <= " + std::to_string(cfg.max_difficulty));
  }
  return pool;
}

Checkpoint make_checkpoint(const TrainConfig& cfg, const PolicyParams& params, const TaskSplits& splits,
                           int iteration, IterationMetrics* metrics) {
  auto eval = evaluate_policy(params, splits.dev, 0.0, mix_seed({cfg.seed, kTagEval}), cfg.eval_turn_limit,
                              cfg.workers);
  if (metrics) {
    metrics->dev_tgc = eval.tgc;
    metrics->dev_sgc = eval.sgc;
  }
  Checkpoint c{iteration, params, eval.tgc, eval.sgc, metrics ? to_json(*metrics) : nlohmann::json::object()};
  return c;
}

std::vector<Checkpoint> supervised_loop(const TrainConfig& config, const PolicyParams& base,
                                        const TaskSplits& splits, const TrainHooks& hooks, int start_iteration,
                                        bool fail_on_empty) {
  const TrainConfig cfg = config.normalized();
  const auto pool = training_pool(cfg, splits);
  PolicyParams params = base;
  std::vector<Checkpoint> history;
  history.push_back(make_checkpoint(cfg, params, splits, start_iteration, nullptr));
  if (hooks.on_checkpoint) hooks.on_checkpoint(history.back());

  for (int it = start_iteration + 1; it <= cfg.iterations; ++it) {
    const auto t0 = std::chrono::steady_clock::now();
    auto tasks = sample_tasks(pool, cfg.tasks_per_iter, cfg.seed, it);
    CollectConfig cc;
    cc.K = cfg.K;
    cc.temperature = cfg.temperature;
    cc.workers = cfg.workers;
    cc.min_per_task = cfg.min_per_task;
    cc.frac_total = cfg.frac_total;
    cc.seed = mix_seed({cfg.seed, static_cast<std::uint64_t>(it), kTagCollect});
    cc.limits = cfg.limits;
    auto buffer = collect_parallel(params, tasks, cc);

    IterationMetrics m;
    m.iteration = it;
    m.collected = static_cast<int>(buffer.entries.size());
    std::vector<Trajectory> retained;
    double total = 0.0;
    for (const auto& e : buffer.entries) {
      total += e.traj.ret;
      if (e.traj.ret == 1.0) retained.push_back(e.traj);
    }
    m.mean_return = m.collected ? total / m.collected : 0.0;
    m.retained = static_cast<int>(retained.size());
    m.buffer_size = m.retained;
    spdlog::info("iteration {}: retained {} of {} rollouts", it, m.retained, m.collected);
    if (retained.empty()) {
      if (fail_on_empty) throw std::runtime_error("no successful rollouts to fine-tune on");
    } else {
      params = clone_pretrain(params, retained, cfg.ce_epochs, cfg.ce_lr);
      m.updates = cfg.ce_epochs;
    }
    const bool eval_now = it % cfg.eval_every == 0 || it == cfg.iterations;
    m.seconds = seconds_since(t0);
    if (eval_now) {
      history.push_back(make_checkpoint(cfg, params, splits, it, &m));
      if (hooks.on_checkpoint) hooks.on_checkpoint(history.back());
    }
    if (hooks.on_iteration) hooks.on_iteration(m, params);
  }
  return history;
}

}  // namespace

std::vector<Checkpoint> rft_train(const TrainConfig& config, const PolicyParams& base, const TaskSplits& splits,
                                  const TrainHooks& hooks) {
  TrainConfig c = config;
  c.iterations = 1;
  return supervised_loop(c, base, splits, hooks, 0, true);
}

std::vector<Checkpoint> ei_train(const TrainConfig& config, const PolicyParams& base, const TaskSplits& splits,
                                 const TrainHooks& hooks, int start_iteration) {
  return supervised_loop(config, base, splits, hooks, start_iteration, false);
}

std::vector<Checkpoint> train(const TrainConfig& config, const PolicyParams& base, const TaskSplits& splits,
                              const TrainHooks& hooks, int start_iteration, const PolicyParams* reference) {
  const TrainConfig cfg = config.normalized();
  if (cfg.algorithm == Algorithm::kRft) return rft_train(cfg, base, splits, hooks);
  if (cfg.algorithm == Algorithm::kEi) return ei_train(cfg, base, splits, hooks, start_iteration);

  const auto pool = training_pool(cfg, splits);
  PolicyParams params = base;
  const PolicyParams ref = reference ? *reference : base;
  std::optional<ValueFunction> value;
  if (cfg.algorithm == Algorithm::kPpoCritic) value.emplace(params.features(), params.vocab().size());
  int divergent = 0;

  std::vector<Checkpoint> history;
  history.push_back(make_checkpoint(cfg, params, splits, start_iteration, nullptr));
  if (hooks.on_checkpoint) hooks.on_checkpoint(history.back());

  for (int it = start_iteration + 1; it <= cfg.iterations; ++it) {
    const auto t0 = std::chrono::steady_clock::now();
    auto tasks = sample_tasks(pool, cfg.tasks_per_iter, cfg.seed, it);
    auto prep = prepare_buffer(cfg, params, tasks, it, value ? &*value : nullptr);
    if (value) fit_value(*value, prep.buffer, params.vocab(), it - 1, cfg.value);
    auto stats = update_policy(cfg, params, prep.buffer, &ref, it, &divergent);

    IterationMetrics m;
    m.iteration = it;
    m.mean_return = prep.mean_return;
    m.collected = prep.collected;
    m.buffer_size = static_cast<int>(prep.buffer.entries.size());
    m.updates = stats.updates;
    m.skipped_updates = stats.skipped;
    m.grad_norm = stats.grad_norm;
    m.clip_fraction = stats.clip_fraction;
    m.mean_objective = stats.mean_objective;
    const bool eval_now = it % cfg.eval_every == 0 || it == cfg.iterations;
    m.seconds = seconds_since(t0);
    if (eval_now) {
      history.push_back(make_checkpoint(cfg, params, splits, it, &m));
      if (hooks.on_checkpoint) hooks.on_checkpoint(history.back());
      spdlog::info("iteration {}: mean return {:.3f}, dev TGC {:.3f}", it, m.mean_return, *m.dev_tgc);
    } else {
      spdlog::debug("iteration {}: mean return {:.3f}, buffer {}", it, m.mean_return, m.buffer_size);
    }
    if (hooks.on_iteration) hooks.on_iteration(m, params);
  }
  return history;
}

EvalResult goal_completion(std::vector<TaskOutcome> records) {
  EvalResult r;
  r.records = std::move(records);
  if (r.records.empty()) return r;
  std::map<std::string, bool> scenarios;
  int successes = 0;
  for (const auto& rec : r.records) {
    if (rec.success) ++successes;
    auto [it, inserted] = scenarios.emplace(rec.scenario_id, rec.success);
    if (!inserted) it->second = it->second && rec.success;
  }
  r.tgc = static_cast<double>(successes) / static_cast<double>(r.records.size());
  int scenario_successes = 0;
  for (const auto& [id, ok] : scenarios) scenario_successes += ok ? 1 : 0;
  r.sgc = static_cast<double>(scenario_successes) / static_cast<double>(scenarios.size());
  return r;
}

EvalResult evaluate_policy(const PolicyParams& params, std::span<const miniworld::Task> tasks, double temperature,
                           std::uint64_t seed, int turn_limit, int workers) {
  RolloutLimits limits;
  limits.turn_limit = turn_limit;
  std::vector<Trajectory> rollouts(tasks.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next.fetch_add(1); i < tasks.size(); i = next.fetch_add(1)) {
      rollouts[i] = *collect_rollout(params, tasks[i], temperature, rollout_seed(seed, tasks[i].task_id, 0), limits);
    }
  };
  if (workers <= 1 || tasks.size() < 2) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int w = 0; w < std::min<int>(workers, static_cast<int>(tasks.size())); ++w) pool.emplace_back(worker);
  }
  std::vector<TaskOutcome> records;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    records.push_back({tasks[i].task_id, tasks[i].scenario_id, rollouts[i].ret, rollouts[i].ret == 1.0});
  }
  auto result = goal_completion(std::move(records));
  result.rollouts = std::move(rollouts);
  return result;
}

const Checkpoint& select_best(std::span<const Checkpoint> history) {
  if (history.empty()) throw ContractViolation("select_best: empty history");
  const Checkpoint* best = &history[0];
  for (const auto& c : history) {
    if (c.dev_tgc > best->dev_tgc) best = &c;
  }
  return *best;
}

PolicyParams clone_pretrain(const PolicyParams& init, std::span<const Trajectory> demos, int epochs, double lr,
                            std::vector<double>* loss_history) {
  PolicyParams params = init;
  if (demos.empty() || epochs <= 0) return params;
  const auto v = static_cast<Eigen::Index>(params.vocab().size());

  // Identical feature rows share one softmax; keep per-token counts for each.
  std::map<std::vector<std::size_t>, Vector> counts;
  double total = 0.0;
  for (const auto& d : demos) {
    auto steps = agent_steps(d, params);
    for (std::size_t i = 0; i < steps.ids.size(); ++i) {
      auto [it, inserted] = counts.try_emplace(steps.phis[i].columns, Vector::Zero(v));
      it->second[steps.ids[i]] += 1.0;
      total += 1.0;
    }
  }
  if (total == 0.0) return params;
  std::vector<SparseFeatures> rows;
  std::vector<Vector> row_counts;
  std::vector<double> row_totals;
  for (auto& [cols, c] : counts) {
    rows.push_back({cols});
    row_totals.push_back(c.sum());
    row_counts.push_back(std::move(c));
  }

  Matrix grad = params.zeros_like();
  Vector z(v), p(v);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    grad.setZero();
    double loglik = 0.0;
    const auto& w = params.weights();
    for (std::size_t r = 0; r < rows.size(); ++r) {
      z.setZero();
      for (auto c : rows[r].columns) z += w.col(static_cast<Eigen::Index>(c));
      const double max = z.maxCoeff();
      p = (z.array() - max).exp();
      const double sum = p.sum();
      const double log_norm = max + std::log(sum);
      loglik += row_counts[r].dot(z) - row_totals[r] * log_norm;
      // delta = counts - total * softmax, written into z.
      z = row_counts[r] - (row_totals[r] / sum) * p;
      for (auto c : rows[r].columns) grad.col(static_cast<Eigen::Index>(c)) += z;
    }
    if (loss_history) loss_history->push_back(-loglik / total);
    params.weights() += (lr / total) * grad;
  }
  if (!params.all_finite()) throw NumericalError("clone_pretrain: parameters became non-finite");
  return params;
}

std::vector<Trajectory> demo_corpus(std::span<const miniworld::Task> tasks, std::shared_ptr<const Vocab> vocab,
                                    double noise, int per_task, std::uint64_t seed) {
  std::vector<Trajectory> out;
  const miniworld::DemoNoise n{noise, noise};
  for (const auto& t : tasks) {
    for (int p = 0; p < per_task; ++p) {
      Rng rng(mix_seed({seed, fnv1a(t.task_id), static_cast<std::uint64_t>(p)}));
      auto turns = miniworld::demonstrate(t, *vocab, n, rng);
      out.push_back(scripted_rollout(t, turns, vocab, kDemoTurnLimit));
    }
  }
  return out;
}

nlohmann::json to_json(const PretrainConfig& c) {
  return {{"window", c.window},       {"epochs", c.epochs},         {"lr", c.lr},
          {"demos_per_task", c.demos_per_task}, {"noise_grid", c.noise_grid}, {"band_low", c.band_low},
          {"band_high", c.band_high}, {"seed", c.seed},             {"eval_turn_limit", c.eval_turn_limit}};
}

PretrainConfig pretrain_config_from_json(const nlohmann::json& j, PretrainConfig c) {
  try {
    auto known = to_json(c);
    for (const auto& [key, value] : j.items()) {
      if (!known.contains(key)) throw ConfigError("unknown pretrain config key: " + key);
    }
    if (j.contains("window")) c.window = j.at("window").get<int>();
    if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
    if (j.contains("lr")) c.lr = j.at("lr").get<double>();
    if (j.contains("demos_per_task")) c.demos_per_task = j.at("demos_per_task").get<int>();
    if (j.contains("noise_grid")) c.noise_grid = j.at("noise_grid").get<std::vector<double>>();
    if (j.contains("band_low")) c.band_low = j.at("band_low").get<double>();
    if (j.contains("band_high")) c.band_high = j.at("band_high").get<double>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("eval_turn_limit")) c.eval_turn_limit = j.at("eval_turn_limit").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("pretrain config: ") + e.what());
  }
  if (c.window < 1) throw ConfigError("pretrain config: window must be >= 1");
  const double max_lr = 4.0 / (c.window + 1);
  if (!(c.lr > 0.0 && c.lr < max_lr)) {
    throw ConfigError("pretrain config: lr must be in (0, " + std::to_string(max_lr) + ") for window " +
                      std::to_string(c.window));
  }
  return c;
}

PretrainResult pretrain_in_band(std::span<const miniworld::Task> train_tasks,
                                std::span<const miniworld::Task> dev_tasks, const PretrainConfig& config) {
  if (train_tasks.empty() || dev_tasks.empty()) throw ConfigError("pretraining needs train and dev tasks");
  auto vocab = miniworld::make_vocab();
  std::vector<std::pair<double, double>> tried;
  for (double noise : config.noise_grid) {
    auto demos = demo_corpus(train_tasks, vocab, noise, config.demos_per_task, config.seed);
    auto params = clone_pretrain(PolicyParams(vocab, FeatureConfig{config.window}), demos, config.epochs, config.lr);
    const double tgc = evaluate_policy(params, dev_tasks, 0.0, config.seed, config.eval_turn_limit).tgc;
    tried.emplace_back(noise, tgc);
    spdlog::info("pretrain: noise {:.2f} -> dev TGC {:.3f}", noise, tgc);
    if (tgc >= config.band_low && tgc <= config.band_high) return {std::move(params), noise, tgc, tried};
  }
  std::string summary;
  for (const auto& [n, t] : tried) summary += " noise " + std::to_string(n) + ": " + std::to_string(t) + ";";
  throw ConfigError("no demo noise level put base dev TGC in [" + std::to_string(config.band_low) + ", " +
                    std::to_string(config.band_high) + "];" + summary + " adjust noise_grid or epochs");
}

}  // namespace loop
