#include "loop/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "loop/error.hpp"
#include "loop/miniworld.hpp"
#include "loop/seeding.hpp"
#include "loop/trainer.hpp"

namespace loop::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kCodeVersion = "0.1.0";
constexpr const char* kManifest = "manifest.json";
constexpr const char* kMetrics = "metrics.jsonl";

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MalformedInput("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw MalformedInput(path.string() + ": " + e.what());
  }
}

void write_json_file(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void require_file(const fs::path& path, const std::string& what) {
  if (!fs::is_regular_file(path)) throw ConfigError(what + " not found: " + path.string());
}

fs::path split_file(const fs::path& dir, miniworld::Split split) {
  return dir / (miniworld::to_string(split) + ".jsonl");
}

std::vector<miniworld::Task> load_split(const fs::path& dir, miniworld::Split split, int difficulty) {
  const auto path = split_file(dir, split);
  require_file(path, "task file");
  return max_difficulty(miniworld::read_tasks(path), difficulty);
}

struct Stat {
  double mean = 0.0;
  double std = 0.0;
};

Stat population_stat(const std::vector<double>& xs) {
  Stat s;
  if (xs.empty()) return s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(var / static_cast<double>(xs.size()));
  return s;
}

std::string checkpoint_stem(int iteration) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "iter_%04d", iteration);
  return buf;
}

// --- gen-tasks ---------------------------------------------------------

struct GenOptions {
  std::vector<std::string> families = {"relay", "aggregate"};
  int count = 60;
  std::uint64_t seed = 0;
  std::string out_dir;
  bool force = false;
};

int cmd_gen_tasks(const GenOptions& o, std::ostream& out) {
  const fs::path dir(o.out_dir);
  if (fs::exists(dir) && !fs::is_empty(dir) && !o.force) {
    throw ConfigError("output directory " + dir.string() + " is not empty; pass --force to overwrite");
  }
  fs::create_directories(dir);
  std::map<miniworld::Split, std::vector<miniworld::Task>> by_split;
  for (const auto& family : o.families) {
    for (auto& t : miniworld::generate_tasks(family, o.count, o.seed)) by_split[t.split].push_back(std::move(t));
  }
  for (auto split : {miniworld::Split::kTrain, miniworld::Split::kDev, miniworld::Split::kTest}) {
    const auto path = split_file(dir, split);
    miniworld::write_tasks(path, by_split[split]);
    out << path.string() << ": " << by_split[split].size() << " tasks\n";
  }
  return kOk;
}

// --- pretrain ----------------------------------------------------------

struct PretrainOptions {
  std::string tasks;
  std::string out;
  std::string config;
  std::vector<std::string> overrides;
  int max_difficulty = 2;
};

int cmd_pretrain(const PretrainOptions& o, std::ostream& out) {
  json j = json::object();
  if (!o.config.empty()) j = read_json_file(o.config);
  for (const auto& s : o.overrides) apply_override(j, s);
  const auto cfg = pretrain_config_from_json(j);
  const auto train = load_split(o.tasks, miniworld::Split::kTrain, o.max_difficulty);
  const auto dev = load_split(o.tasks, miniworld::Split::kDev, o.max_difficulty);
  auto result = pretrain_in_band(train, dev, cfg);
  const fs::path path(o.out);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  save_params(result.params, path);
  json tried = json::array();
  for (const auto& [noise, tgc] : result.tried) tried.push_back({{"noise", noise}, {"dev_tgc", tgc}});
  json sidecar = {{"config", to_json(cfg)},     {"noise", result.noise},   {"dev_tgc", result.dev_tgc},
                  {"tried", tried},              {"max_difficulty", o.max_difficulty},
                  {"code_version", kCodeVersion}};
  write_json_file(fs::path(path).replace_extension(".json"), sidecar);
  out << "base policy " << path.string() << ": noise " << result.noise << ", dev TGC " << result.dev_tgc << '\n';
  return kOk;
}

// --- train -------------------------------------------------------------

struct TrainOptions {
  std::string config;
  std::string tasks;
  std::string base;
  std::string name;
  std::string root;
  std::string algorithm;
  std::string granularity;
  std::optional<int> n_epoch;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
  std::optional<int> iterations;
  std::optional<int> workers;
  std::vector<std::string> overrides;
  bool resume = false;
  bool dry_run = false;
};

json train_snapshot(const TrainOptions& o) {
  json j = {{"name", "run"}, {"tasks", "tasks"}, {"base", ""}, {"train", json::object()}};
  if (!o.config.empty()) {
    const json file = read_json_file(o.config);
    if (!file.is_object()) throw ConfigError(o.config + ": run config must be a JSON object");
    for (const auto& [key, value] : file.items()) {
      if (!j.contains(key)) throw ConfigError(o.config + ": unknown key " + key);
      j[key] = value;
    }
  }
  if (!o.name.empty()) j["name"] = o.name;
  if (!o.tasks.empty()) j["tasks"] = o.tasks;
  if (!o.base.empty()) j["base"] = o.base;
  auto& t = j["train"];
  if (!o.algorithm.empty()) t["algorithm"] = o.algorithm;
  if (!o.granularity.empty()) t["granularity"] = o.granularity;
  if (o.n_epoch) t["n_epoch"] = *o.n_epoch;
  if (o.lr) t["lr"] = *o.lr;
  if (o.seed) t["seed"] = *o.seed;
  if (o.iterations) t["iterations"] = *o.iterations;
  if (o.workers) t["workers"] = *o.workers;
  for (const auto& s : o.overrides) apply_override(j, s);
  // Expand to the full config so the snapshot alone reproduces the run.
  j["train"] = to_json(train_config_from_json(j["train"]));
  train_config_from_json(j["train"]).normalized();
  return j;
}

// Latest checkpoint sidecar in `dir`, or nullopt.
std::optional<json> latest_checkpoint(const fs::path& dir) {
  std::optional<json> best;
  if (!fs::is_directory(dir)) return best;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() != ".json") continue;
    json j = read_json_file(entry.path());
    if (!best || j.at("iteration").get<int>() > best->at("iteration").get<int>()) best = j;
  }
  return best;
}

int cmd_train(const TrainOptions& o, std::ostream& out) {
  const json snapshot = train_snapshot(o);
  const TrainConfig cfg = train_config_from_json(snapshot["train"]);
  const fs::path tasks_dir = snapshot["tasks"].get<std::string>();
  const fs::path base_path = snapshot["base"].get<std::string>();
  for (auto split : {miniworld::Split::kTrain, miniworld::Split::kDev}) require_file(split_file(tasks_dir, split), "task file");
  require_file(base_path, "base policy");

  const fs::path root = o.root.empty() ? default_run_root() : fs::path(o.root);
  const fs::path run_dir = root / (snapshot["name"].get<std::string>() + "-" + config_hash(snapshot));
  if (o.dry_run) {
    out << "config ok; run directory " << run_dir.string() << '\n';
    return kOk;
  }

  auto vocab = miniworld::make_vocab();
  TaskSplits splits;
  splits.train = load_split(tasks_dir, miniworld::Split::kTrain, cfg.max_difficulty);
  splits.dev = load_split(tasks_dir, miniworld::Split::kDev, cfg.max_difficulty);
  const PolicyParams base = load_params(base_path, vocab);
  PolicyParams params = base;
  int start = 0;

  const fs::path ckpt_dir = run_dir / "checkpoints";
  if (fs::exists(run_dir / kManifest)) {
    if (!o.resume) {
      throw ConfigError("run directory " + run_dir.string() + " already exists; pass --resume to continue it");
    }
    const json manifest = read_json_file(run_dir / kManifest);
    if (manifest.value("config", json()) != snapshot) {
      throw ConfigError(run_dir.string() + ": manifest config differs from the requested config");
    }
    if (auto last = latest_checkpoint(ckpt_dir)) {
      start = last->at("iteration").get<int>();
      params = load_params(ckpt_dir / (checkpoint_stem(start) + ".pol"), vocab);
      spdlog::info("resuming {} from iteration {}", run_dir.string(), start);
    }
  } else {
    fs::create_directories(ckpt_dir);
    json manifest = {{"name", snapshot["name"]},
                     {"config", snapshot},
                     {"seeds", {{"train", cfg.seed}}},
                     {"code_version", kCodeVersion},
                     {"metrics_file", kMetrics}};
    write_json_file(run_dir / kManifest, manifest);
  }

  std::vector<json> pending;
  auto flush = [&] {
    std::ofstream m(run_dir / kMetrics, std::ios::app);
    for (const auto& row : pending) m << row.dump() << '\n';
    pending.clear();
  };
  TrainHooks hooks;
  hooks.on_checkpoint = [&](const Checkpoint& c) {
    save_params(c.params, ckpt_dir / (checkpoint_stem(c.iteration) + ".pol"));
    write_json_file(ckpt_dir / (checkpoint_stem(c.iteration) + ".json"),
                    {{"iteration", c.iteration}, {"dev_tgc", c.dev_tgc}, {"dev_sgc", c.dev_sgc}, {"metrics", c.metrics}});
  };
  // Rows reach disk together with their checkpoint, so a resumed run never
  // repeats a logged iteration.
  hooks.on_iteration = [&](const IterationMetrics& m, const PolicyParams&) {
    pending.push_back(to_json(m));
    if (m.dev_tgc) flush();
  };

  std::vector<Checkpoint> history;
  try {
    history = train(cfg, params, splits, hooks, start, &base);
  } catch (const DivergenceError&) {
    flush();
    throw;
  }
  flush();

  // Best over every checkpoint on disk, so resumed runs are covered too.
  std::optional<json> best;
  for (const auto& entry : fs::directory_iterator(ckpt_dir)) {
    if (entry.path().extension() != ".json") continue;
    json j = read_json_file(entry.path());
    const double tgc = j.at("dev_tgc").get<double>();
    const int it = j.at("iteration").get<int>();
    if (!best || tgc > best->at("dev_tgc").get<double>() ||
        (tgc == best->at("dev_tgc").get<double>() && it < best->at("iteration").get<int>())) {
      best = j;
    }
  }
  if (best) {
    const int it = best->at("iteration").get<int>();
    fs::copy_file(ckpt_dir / (checkpoint_stem(it) + ".pol"), run_dir / "best.pol",
                  fs::copy_options::overwrite_existing);
    write_json_file(run_dir / "best.json", *best);
    out << run_dir.string() << ": best dev TGC " << best->at("dev_tgc").get<double>() << " at iteration " << it
        << '\n';
  }
  return kOk;
}

// --- eval --------------------------------------------------------------

struct EvalOptions {
  std::string checkpoint;
  std::string tasks;
  std::string split = "dev";
  int attempts = 1;
  double temperature = 0.0;
  std::uint64_t seed = 0;
  int workers = 1;
  int max_difficulty = 3;
  int turn_limit = miniworld::kEvalTurnLimit;
  std::string rollouts_out;
};

int cmd_eval(const EvalOptions& o, std::ostream& out) {
  require_file(o.checkpoint, "checkpoint");
  auto vocab = miniworld::make_vocab();
  const auto params = load_params(o.checkpoint, vocab);
  const auto tasks = load_split(o.tasks, miniworld::split_from_string(o.split), o.max_difficulty);
  if (tasks.empty()) throw ConfigError("no tasks in split " + o.split);
  std::vector<double> tgc, sgc;
  std::vector<Trajectory> rollouts;
  for (int a = 0; a < o.attempts; ++a) {
    const std::uint64_t seed =
        o.temperature > 0.0 ? mix_seed({o.seed, static_cast<std::uint64_t>(a)}) : o.seed;
    auto r = evaluate_policy(params, tasks, o.temperature, seed, o.turn_limit, o.workers);
    tgc.push_back(r.tgc);
    sgc.push_back(r.sgc);
    rollouts.insert(rollouts.end(), r.rollouts.begin(), r.rollouts.end());
  }
  if (!o.rollouts_out.empty()) write_trajectories(o.rollouts_out, rollouts, *vocab);
  const auto t = population_stat(tgc);
  const auto s = population_stat(sgc);
  json report = {{"checkpoint", o.checkpoint},
                 {"split", o.split},
                 {"tasks", tasks.size()},
                 {"attempts", o.attempts},
                 {"temperature", o.temperature},
                 {"tgc", {{"mean", t.mean}, {"std", t.std}, {"runs", tgc}}},
                 {"sgc", {{"mean", s.mean}, {"std", s.std}, {"runs", sgc}}}};
  out << report.dump(2) << '\n';
  return kOk;
}

// --- collect -----------------------------------------------------------

struct CollectOptions {
  std::string policy;
  std::string tasks;
  std::string split = "dev";
  std::string out;
  int K = 1;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  int workers = 1;
  int max_difficulty = 3;
  int turn_limit = miniworld::kEvalTurnLimit;
};

int cmd_collect(const CollectOptions& o, std::ostream& out) {
  require_file(o.policy, "policy");
  auto vocab = miniworld::make_vocab();
  const auto params = load_params(o.policy, vocab);
  const auto tasks = load_split(o.tasks, miniworld::split_from_string(o.split), o.max_difficulty);
  CollectConfig c;
  c.K = o.K;
  c.temperature = o.temperature;
  c.workers = o.workers;
  c.min_per_task = o.K;
  c.frac_total = 1.0;
  c.seed = o.seed;
  c.limits.turn_limit = o.turn_limit;
  auto buffer = collect_parallel(params, tasks, c);
  std::vector<Trajectory> trajs;
  for (auto& e : buffer.entries) trajs.push_back(std::move(e.traj));
  write_trajectories(o.out, trajs, *vocab);
  out << o.out << ": " << trajs.size() << " rollouts\n";
  return kOk;
}

// --- analyze -----------------------------------------------------------

struct AnalyzeOptions {
  std::string base;
  std::string trained;
};

int cmd_analyze(const AnalyzeOptions& o, std::ostream& out) {
  auto vocab = miniworld::make_vocab();
  require_file(o.base, "rollout file");
  require_file(o.trained, "rollout file");
  const auto base = read_trajectories(o.base, *vocab);
  const auto trained = read_trajectories(o.trained, *vocab);
  const auto rows = compare_behavior(behavior_report(base), behavior_report(trained));
  json table = json::array();
  for (const auto& r : rows) {
    table.push_back({{"metric", r.name},
                     {"base", r.base},
                     {"trained", r.trained},
                     {"ratio", std::isfinite(r.ratio) ? json(r.ratio) : json(nullptr)}});
  }
  out << json{{"base_rollouts", base.size()}, {"trained_rollouts", trained.size()}, {"metrics", table}}.dump(2)
      << '\n';
  return kOk;
}

// --- plot --------------------------------------------------------------

struct PlotOptions {
  std::vector<std::string> runs;
  std::string out = ".";
};

struct RunCurves {
  std::string label;
  std::vector<json> rows;
};

bool has_number(const json& row, const char* key) { return row.contains(key) && row[key].is_number(); }

RunCurves read_run(const fs::path& dir) {
  const fs::path manifest_path = dir / kManifest;
  json manifest = read_json_file(manifest_path);
  if (!manifest.is_object() || !manifest.contains("name") || !manifest["name"].is_string()) {
    throw MalformedInput(manifest_path.string() + ": manifest lacks a string \"name\"");
  }
  RunCurves r{manifest["name"].get<std::string>(), {}};
  std::ifstream in(dir / kMetrics);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      r.rows.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw MalformedInput((dir / kMetrics).string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return r;
}

int cmd_plot(const PlotOptions& o, std::ostream& out) {
  std::vector<RunCurves> runs;
  for (const auto& d : o.runs) runs.push_back(read_run(d));
  const fs::path dir(o.out);
  fs::create_directories(dir);
  std::ofstream csv(dir / "curves.csv");
  csv << "run,iteration,mean_return,dev_tgc,dev_sgc\n";
  std::vector<Series> ret, tgc;
  for (const auto& r : runs) {
    Series sr{r.label, {}, {}}, st{r.label, {}, {}};
    for (const auto& row : r.rows) {
      const double it = row.at("iteration").get<double>();
      csv << r.label << ',' << row.at("iteration").get<int>() << ',' << row.at("mean_return").get<double>() << ',';
      if (has_number(row, "dev_tgc")) {
        csv << row["dev_tgc"].get<double>();
        st.x.push_back(it);
        st.y.push_back(row["dev_tgc"].get<double>());
      }
      csv << ',';
      if (has_number(row, "dev_sgc")) csv << row["dev_sgc"].get<double>();
      csv << '\n';
      sr.x.push_back(it);
      sr.y.push_back(row.at("mean_return").get<double>());
    }
    ret.push_back(std::move(sr));
    tgc.push_back(std::move(st));
  }
  std::ofstream(dir / "mean_return.svg") << render_svg(ret, "Mean training return", "mean return");
  std::ofstream(dir / "dev_tgc.svg") << render_svg(tgc, "Dev task goal completion", "dev TGC");
  out << "wrote " << (dir / "curves.csv").string() << ", mean_return.svg, dev_tgc.svg\n";
  return kOk;
}

std::string xml_escape(const std::string& s) {
  std::string r;
  for (char c : s) {
    switch (c) {
      case '&': r += "&amp;"; break;
      case '<': r += "&lt;"; break;
      case '>': r += "&gt;"; break;
      case '"': r += "&quot;"; break;
      default: r += c;
    }
  }
  return r;
}

}  // namespace

fs::path default_run_root() {
  if (const char* env = std::getenv("LOOP_RUN_ROOT"); env && *env) return env;
  return "runs";
}

std::string config_hash(const json& snapshot) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(snapshot.dump())));
  return std::string(buf, 8);
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key.path=value: " + assignment);
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  json* node = &j;
  std::size_t begin = 0;
  while (true) {
    const auto dot = key.find('.', begin);
    const std::string part = key.substr(begin, dot == std::string::npos ? std::string::npos : dot - begin);
    if (part.empty()) throw ConfigError("empty key segment in override: " + assignment);
    if (!node->is_object()) throw ConfigError("override path crosses a non-object: " + assignment);
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = json::object();
    begin = dot + 1;
  }
}

std::vector<MetricComparison> compare_behavior(const BehaviorReport& base, const BehaviorReport& trained) {
  if (base.rollouts == 0 || trained.rollouts == 0) {
    throw ConfigError("behavior comparison needs rollouts in both sets; a ratio over an empty set is undefined");
  }
  std::vector<MetricComparison> rows = {
      {"turns_per_rollout", base.turns_per_rollout, trained.turns_per_rollout},
      {"commands_per_rollout", base.commands_per_rollout, trained.commands_per_rollout},
      {"multi_command_turn_rate", base.multi_command_turn_rate, trained.multi_command_turn_rate},
      {"execution_errors_per_turn", base.execution_errors_per_turn, trained.execution_errors_per_turn},
      {"give_up_rate", base.give_up_rate, trained.give_up_rate},
      {"docs_calls_per_rollout", base.docs_calls_per_rollout, trained.docs_calls_per_rollout},
  };
  for (auto& r : rows) {
    if (r.base != 0.0) {
      r.ratio = r.trained / r.base;
    } else {
      r.ratio = r.trained == 0.0 ? 1.0 : std::nan("");
    }
  }
  return rows;
}

std::string render_svg(const std::vector<Series>& series, const std::string& title, const std::string& y_label) {
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  constexpr double kW = 640, kH = 400, kLeft = 60, kRight = 160, kTop = 40, kBottom = 50;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  bool any = false;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!any) {
        x0 = x1 = s.x[i];
        any = true;
      }
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y1 = std::max(y1, s.y[i]);
      y0 = std::min(y0, s.y[i]);
    }
  }
  if (x1 == x0) x1 = x0 + 1;
  const double pw = kW - kLeft - kRight, ph = kH - kTop - kBottom;
  auto px = [&](double x) { return kLeft + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return kTop + ph - (y - y0) / (y1 - y0) * ph; };

  std::ostringstream o;
  o << std::fixed << std::setprecision(2);
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\" viewBox=\"0 0 "
    << kW << ' ' << kH << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << kW / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << xml_escape(title)
    << "</text>\n";
  o << "<line x1=\"" << kLeft << "\" y1=\"" << kTop + ph << "\" x2=\"" << kLeft + pw << "\" y2=\"" << kTop + ph
    << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << kTop + ph
    << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double yv = y0 + (y1 - y0) * k / 4.0, xv = x0 + (x1 - x0) * k / 4.0;
    o << "<text x=\"" << kLeft - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << yv << "</text>\n";
    o << "<text x=\"" << px(xv) << "\" y=\"" << kTop + ph + 16 << "\" text-anchor=\"middle\">"
      << static_cast<long>(std::lround(xv)) << "</text>\n";
  }
  o << "<text x=\"" << kLeft + pw / 2 << "\" y=\"" << kH - 12 << "\" text-anchor=\"middle\">iteration</text>\n";
  o << "<text transform=\"translate(16," << kTop + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
    << xml_escape(y_label) << "</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    const char* color = kColors[i % std::size(kColors)];
    o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t k = 0; k < s.x.size(); ++k) o << (k ? " " : "") << px(s.x[k]) << ',' << py(s.y[k]);
    o << "\"/>\n";
    const double ly = kTop + 14 + 18 * static_cast<double>(i);
    o << "<line x1=\"" << kLeft + pw + 12 << "\" y1=\"" << ly - 4 << "\" x2=\"" << kLeft + pw + 32 << "\" y2=\""
      << ly - 4 << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    o << "<text x=\"" << kLeft + pw + 38 << "\" y=\"" << ly << "\">" << xml_escape(s.label) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Leave-one-out PPO training on the MiniWorld environment", "loop"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off");

  GenOptions gen;
  auto* g = app.add_subcommand("gen-tasks", "Generate train/dev/test task files");
  g->add_option("--families", gen.families, "Task families")
      ->delimiter(',')
      ->check(CLI::IsMember(miniworld::families()));
  g->add_option("--count", gen.count, "Scenarios per family")->check(CLI::PositiveNumber);
  g->add_option("--seed", gen.seed, "Generation seed");
  g->add_option("--out", gen.out_dir, "Output directory")->required();
  g->add_flag("--force", gen.force, "Overwrite a non-empty output directory");

  PretrainOptions pre;
  auto* p = app.add_subcommand("pretrain", "Clone a base policy into the target dev TGC band");
  p->add_option("--tasks", pre.tasks, "Task directory")->required();
  p->add_option("--out", pre.out, "Output policy file")->required();
  p->add_option("--config", pre.config, "Pretraining config JSON");
  p->add_option("--set", pre.overrides, "Override key=value");
  p->add_option("--max-difficulty", pre.max_difficulty, "Highest task difficulty used");

  TrainOptions tr;
  auto* t = app.add_subcommand("train", "Run a training job into a run directory");
  t->add_option("--config", tr.config, "Run config JSON");
  t->add_option("--tasks", tr.tasks, "Task directory");
  t->add_option("--base", tr.base, "Base policy file");
  t->add_option("--name", tr.name, "Run name");
  t->add_option("--root", tr.root, "Run root (default $LOOP_RUN_ROOT or ./runs)");
  t->add_option("--algorithm", tr.algorithm, "loop, rloo, grpo, grpo-no-kl, loop-rwnorm, ppo-critic, rft, ei");
  t->add_option("--granularity", tr.granularity, "token, turn or trajectory");
  t->add_option("--n-epoch", tr.n_epoch, "Epochs over each buffer");
  t->add_option("--lr", tr.lr, "Learning rate");
  t->add_option("--seed", tr.seed, "Training seed");
  t->add_option("--iterations", tr.iterations, "Training iterations");
  t->add_option("--workers", tr.workers, "Rollout worker threads");
  t->add_option("--set", tr.overrides, "Dotted override, e.g. train.epsilon=0.1");
  t->add_flag("--resume", tr.resume, "Continue from the latest checkpoint");
  t->add_flag("--dry-run", tr.dry_run, "Validate the config and exit");

  EvalOptions ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint");
  e->add_option("--checkpoint", ev.checkpoint, "Policy file")->required();
  e->add_option("--tasks", ev.tasks, "Task directory")->required();
  e->add_option("--split", ev.split, "train, dev or test")->check(CLI::IsMember({"train", "dev", "test"}));
  e->add_option("--attempts", ev.attempts, "Evaluation runs")->check(CLI::PositiveNumber);
  e->add_option("--temperature", ev.temperature, "Sampling temperature")->check(CLI::NonNegativeNumber);
  e->add_option("--seed", ev.seed, "Evaluation seed");
  e->add_option("--workers", ev.workers, "Worker threads")->check(CLI::PositiveNumber);
  e->add_option("--max-difficulty", ev.max_difficulty, "Highest task difficulty evaluated");
  e->add_option("--turn-limit", ev.turn_limit, "Turn limit")->check(CLI::PositiveNumber);
  e->add_option("--rollouts-out", ev.rollouts_out, "Write evaluation rollouts here");

  CollectOptions co;
  auto* c = app.add_subcommand("collect", "Collect rollouts from a policy");
  c->add_option("--policy", co.policy, "Policy file")->required();
  c->add_option("--tasks", co.tasks, "Task directory")->required();
  c->add_option("--out", co.out, "Output rollout file")->required();
  c->add_option("--split", co.split, "train, dev or test")->check(CLI::IsMember({"train", "dev", "test"}));
  c->add_option("-K,--rollouts-per-task", co.K, "Rollouts per task")->check(CLI::PositiveNumber);
  c->add_option("--temperature", co.temperature, "Sampling temperature")->check(CLI::NonNegativeNumber);
  c->add_option("--seed", co.seed, "Collection seed");
  c->add_option("--workers", co.workers, "Worker threads")->check(CLI::PositiveNumber);
  c->add_option("--max-difficulty", co.max_difficulty, "Highest task difficulty");
  c->add_option("--turn-limit", co.turn_limit, "Turn limit")->check(CLI::PositiveNumber);

  AnalyzeOptions an;
  auto* a = app.add_subcommand("analyze", "Compare behavior metrics of two rollout sets");
  a->add_option("--base", an.base, "Base rollouts")->required();
  a->add_option("--trained", an.trained, "Trained rollouts")->required();

  PlotOptions pl;
  auto* pt = app.add_subcommand("plot", "Write training curves as CSV and SVG");
  pt->add_option("runs", pl.runs, "Run directories")->required();
  pt->add_option("--out", pl.out, "Output directory");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& ex) {
    return app.exit(ex, out, err) == 0 ? kOk : kUsage;
  }
  spdlog::set_level(spdlog::level::from_str(log_level));

  try {
    if (*g) return cmd_gen_tasks(gen, out);
    if (*p) return cmd_pretrain(pre, out);
    if (*t) return cmd_train(tr, out);
    if (*e) return cmd_eval(ev, out);
    if (*c) return cmd_collect(co, out);
    if (*a) return cmd_analyze(an, out);
    if (*pt) return cmd_plot(pl, out);
  } catch (const DivergenceError& ex) {
    err << "loop: " << ex.what() << '\n';
    return kDivergence;
  } catch (const std::exception& ex) {
    err << "loop: " << ex.what() << '\n';
    return kRuntime;
  }
  return kUsage;
}

}  // namespace loop::cli
