#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "loop/error.hpp"
#include "loop/miniworld.hpp"
#include "loop/seeding.hpp"

namespace loop::miniworld {

namespace {

using Command = std::vector<std::string>;

int uniform_int(Rng& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

template <typename T>
const T& pick(Rng& rng, const std::vector<T>& items) {
  return items[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(items.size()) - 1))];
}

void append_login(std::vector<Command>& out, const WorldState& s, const std::string& app) {
  const auto& pw = std::get<std::string>(s.apps.at("supervisor").at("password." + app));
  out.push_back({"CALL", "supervisor", "password", app});
  out.push_back({"LOGIN", app, pw});
}

UnitTest list_contains(TestKind kind, std::string app, std::string key, std::string value) {
  UnitTest t;
  t.kind = kind;
  t.predicate.op = Predicate::Op::kListContains;
  t.predicate.app = std::move(app);
  t.predicate.key = std::move(key);
  t.predicate.value = std::move(value);
  return t;
}

UnitTest equals(std::string app, std::string key, std::string value) {
  UnitTest t;
  t.kind = TestKind::kStateChange;
  t.predicate.op = Predicate::Op::kEquals;
  t.predicate.app = std::move(app);
  t.predicate.key = std::move(key);
  t.predicate.value = std::move(value);
  return t;
}

UnitTest log_equals(std::vector<Call> calls) {
  UnitTest t;
  t.kind = TestKind::kNoExtraneousChange;
  t.predicate.op = Predicate::Op::kLogEquals;
  t.predicate.calls = std::move(calls);
  return t;
}

UnitTest answer_equals(std::string value) {
  UnitTest t;
  t.kind = TestKind::kAnswer;
  t.predicate.op = Predicate::Op::kAnswerEquals;
  t.predicate.value = std::move(value);
  return t;
}

// Random world with distractor entries around the target contact.
WorldState random_world(Rng& rng, const std::string& target, int target_mail, int target_request,
                        int balance) {
  WorldState s;
  auto& sup = s.apps["supervisor"];
  sup["contacts"] = contacts();
  for (const char* app : {"mail", "pay", "notes"}) {
    sup[std::string("password.") + app] = "pw" + std::to_string(uniform_int(rng, 1, 5));
  }
  auto& mail = s.apps["mail"];
  auto& pay = s.apps["pay"];
  for (const auto& c : contacts()) {
    if (c == target) continue;
    if (uniform_int(rng, 0, 1)) mail["inbox." + c] = std::to_string(uniform_int(rng, 1, 9));
    if (uniform_int(rng, 0, 1)) pay["request." + c] = std::to_string(uniform_int(rng, 1, 9));
  }
  mail["inbox." + target] = std::to_string(target_mail);
  pay["request." + target] = std::to_string(target_request);
  mail["sent"] = std::vector<std::string>{};
  pay["sent"] = std::vector<std::string>{};
  pay["balance"] = std::to_string(balance);
  std::vector<std::string> items;
  const int existing = uniform_int(rng, 0, 2);
  for (int i = 0; i < existing; ++i) items.push_back(std::to_string(uniform_int(rng, 0, 9)));
  s.apps["notes"]["items"] = items;
  return s;
}

std::string verb_for(const std::string& family, int difficulty) {
  static const std::map<std::string, std::string> base = {
      {"relay", "RELAY"}, {"aggregate", "AGG"}, {"note", "NOTE"}};
  std::string v = base.at(family);
  if (difficulty > 1) v += std::to_string(difficulty);
  return v;
}

// Builds instruction, initial state, unit tests and solution for one variant.
Task build_variant(const std::string& family, int difficulty, Rng& rng) {
  Task t;
  t.family = family;
  t.difficulty = difficulty;
  const std::string c = pick(rng, contacts());
  t.instruction = {verb_for(family, difficulty), c};

  const int mail_amount = uniform_int(rng, 1, 9);
  const int request = uniform_int(rng, 1, 9);
  const int paid = family == "aggregate" ? mail_amount : request;
  const int balance = uniform_int(rng, paid, 9);
  t.initial_state = random_world(rng, c, mail_amount, request, balance);
  const WorldState& s = t.initial_state;
  auto& sol = t.solution;
  const std::string a = std::to_string(paid);
  const std::string remaining = std::to_string(balance - paid);

  if (family == "relay") {
    append_login(sol, s, "pay");
    if (difficulty >= 2) append_login(sol, s, "mail");
    if (difficulty >= 3) append_login(sol, s, "notes");
    sol.push_back({"CALL", "pay", "request", c});
    sol.push_back({"CALL", "pay", "send", c, a});
    std::vector<Call> log = {{"pay", "send", {c, a}}};
    t.unit_tests.push_back(list_contains(TestKind::kStateChange, "pay", "sent", c + " " + a));
    t.unit_tests.push_back(equals("pay", "balance", remaining));
    if (difficulty >= 2) {
      sol.push_back({"CALL", "mail", "send", c, a});
      log.push_back({"mail", "send", {c, a}});
      t.unit_tests.push_back(list_contains(TestKind::kStateChange, "mail", "sent", c + " " + a));
    }
    if (difficulty >= 3) {
      sol.push_back({"CALL", "notes", "add", a});
      log.push_back({"notes", "add", {a}});
      t.unit_tests.push_back(list_contains(TestKind::kStateChange, "notes", "items", a));
    }
    sol.push_back({"DONE"});
    t.unit_tests.push_back(log_equals(std::move(log)));
  } else if (family == "aggregate") {
    append_login(sol, s, "mail");
    if (difficulty >= 2) append_login(sol, s, "pay");
    if (difficulty >= 3) append_login(sol, s, "notes");
    sol.push_back({"CALL", "mail", "read", c});
    std::vector<Call> log;
    if (difficulty == 1) {
      sol.push_back({"ANSWER", a});
      t.unit_tests.push_back(answer_equals(a));
    } else {
      sol.push_back({"CALL", "pay", "send", c, a});
      sol.push_back({"CALL", "pay", "balance"});
      log.push_back({"pay", "send", {c, a}});
      t.unit_tests.push_back(list_contains(TestKind::kStateChange, "pay", "sent", c + " " + a));
      t.unit_tests.push_back(equals("pay", "balance", remaining));
      if (difficulty >= 3) {
        sol.push_back({"CALL", "notes", "add", remaining});
        log.push_back({"notes", "add", {remaining}});
        t.unit_tests.push_back(list_contains(TestKind::kStateChange, "notes", "items", remaining));
      }
      sol.push_back({"ANSWER", remaining});
      t.unit_tests.push_back(answer_equals(remaining));
    }
    t.unit_tests.push_back(log_equals(std::move(log)));
  } else {
    const std::string m = std::to_string(mail_amount);
    append_login(sol, s, "notes");
    append_login(sol, s, "mail");
    if (difficulty >= 3) append_login(sol, s, "pay");
    sol.push_back({"CALL", "mail", "read", c});
    sol.push_back({"CALL", "notes", "add", m});
    std::vector<Call> log = {{"notes", "add", {m}}};
    t.unit_tests.push_back(list_contains(TestKind::kStateChange, "notes", "items", m));
    if (difficulty >= 2) {
      sol.push_back({"CALL", "mail", "send", c, m});
      log.push_back({"mail", "send", {c, m}});
      t.unit_tests.push_back(list_contains(TestKind::kStateChange, "mail", "sent", c + " " + m));
    }
    if (difficulty >= 3 && mail_amount <= balance) {
      sol.push_back({"CALL", "pay", "send", c, m});
      log.push_back({"pay", "send", {c, m}});
      t.unit_tests.push_back(list_contains(TestKind::kStateChange, "pay", "sent", c + " " + m));
    }
    sol.push_back({"DONE"});
    t.unit_tests.push_back(log_equals(std::move(log)));
  }
  return t;
}

std::vector<Token> encode_turn(const std::vector<Command>& commands, const Vocab& vocab) {
  std::vector<Token> out;
  for (std::size_t i = 0; i < commands.size(); ++i) {
    if (i) out.push_back(vocab.separator());
    for (const auto& s : commands[i]) out.push_back(vocab.at(s));
  }
  out.push_back(vocab.stop());
  return out;
}

}  // namespace

SplitCounts split_counts(int n) {
  SplitCounts c;
  c.train = static_cast<int>(std::lround(0.6 * n));
  c.dev = static_cast<int>(std::lround(0.2 * n));
  if (c.train + c.dev > n) c.dev = n - c.train;
  c.test = n - c.train - c.dev;
  return c;
}

std::vector<Task> generate_tasks(const std::string& family, int count, std::uint64_t seed) {
  if (std::find(families().begin(), families().end(), family) == families().end()) {
    throw MalformedInput("unknown task family: " + family);
  }
  if (count < 1) throw ContractViolation("generate_tasks: count must be >= 1");
  Rng rng(mix_seed({seed, fnv1a(family)}));
  auto vocab = make_vocab();

  std::vector<int> order(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) order[static_cast<std::size_t>(i)] = i;
  std::shuffle(order.begin(), order.end(), rng);
  const auto counts = split_counts(count);
  std::vector<Split> split_of(static_cast<std::size_t>(count));
  for (int rank = 0; rank < count; ++rank) {
    Split s = rank < counts.train ? Split::kTrain
              : rank < counts.train + counts.dev ? Split::kDev
                                                 : Split::kTest;
    split_of[static_cast<std::size_t>(order[static_cast<std::size_t>(rank)])] = s;
  }

  std::vector<Task> tasks;
  for (int sc = 0; sc < count; ++sc) {
    const int difficulty = std::discrete_distribution<int>({0.0, 0.4, 0.4, 0.2})(rng);
    char id[64];
    std::snprintf(id, sizeof(id), "%s-s%03d", family.c_str(), sc);
    for (int v = 1; v <= 3; ++v) {
      Task t = build_variant(family, difficulty, rng);
      t.scenario_id = id;
      t.task_id = std::string(id) + "-v" + std::to_string(v);
      t.variant = v;
      t.split = split_of[static_cast<std::size_t>(sc)];

      Rng demo_rng(0);
      Episode ep(t, vocab, static_cast<int>(t.solution.size()) + 1);
      for (const auto& turn : demonstrate(t, *vocab, DemoNoise{}, demo_rng)) {
        if (ep.done()) break;
        ep.step(turn);
      }
      if (ep.reward() != 1.0) {
        throw std::logic_error("generated task not solvable by the demonstrator: " + t.task_id);
      }
      tasks.push_back(std::move(t));
    }
  }
  return tasks;
}

std::vector<std::vector<Token>> demonstrate(const Task& task, const Vocab& vocab, const DemoNoise& noise,
                                            Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::vector<Token>> turns;
  const auto& sol = task.solution;
  for (std::size_t i = 0; i < sol.size(); ++i) {
    const auto& cmd = sol[i];
    const bool login_start = cmd.size() == 4 && cmd[0] == "CALL" && cmd[1] == "supervisor";
    if (login_start && noise.premature_call_rate > 0.0 && u(rng) < noise.premature_call_rate) {
      // Try the app's first call before logging in; it fails with AUTH.
      const std::string& app = cmd[3];
      for (std::size_t j = i + 2; j < sol.size(); ++j) {
        if (sol[j].size() >= 3 && sol[j][0] == "CALL" && sol[j][1] == app) {
          turns.push_back(encode_turn({sol[j]}, vocab));
          break;
        }
      }
    }
    if (cmd[0] == "CALL" && noise.docs_rate > 0.0 && u(rng) < noise.docs_rate) {
      turns.push_back(encode_turn({{"DOCS", cmd[1], cmd[2]}}, vocab));
    }
    turns.push_back(encode_turn({cmd}, vocab));
  }
  return turns;
}

// ---------------------------------------------------------------------------
// JSON

std::string to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kDev: return "dev";
    case Split::kTest: return "test";
  }
  return "train";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "dev") return Split::kDev;
  if (s == "test") return Split::kTest;
  throw MalformedInput("unknown split: " + s);
}

std::string to_string(TestKind kind) {
  switch (kind) {
    case TestKind::kStateChange: return "state-change";
    case TestKind::kNoExtraneousChange: return "no-extraneous-change";
    case TestKind::kAnswer: return "answer";
  }
  return "state-change";
}

namespace {

TestKind kind_from_string(const std::string& s) {
  if (s == "state-change") return TestKind::kStateChange;
  if (s == "no-extraneous-change") return TestKind::kNoExtraneousChange;
  if (s == "answer") return TestKind::kAnswer;
  throw MalformedInput("unknown unit test kind: " + s);
}

const char* op_name(Predicate::Op op) {
  switch (op) {
    case Predicate::Op::kEquals: return "equals";
    case Predicate::Op::kListContains: return "list_contains";
    case Predicate::Op::kLogEquals: return "log_equals";
    case Predicate::Op::kAnswerEquals: return "answer_equals";
  }
  return "equals";
}

Predicate::Op op_from_string(const std::string& s) {
  if (s == "equals") return Predicate::Op::kEquals;
  if (s == "list_contains") return Predicate::Op::kListContains;
  if (s == "log_equals") return Predicate::Op::kLogEquals;
  if (s == "answer_equals") return Predicate::Op::kAnswerEquals;
  throw MalformedInput("unknown predicate op: " + s);
}

nlohmann::json call_to_json(const Call& c) {
  nlohmann::json j = nlohmann::json::array({c.app, c.fn});
  for (const auto& a : c.args) j.push_back(a);
  return j;
}

Call call_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() < 2) throw MalformedInput("call must be [app, fn, args...]");
  Call c{j[0].get<std::string>(), j[1].get<std::string>(), {}};
  for (std::size_t i = 2; i < j.size(); ++i) c.args.push_back(j[i].get<std::string>());
  return c;
}

nlohmann::json state_to_json(const WorldState& s) {
  nlohmann::json apps = nlohmann::json::object();
  for (const auto& [app, store] : s.apps) {
    nlohmann::json kv = nlohmann::json::object();
    for (const auto& [k, v] : store) {
      if (const auto* str = std::get_if<std::string>(&v)) {
        kv[k] = *str;
      } else {
        kv[k] = std::get<std::vector<std::string>>(v);
      }
    }
    apps[app] = kv;
  }
  nlohmann::json log = nlohmann::json::array();
  for (const auto& c : s.transaction_log) log.push_back(call_to_json(c));
  return {{"apps", apps},
          {"sessions", s.sessions},
          {"bound_vars", s.bound_vars},
          {"transaction_log", log}};
}

WorldState state_from_json(const nlohmann::json& j) {
  WorldState s;
  for (const auto& [app, kv] : j.at("apps").items()) {
    auto& store = s.apps[app];
    for (const auto& [k, v] : kv.items()) {
      if (v.is_string()) {
        store[k] = v.get<std::string>();
      } else if (v.is_array()) {
        store[k] = v.get<std::vector<std::string>>();
      } else {
        throw MalformedInput("state value must be a string or list of strings: " + app + "." + k);
      }
    }
  }
  s.sessions = j.at("sessions").get<std::set<std::string>>();
  s.bound_vars = j.at("bound_vars").get<std::map<std::string, std::string>>();
  for (const auto& c : j.at("transaction_log")) s.transaction_log.push_back(call_from_json(c));
  return s;
}

}  // namespace

nlohmann::json task_to_json(const Task& t) {
  nlohmann::json tests = nlohmann::json::array();
  for (const auto& ut : t.unit_tests) {
    nlohmann::json p = {{"op", op_name(ut.predicate.op)}};
    switch (ut.predicate.op) {
      case Predicate::Op::kEquals:
      case Predicate::Op::kListContains:
        p["app"] = ut.predicate.app;
        p["key"] = ut.predicate.key;
        p["value"] = ut.predicate.value;
        break;
      case Predicate::Op::kLogEquals: {
        nlohmann::json calls = nlohmann::json::array();
        for (const auto& c : ut.predicate.calls) calls.push_back(call_to_json(c));
        p["calls"] = calls;
        break;
      }
      case Predicate::Op::kAnswerEquals:
        p["value"] = ut.predicate.value;
        break;
    }
    tests.push_back({{"kind", to_string(ut.kind)}, {"predicate", p}});
  }
  return {{"task_id", t.task_id},
          {"scenario_id", t.scenario_id},
          {"family", t.family},
          {"variant", t.variant},
          {"difficulty", t.difficulty},
          {"split", to_string(t.split)},
          {"instruction", t.instruction},
          {"initial_state", state_to_json(t.initial_state)},
          {"unit_tests", tests},
          {"solution", t.solution},
          {"max_turns_train", t.max_turns_train},
          {"max_turns_eval", t.max_turns_eval}};
}

Task task_from_json(const nlohmann::json& j) {
  try {
    Task t;
    t.task_id = j.at("task_id").get<std::string>();
    t.scenario_id = j.at("scenario_id").get<std::string>();
    t.family = j.at("family").get<std::string>();
    t.variant = j.at("variant").get<int>();
    t.difficulty = j.at("difficulty").get<int>();
    t.split = split_from_string(j.at("split").get<std::string>());
    t.instruction = j.at("instruction").get<std::vector<std::string>>();
    t.initial_state = state_from_json(j.at("initial_state"));
    for (const auto& ut : j.at("unit_tests")) {
      UnitTest test;
      test.kind = kind_from_string(ut.at("kind").get<std::string>());
      const auto& p = ut.at("predicate");
      test.predicate.op = op_from_string(p.at("op").get<std::string>());
      if (p.contains("app")) test.predicate.app = p.at("app").get<std::string>();
      if (p.contains("key")) test.predicate.key = p.at("key").get<std::string>();
      if (p.contains("value")) test.predicate.value = p.at("value").get<std::string>();
      if (p.contains("calls")) {
        for (const auto& c : p.at("calls")) test.predicate.calls.push_back(call_from_json(c));
      }
      t.unit_tests.push_back(std::move(test));
    }
    t.solution = j.value("solution", std::vector<std::vector<std::string>>{});
    t.max_turns_train = j.value("max_turns_train", kTrainTurnLimit);
    t.max_turns_eval = j.value("max_turns_eval", kEvalTurnLimit);
    if (t.unit_tests.empty()) throw MalformedInput("task " + t.task_id + " has no unit tests");
    auto vocab = make_vocab();
    for (const auto& s : t.instruction) vocab->at(s);
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw MalformedInput(std::string("task record: ") + e.what());
  }
}

void write_tasks(const std::filesystem::path& path, std::span<const Task> tasks) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  for (const auto& t : tasks) out << task_to_json(t).dump() << '\n';
}

std::vector<Task> read_tasks(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MalformedInput("cannot open task file: " + path.string());
  std::vector<Task> tasks;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      tasks.push_back(task_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw MalformedInput(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return tasks;
}

}  // namespace loop::miniworld
