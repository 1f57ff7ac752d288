#include <algorithm>
#include <cctype>

#include "loop/error.hpp"
#include "loop/miniworld.hpp"

namespace loop::miniworld {

namespace {

constexpr const char* kDocsJson =
#include "miniworld_docs.inc"
    ;

struct DocsData {
  int version = 0;
  std::map<std::string, std::vector<FunctionDoc>> apps;
};

const DocsData& docs_data() {
  static const DocsData data = [] {
    DocsData d;
    auto j = nlohmann::json::parse(kDocsJson);
    d.version = j.at("version").get<int>();
    for (const auto& [app, fns] : j.at("apps").items()) {
      auto& list = d.apps[app];
      for (const auto& f : fns) {
        list.push_back({f.at("name").get<std::string>(), f.at("arity").get<int>(),
                        f.at("mutating").get<bool>()});
      }
    }
    return d;
  }();
  return data;
}

enum class Code { kParse, kAuth, kNoFn, kArity, kNoEnt };

const char* code_symbol(Code c) {
  switch (c) {
    case Code::kParse: return "PARSE";
    case Code::kAuth: return "AUTH";
    case Code::kNoFn: return "NOFN";
    case Code::kArity: return "ARITY";
    case Code::kNoEnt: return "NOENT";
  }
  return "PARSE";
}

struct CommandError {
  Code code;
};

bool is_digit_symbol(const std::string& s) {
  return s.size() == 1 && std::isdigit(static_cast<unsigned char>(s[0]));
}

const std::string& scalar(const Store& store, const std::string& key) {
  auto it = store.find(key);
  if (it == store.end() || !std::holds_alternative<std::string>(it->second)) {
    throw CommandError{Code::kNoEnt};
  }
  return std::get<std::string>(it->second);
}

std::vector<std::string>& list_at(Store& store, const std::string& key) {
  auto& v = store[key];
  if (!std::holds_alternative<std::vector<std::string>>(v)) v = std::vector<std::string>{};
  return std::get<std::vector<std::string>>(v);
}

bool known_contact(const WorldState& s, const std::string& c) {
  auto app = s.apps.find("supervisor");
  if (app == s.apps.end()) return false;
  auto it = app->second.find("contacts");
  if (it == app->second.end()) return false;
  const auto* list = std::get_if<std::vector<std::string>>(&it->second);
  return list && std::find(list->begin(), list->end(), c) != list->end();
}

const FunctionDoc* find_fn(const std::string& app, const std::string& fn) {
  const auto& apps = docs_data().apps;
  auto it = apps.find(app);
  if (it == apps.end()) return nullptr;
  for (const auto& f : it->second) {
    if (f.name == fn) return &f;
  }
  return nullptr;
}

// Validates and applies one function call. Any throw happens before mutation.
std::vector<std::string> invoke(WorldState& s, const std::string& app, const std::string& fn,
                                const std::vector<std::string>& args) {
  auto found = s.apps.find(app);
  if (found == s.apps.end()) throw CommandError{Code::kNoEnt};
  Store& store = found->second;
  if (app == "supervisor" && fn == "password") {
    const auto& target = args[0];
    if (target == "supervisor" || !docs_data().apps.contains(target)) throw CommandError{Code::kNoEnt};
    return {scalar(store, "password." + target)};
  }
  if (app == "mail" && fn == "read") {
    return {scalar(store, "inbox." + args[0])};
  }
  if (app == "mail" && fn == "send") {
    if (!known_contact(s, args[0]) || !is_digit_symbol(args[1])) throw CommandError{Code::kNoEnt};
    list_at(store, "sent").push_back(args[0] + " " + args[1]);
    return {args[1]};
  }
  if (app == "pay" && fn == "balance") {
    return {scalar(store, "balance")};
  }
  if (app == "pay" && fn == "request") {
    return {scalar(store, "request." + args[0])};
  }
  if (app == "pay" && fn == "send") {
    if (!known_contact(s, args[0]) || !is_digit_symbol(args[1])) throw CommandError{Code::kNoEnt};
    const int balance = std::stoi(scalar(store, "balance"));
    const int amount = std::stoi(args[1]);
    if (amount > balance) throw CommandError{Code::kNoEnt};
    store["balance"] = std::to_string(balance - amount);
    list_at(store, "sent").push_back(args[0] + " " + args[1]);
    return {args[1]};
  }
  if (app == "notes" && fn == "list") {
    auto it = store.find("items");
    if (it == store.end()) return {};
    return std::get<std::vector<std::string>>(it->second);
  }
  if (app == "notes" && fn == "add") {
    if (!is_digit_symbol(args[0])) throw CommandError{Code::kNoEnt};
    list_at(store, "items").push_back(args[0]);
    return {args[0]};
  }
  if (app == "notes" && fn == "remove") {
    auto& items = list_at(store, "items");
    auto it = std::find(items.begin(), items.end(), args[0]);
    if (it == items.end()) throw CommandError{Code::kNoEnt};
    items.erase(it);
    return {args[0]};
  }
  throw CommandError{Code::kNoFn};
}

std::string resolve(const WorldState& s, const std::string& arg) {
  if (arg != "IT") return arg;
  auto it = s.bound_vars.find("IT");
  if (it == s.bound_vars.end()) throw CommandError{Code::kNoEnt};
  return it->second;
}

void require_arity(std::size_t have, std::size_t want) {
  if (have != want) throw CommandError{Code::kArity};
}

}  // namespace

const std::map<std::string, std::vector<FunctionDoc>>& docs_table() { return docs_data().apps; }
int docs_version() { return docs_data().version; }

std::shared_ptr<const Vocab> make_vocab() {
  static const std::shared_ptr<const Vocab> vocab = [] {
    std::vector<std::string> s = {"<stop>", ";",     "<pre>",  "<trunc>", "OK",    "ERR",
                                  "PARSE",  "AUTH",  "NOFN",   "ARITY",   "NOENT", "DOCS",
                                  "LOGIN",  "CALL",  "ANSWER", "DONE",    "IT"};
    for (const auto& a : apps()) s.push_back(a);
    for (const char* f : {"password", "read", "send", "balance", "request", "list", "add", "remove"}) {
      s.emplace_back(f);
    }
    for (const char* v : {"RELAY", "RELAY2", "RELAY3", "AGG", "AGG2", "AGG3", "NOTE", "NOTE2", "NOTE3"}) {
      s.emplace_back(v);
    }
    for (const auto& c : contacts()) s.push_back(c);
    for (int d = 0; d <= 9; ++d) s.push_back(std::to_string(d));
    for (int p = 1; p <= 5; ++p) s.push_back("pw" + std::to_string(p));
    return std::make_shared<const Vocab>(std::move(s), 0, 1);
  }();
  return vocab;
}

const std::vector<std::string>& apps() {
  static const std::vector<std::string> a = {"supervisor", "mail", "pay", "notes"};
  return a;
}

const std::vector<std::string>& contacts() {
  static const std::vector<std::string> c = {"c1", "c2", "c3", "c4", "c5", "c6"};
  return c;
}

const std::vector<std::string>& families() {
  static const std::vector<std::string> f = {"relay", "aggregate", "note"};
  return f;
}

Reset reset(const Task& task, const Vocab& vocab) {
  Reset r{task.initial_state, {}};
  r.state.sessions = {"supervisor"};
  r.context.push_back(vocab.at("<pre>"));
  for (const auto& s : task.instruction) r.context.push_back(vocab.at(s));
  return r;
}

TurnResult step_turn(WorldState& state, std::span<const Token> turn_tokens, const Vocab& vocab) {
  if (turn_tokens.empty() || turn_tokens.back() != vocab.stop()) {
    throw ContractViolation("step_turn: turn must end with the stop token");
  }
  std::vector<std::vector<std::string>> commands(1);
  for (std::size_t i = 0; i + 1 < turn_tokens.size(); ++i) {
    Token t = turn_tokens[i];
    if (t == vocab.separator()) {
      commands.emplace_back();
    } else {
      commands.back().push_back(vocab.symbol(t));
    }
  }

  TurnResult result;
  std::vector<std::string> out;
  for (const auto& cmd : commands) {
    ++result.commands;
    try {
      if (cmd.empty()) throw CommandError{Code::kParse};
      const std::string& verb = cmd[0];
      std::vector<std::string> args(cmd.begin() + 1, cmd.end());
      if (verb == "DOCS") {
        ++result.docs_calls;
        if (args.empty() || args.size() > 2) throw CommandError{Code::kArity};
        auto app = docs_table().find(args[0]);
        if (app == docs_table().end()) throw CommandError{Code::kNoFn};
        if (args.size() == 1) {
          out.push_back("OK");
          for (const auto& f : app->second) out.push_back(f.name);
        } else {
          const auto* f = find_fn(args[0], args[1]);
          if (!f) throw CommandError{Code::kNoFn};
          out.insert(out.end(), {"OK", f->name, std::to_string(f->arity)});
        }
      } else if (verb == "LOGIN") {
        require_arity(args.size(), 2);
        const auto& app = args[0];
        if (!docs_table().contains(app)) throw CommandError{Code::kNoFn};
        if (app != "supervisor") {
          const std::string pwd = resolve(state, args[1]);
          auto sup = state.apps.find("supervisor");
          if (sup == state.apps.end()) throw CommandError{Code::kNoEnt};
          const auto& expected = scalar(sup->second, "password." + app);
          if (pwd != expected) throw CommandError{Code::kAuth};
        }
        state.sessions.insert(app);
        out.insert(out.end(), {"OK", app});
      } else if (verb == "CALL") {
        if (args.size() < 2) throw CommandError{Code::kArity};
        const auto& app = args[0];
        const auto& fn = args[1];
        const auto* doc = find_fn(app, fn);
        if (!doc) throw CommandError{Code::kNoFn};
        result.endpoints_attempted.push_back(app + "." + fn);
        if (!state.sessions.contains(app)) throw CommandError{Code::kAuth};
        std::vector<std::string> call_args(args.begin() + 2, args.end());
        require_arity(call_args.size(), static_cast<std::size_t>(doc->arity));
        for (auto& a : call_args) a = resolve(state, a);
        auto value = invoke(state, app, fn, call_args);
        if (doc->mutating) state.transaction_log.push_back({app, fn, call_args});
        if (!value.empty()) {
          state.bound_vars["IT"] = value.back();
        }
        out.push_back("OK");
        out.insert(out.end(), value.begin(), value.end());
      } else if (verb == "ANSWER") {
        require_arity(args.size(), 1);
        result.answer = resolve(state, args[0]);
        result.done = true;
        out.push_back("OK");
      } else if (verb == "DONE") {
        require_arity(args.size(), 0);
        result.done = true;
        out.push_back("OK");
      } else {
        throw CommandError{Code::kParse};
      }
    } catch (const CommandError& e) {
      result.execution_error = true;
      out.insert(out.end(), {"ERR", code_symbol(e.code)});
      break;
    }
    if (result.done) break;
  }

  if (out.size() > static_cast<std::size_t>(kResponseLimit)) {
    out.resize(kResponseLimit);
    out.emplace_back("<trunc>");
  }
  result.response_tokens = vocab.encode(out);
  return result;
}

bool test_passes(const UnitTest& test, const WorldState& state, std::span<const Call> log,
                 const std::optional<std::string>& answer) {
  const auto& p = test.predicate;
  auto lookup = [&]() -> const Value* {
    auto app = state.apps.find(p.app);
    if (app == state.apps.end()) return nullptr;
    auto it = app->second.find(p.key);
    return it == app->second.end() ? nullptr : &it->second;
  };
  switch (p.op) {
    case Predicate::Op::kEquals: {
      const Value* v = lookup();
      return v && std::holds_alternative<std::string>(*v) && std::get<std::string>(*v) == p.value;
    }
    case Predicate::Op::kListContains: {
      const Value* v = lookup();
      if (!v || !std::holds_alternative<std::vector<std::string>>(*v)) return false;
      const auto& list = std::get<std::vector<std::string>>(*v);
      return std::find(list.begin(), list.end(), p.value) != list.end();
    }
    case Predicate::Op::kLogEquals: {
      std::vector<Call> have(log.begin(), log.end());
      std::vector<Call> want = p.calls;
      std::sort(have.begin(), have.end());
      std::sort(want.begin(), want.end());
      return have == want;
    }
    case Predicate::Op::kAnswerEquals:
      return answer.has_value() && *answer == p.value;
  }
  return false;
}

double evaluate(const Task& task, const WorldState& final_state, std::span<const Call> transaction_log,
                const std::optional<std::string>& answer) {
  if (task.unit_tests.empty()) throw ContractViolation("evaluate: task has no unit tests");
  int passed = 0;
  for (const auto& t : task.unit_tests) {
    if (test_passes(t, final_state, transaction_log, answer)) ++passed;
  }
  return static_cast<double>(passed) / static_cast<double>(task.unit_tests.size());
}

Episode::Episode(const Task& task, std::shared_ptr<const Vocab> vocab, int turn_limit)
    : task_(&task), vocab_(std::move(vocab)), turn_limit_(turn_limit) {
  auto r = reset(task, *vocab_);
  state_ = std::move(r.state);
  context_ = std::move(r.context);
}

TurnResult Episode::step(std::span<const Token> turn_tokens) {
  if (done_) throw ContractViolation("Episode::step after the episode ended");
  TurnResult result = step_turn(state_, turn_tokens, *vocab_);
  ++turns_;
  if (result.answer) answer_ = result.answer;
  for (const auto& s : task_->instruction) result.response_tokens.push_back(vocab_->at(s));
  if (!result.done && turns_ >= turn_limit_) {
    result.done = true;
    hit_limit_ = true;
  }
  done_ = result.done;
  return result;
}

double Episode::reward() const {
  return evaluate(*task_, state_, state_.transaction_log, answer_);
}

WorldState replay(const Task& task, std::span<const std::vector<Token>> turns, const Vocab& vocab) {
  auto r = reset(task, vocab);
  for (const auto& turn : turns) {
    auto result = step_turn(r.state, turn, vocab);
    if (result.done) break;
  }
  return r.state;
}

}  // namespace loop::miniworld
