#ifndef LOOP_MINIWORLD_HPP_
#define LOOP_MINIWORLD_HPP_

// MiniWorld: a small stateful multi-app environment driven by a command
// micro-language.
//
// A turn is a token sequence ending in <stop>; commands inside a turn are
// separated by ';'. Commands:
//
//   DOCS app [fn]        list an app's functions, or one function's arity
//   LOGIN app pwd        open a session; pwd must match the supervisor's record
//   CALL app fn args...  invoke a function (needs a session except supervisor)
//   ANSWER value         terminal; records the final answer
//   DONE                 terminal
//
// Every successful CALL binds its result to the variable IT, which may be
// used in place of any argument. Execution stops at the first failing
// command; failures never mutate state.

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "loop/policy.hpp"

namespace loop::miniworld {

inline constexpr int kResponseLimit = 64;
inline constexpr int kTurnTokenCap = 32;
inline constexpr int kTrainTurnLimit = 10;
inline constexpr int kEvalTurnLimit = 12;

// Scalar or list value held in an app's key-value store.
using Value = std::variant<std::string, std::vector<std::string>>;
using Store = std::map<std::string, Value>;

struct Call {
  std::string app;
  std::string fn;
  std::vector<std::string> args;

  auto operator<=>(const Call&) const = default;
  std::string endpoint() const { return app + "." + fn; }
};

struct WorldState {
  std::map<std::string, Store> apps;
  std::set<std::string> sessions{"supervisor"};
  std::map<std::string, std::string> bound_vars;
  std::vector<Call> transaction_log;

  bool operator==(const WorldState&) const = default;
};

enum class TestKind { kStateChange, kNoExtraneousChange, kAnswer };

// Declarative predicate over (final state, transaction log, answer).
struct Predicate {
  enum class Op {
    kEquals,        // apps[app][key] == value
    kListContains,  // value is an element of the list apps[app][key]
    kLogEquals,     // mutating transaction log equals `calls` as a multiset
    kAnswerEquals,  // answer == value
  };
  Op op = Op::kEquals;
  std::string app;
  std::string key;
  std::string value;
  std::vector<Call> calls;
};

struct UnitTest {
  TestKind kind = TestKind::kStateChange;
  Predicate predicate;
};

enum class Split { kTrain, kDev, kTest };

struct Task {
  std::string task_id;
  std::string scenario_id;
  std::string family;
  int variant = 1;
  int difficulty = 1;
  Split split = Split::kTrain;
  std::vector<std::string> instruction;
  WorldState initial_state;
  std::vector<UnitTest> unit_tests;
  // Ground-truth command sequence, one inner vector per command.
  std::vector<std::vector<std::string>> solution;
  int max_turns_train = kTrainTurnLimit;
  int max_turns_eval = kEvalTurnLimit;
};

struct TurnResult {
  std::vector<Token> response_tokens;
  bool execution_error = false;
  std::vector<std::string> endpoints_attempted;
  bool done = false;
  std::optional<std::string> answer;
  int commands = 0;
  int docs_calls = 0;
};

// The fixed MiniWorld token alphabet (< 64 symbols).
std::shared_ptr<const Vocab> make_vocab();

const std::vector<std::string>& families();
const std::vector<std::string>& apps();
const std::vector<std::string>& contacts();

// Function table loaded from the versioned docs data file compiled into the
// library.
struct FunctionDoc {
  std::string name;
  int arity = 0;
  bool mutating = false;
};
const std::map<std::string, std::vector<FunctionDoc>>& docs_table();
int docs_version();

// generate_tasks(family, count, seed): `count` scenarios of 3 variants each,
// split by scenario with ratios 0.6/0.2/0.2. Every task is verified solvable by
// the scripted demonstrator. Throws MalformedInput on unknown families.
std::vector<Task> generate_tasks(const std::string& family, int count, std::uint64_t seed);

// Number of train/dev/test scenarios for `n` scenarios at 0.6/0.2/0.2.
struct SplitCounts {
  int train = 0;
  int dev = 0;
  int test = 0;
};
SplitCounts split_counts(int n);

struct Reset {
  WorldState state;
  std::vector<Token> context;
};
// Deep-copies the task's initial state; context = <pre> followed by the instruction.
Reset reset(const Task& task, const Vocab& vocab);

// Executes one turn in place. `turn_tokens` must end with <stop>.
TurnResult step_turn(WorldState& state, std::span<const Token> turn_tokens, const Vocab& vocab);

// Fraction of unit tests whose predicate holds.
double evaluate(const Task& task, const WorldState& final_state,
                std::span<const Call> transaction_log, const std::optional<std::string>& answer);
bool test_passes(const UnitTest& test, const WorldState& state, std::span<const Call> log,
                 const std::optional<std::string>& answer);

// One live episode: reset, turn execution with the instruction echoed after
// each response, and the turn limit.
class Episode {
 public:
  Episode(const Task& task, std::shared_ptr<const Vocab> vocab, int turn_limit);

  const std::vector<Token>& context() const { return context_; }
  const WorldState& state() const { return state_; }
  const std::optional<std::string>& answer() const { return answer_; }
  int turns() const { return turns_; }
  bool done() const { return done_; }
  // True when the episode ended on the turn limit rather than ANSWER/DONE.
  bool hit_limit() const { return hit_limit_; }

  // Runs step_turn, appends the instruction echo, and marks the episode done
  // on a terminal command or once the turn limit is reached.
  TurnResult step(std::span<const Token> turn_tokens);
  // Ends the episode early (context cap).
  void terminate() { done_ = true; }
  double reward() const;

 private:
  const Task* task_;
  std::shared_ptr<const Vocab> vocab_;
  int turn_limit_;
  WorldState state_;
  std::vector<Token> context_;
  std::optional<std::string> answer_;
  int turns_ = 0;
  bool done_ = false;
  bool hit_limit_ = false;
};

// Full-history replay: reset and execute every turn in one pass.
WorldState replay(const Task& task, std::span<const std::vector<Token>> turns, const Vocab& vocab);

// Scripted demonstrator. Noise inserts extra DOCS lookups before calls and
// premature calls that fail on authentication before the login sequence.
struct DemoNoise {
  double docs_rate = 0.0;
  double premature_call_rate = 0.0;
};
// Turn token sequences (each ending in <stop>) for the task's solution.
std::vector<std::vector<Token>> demonstrate(const Task& task, const Vocab& vocab,
                                            const DemoNoise& noise, Rng& rng);

// JSON task files: one record per line.
nlohmann::json task_to_json(const Task& task);
Task task_from_json(const nlohmann::json& j);
void write_tasks(const std::filesystem::path& path, std::span<const Task> tasks);
std::vector<Task> read_tasks(const std::filesystem::path& path);

std::string to_string(Split split);
Split split_from_string(const std::string& s);
std::string to_string(TestKind kind);

}  // namespace loop::miniworld

#endif  // LOOP_MINIWORLD_HPP_
