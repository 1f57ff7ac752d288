#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "loop/error.hpp"
#include "loop/miniworld.hpp"

namespace loop::miniworld {
namespace {

using loop::testing::relay_fixture;
using loop::testing::turn;

std::string joined(std::span<const Token> tokens, const Vocab& vocab) {
  std::string out;
  for (const auto& w : vocab.decode(tokens)) out += (out.empty() ? "" : " ") + w;
  return out;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

TEST(Vocab, FitsUnderSixtyFour) {
  auto vocab = make_vocab();
  EXPECT_LT(vocab->size(), 64u);
  EXPECT_EQ(vocab->symbol(vocab->stop()), "<stop>");
  EXPECT_EQ(vocab->symbol(vocab->separator()), ";");
}

TEST(Docs, TableHasFourAppsNineFunctions) {
  std::size_t fns = 0;
  for (const auto& [app, list] : docs_table()) fns += list.size();
  EXPECT_EQ(docs_table().size(), 4u);
  EXPECT_EQ(fns, 9u);
  EXPECT_EQ(docs_version(), 1);
}

TEST(StepTurn, DocsListsPayFunctions) {
  auto vocab = make_vocab();
  auto task = relay_fixture();
  auto state = task.initial_state;
  auto r = step_turn(state, turn("DOCS pay", *vocab), *vocab);
  EXPECT_FALSE(r.execution_error);
  EXPECT_EQ(joined(r.response_tokens, *vocab), "OK balance request send");
  auto one = step_turn(state, turn("DOCS pay send", *vocab), *vocab);
  EXPECT_EQ(joined(one.response_tokens, *vocab), "OK send 2");
  EXPECT_EQ(state, task.initial_state);
}

TEST(StepTurn, CallWithoutLoginIsAuthError) {
  auto vocab = make_vocab();
  auto task = relay_fixture();
  auto state = task.initial_state;
  auto r = step_turn(state, turn("CALL pay send c1 5", *vocab), *vocab);
  EXPECT_TRUE(r.execution_error);
  EXPECT_EQ(joined(r.response_tokens, *vocab), "ERR AUTH");
  EXPECT_EQ(r.endpoints_attempted, std::vector<std::string>{"pay.send"});
  EXPECT_EQ(state, task.initial_state);
}

TEST(StepTurn, EmptyTurnIsParseError) {
  auto vocab = make_vocab();
  auto task = relay_fixture();
  auto state = task.initial_state;
  std::vector<Token> empty = {vocab->stop()};
  auto r = step_turn(state, empty, *vocab);
  EXPECT_TRUE(r.execution_error);
  EXPECT_EQ(joined(r.response_tokens, *vocab), "ERR PARSE");
}

TEST(StepTurn, ErrorCodes) {
  auto vocab = make_vocab();
  auto task = relay_fixture();
  auto state = task.initial_state;
  EXPECT_EQ(joined(step_turn(state, turn("CALL pay read", *vocab), *vocab).response_tokens, *vocab),
            "ERR NOFN");
  EXPECT_EQ(joined(step_turn(state, turn("LOGIN pay pw1", *vocab), *vocab).response_tokens, *vocab),
            "ERR AUTH");
  EXPECT_EQ(joined(step_turn(state, turn("CALL supervisor password", *vocab), *vocab).response_tokens,
                   *vocab),
            "ERR ARITY");
  EXPECT_EQ(joined(step_turn(state, turn("CALL mail read c3", *vocab), *vocab).response_tokens, *vocab),
            "ERR AUTH");
  EXPECT_EQ(joined(step_turn(state, turn("OK", *vocab), *vocab).response_tokens, *vocab), "ERR PARSE");
  EXPECT_EQ(state, task.initial_state);
  step_turn(state, turn("LOGIN mail pw1", *vocab), *vocab);
  EXPECT_EQ(joined(step_turn(state, turn("CALL mail read c3", *vocab), *vocab).response_tokens, *vocab),
            "ERR NOENT");
}

TEST(StepTurn, FailFastStopsTheTurn) {
  auto vocab = make_vocab();
  auto task = relay_fixture();
  auto state = task.initial_state;
  auto r = step_turn(state, turn("LOGIN pay pw3 ; CALL pay send c2 9 ; CALL pay send c2 4", *vocab), *vocab);
  EXPECT_TRUE(r.execution_error);
  EXPECT_EQ(joined(r.response_tokens, *vocab), "OK pay ERR NOENT");
  EXPECT_EQ(r.commands, 2);
  EXPECT_TRUE(state.transaction_log.empty());
  EXPECT_EQ(std::get<std::string>(state.apps.at("pay").at("balance")), "7");
}

TEST(StepTurn, BoundVariableCarriesLastResult) {
  auto vocab = make_vocab();
  auto task = relay_fixture();
  auto state = task.initial_state;
  auto r = step_turn(
      state, turn("CALL supervisor password pay ; LOGIN pay IT ; CALL pay request c2 ; CALL pay send c2 IT", *vocab),
      *vocab);
  EXPECT_FALSE(r.execution_error);
  ASSERT_EQ(state.transaction_log.size(), 1u);
  EXPECT_EQ(state.transaction_log[0], (Call{"pay", "send", {"c2", "4"}}));
}

TEST(StepTurn, LongResponsesAreTruncated) {
  auto vocab = make_vocab();
  auto task = relay_fixture();
  auto state = task.initial_state;
  std::string text = "DOCS pay";
  for (int i = 0; i < 30; ++i) text += " ; DOCS pay";
  auto r = step_turn(state, turn(text, *vocab), *vocab);
  ASSERT_EQ(r.response_tokens.size(), static_cast<std::size_t>(kResponseLimit) + 1);
  EXPECT_EQ(vocab->symbol(r.response_tokens.back()), "<trunc>");
}

TEST(Reset, PureAndLaidOut) {
  auto vocab = make_vocab();
  auto task = relay_fixture();
  task.initial_state.sessions.insert("pay");
  auto a = reset(task, *vocab);
  auto b = reset(task, *vocab);
  EXPECT_EQ(a.state, b.state);
  EXPECT_EQ(a.context, b.context);
  EXPECT_EQ(a.state.sessions, std::set<std::string>{"supervisor"});
  EXPECT_EQ(joined(a.context, *vocab), "<pre> RELAY c2");
}

TEST(Evaluate, FractionOfPassingTests) {
  auto vocab = make_vocab();
  auto task = relay_fixture();
  Episode ep(task, vocab, 12);
  for (const auto& cmd : task.solution) {
    std::string text;
    for (const auto& w : cmd) text += w + " ";
    ep.step(turn(text, *vocab));
  }
  EXPECT_TRUE(ep.done());
  EXPECT_FALSE(ep.hit_limit());
  EXPECT_EQ(ep.reward(), 1.0);
  EXPECT_EQ(evaluate(task, task.initial_state, {}, std::nullopt), 0.0);
  // Wrong answer only: 3 of 4.
  EXPECT_EQ(evaluate(task, ep.state(), ep.state().transaction_log, std::string("5")), 0.75);
}

TEST(Evaluate, ExtraneousMutationFailsLogTest) {
  auto vocab = make_vocab();
  auto task = relay_fixture();
  auto state = task.initial_state;
  step_turn(state, turn("LOGIN pay pw3 ; CALL pay send c2 4 ; LOGIN notes pw5 ; CALL notes add 4", *vocab),
            *vocab);
  ASSERT_EQ(state.transaction_log.size(), 2u);
  const auto& clean = task.unit_tests[3];
  EXPECT_FALSE(test_passes(clean, state, state.transaction_log, std::nullopt));
  EXPECT_TRUE(test_passes(task.unit_tests[0], state, state.transaction_log, std::nullopt));
  EXPECT_EQ(evaluate(task, state, state.transaction_log, std::string("3")), 0.75);
}

TEST(Episode, TurnLimitEndsTheEpisode) {
  auto vocab = make_vocab();
  auto task = relay_fixture();
  Episode ep(task, vocab, 3);
  for (int i = 0; i < 3; ++i) {
    auto r = ep.step(turn("DOCS mail", *vocab));
    EXPECT_EQ(r.done, i == 2);
  }
  EXPECT_TRUE(ep.hit_limit());
  EXPECT_THROW(ep.step(turn("DONE", *vocab)), ContractViolation);
}

TEST(Episode, InstructionEchoFollowsResponse) {
  auto vocab = make_vocab();
  auto task = relay_fixture();
  Episode ep(task, vocab, 5);
  auto r = ep.step(turn("DOCS notes", *vocab));
  EXPECT_EQ(joined(r.response_tokens, *vocab), "OK list add remove RELAY c2");
}

TEST(Replay, MatchesIncrementalExecution) {
  auto vocab = make_vocab();
  auto task = relay_fixture();
  std::vector<std::vector<Token>> turns = {turn("CALL pay send c2 4", *vocab), turn("LOGIN pay pw3", *vocab),
                                           turn("CALL pay send c2 4", *vocab), turn("CALL pay send c5 2", *vocab)};
  auto state = task.initial_state;
  for (const auto& t : turns) step_turn(state, t, *vocab);
  EXPECT_EQ(replay(task, turns, *vocab), state);
}

TEST(GenerateTasks, SolvableByDemonstrator) {
  auto vocab = make_vocab();
  for (const auto& family : families()) {
    auto tasks = generate_tasks(family, 1, 7);
    ASSERT_EQ(tasks.size(), 3u);
    for (const auto& t : tasks) {
      EXPECT_EQ(t.scenario_id, tasks[0].scenario_id);
      Rng rng(1);
      Episode ep(t, vocab, t.max_turns_eval);
      for (const auto& tt : demonstrate(t, *vocab, {}, rng)) {
        if (!ep.done()) ep.step(tt);
      }
      EXPECT_EQ(ep.reward(), 1.0) << t.task_id;
    }
  }
}

TEST(GenerateTasks, NoisyDemonstrationsStillSucceed) {
  auto vocab = make_vocab();
  auto tasks = generate_tasks("relay", 5, 3);
  Rng rng(4);
  for (const auto& t : tasks) {
    Episode ep(t, vocab, 100);
    auto turns = demonstrate(t, *vocab, DemoNoise{0.5, 0.5}, rng);
    EXPECT_GE(turns.size(), t.solution.size());
    for (const auto& tt : turns) {
      if (!ep.done()) ep.step(tt);
    }
    EXPECT_EQ(ep.reward(), 1.0) << t.task_id;
  }
}

TEST(GenerateTasks, DeterministicFiles) {
  auto dir = std::filesystem::temp_directory_path();
  auto a = generate_tasks("aggregate", 2, 7);
  auto b = generate_tasks("aggregate", 2, 7);
  write_tasks(dir / "loop_tasks_a.jsonl", a);
  write_tasks(dir / "loop_tasks_b.jsonl", b);
  EXPECT_EQ(slurp(dir / "loop_tasks_a.jsonl"), slurp(dir / "loop_tasks_b.jsonl"));
  auto back = read_tasks(dir / "loop_tasks_a.jsonl");
  ASSERT_EQ(back.size(), a.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(task_to_json(back[i]), task_to_json(a[i]));
  std::filesystem::remove(dir / "loop_tasks_a.jsonl");
  std::filesystem::remove(dir / "loop_tasks_b.jsonl");
}

TEST(GenerateTasks, SplitsByScenario) {
  auto c = split_counts(10);
  EXPECT_EQ(c.train, 6);
  EXPECT_EQ(c.dev, 2);
  EXPECT_EQ(c.test, 2);
  auto tasks = generate_tasks("note", 10, 1);
  std::map<std::string, std::set<Split>> by_scenario;
  std::map<Split, int> tally;
  for (const auto& t : tasks) {
    by_scenario[t.scenario_id].insert(t.split);
    ++tally[t.split];
  }
  EXPECT_EQ(by_scenario.size(), 10u);
  for (const auto& [id, splits] : by_scenario) EXPECT_EQ(splits.size(), 1u) << id;
  EXPECT_EQ(tally[Split::kTrain], 18);
  EXPECT_EQ(tally[Split::kDev], 6);
  EXPECT_EQ(tally[Split::kTest], 6);
}

TEST(GenerateTasks, UnknownFamilyThrows) {
  EXPECT_THROW(generate_tasks("banking", 1, 0), MalformedInput);
}

TEST(TaskJson, RejectsUnknownSymbols) {
  auto j = task_to_json(relay_fixture());
  j["instruction"] = {"RELAY", "bob"};
  EXPECT_THROW(task_from_json(j), MalformedInput);
}

}  // namespace
}  // namespace loop::miniworld
