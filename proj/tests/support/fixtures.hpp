#ifndef LOOP_TESTS_FIXTURES_HPP_
#define LOOP_TESTS_FIXTURES_HPP_

#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "loop/miniworld.hpp"
#include "loop/rollout.hpp"

namespace loop::testing {

// "CALL pay send c1 5 ; DONE" -> tokens with a trailing stop.
inline std::vector<Token> turn(const std::string& text, const Vocab& vocab) {
  std::istringstream in(text);
  std::vector<Token> out;
  std::string word;
  while (in >> word) out.push_back(vocab.at(word));
  out.push_back(vocab.stop());
  return out;
}

inline std::vector<std::string> words(std::span<const Token> tokens, const Vocab& vocab) {
  return vocab.decode(tokens);
}

// A relay task with fixed content: pay c2 the requested 4 out of a balance of 7.
inline miniworld::Task relay_fixture() {
  using namespace miniworld;
  Task t;
  t.task_id = "fixture-s000-v1";
  t.scenario_id = "fixture-s000";
  t.family = "relay";
  t.instruction = {"RELAY", "c2"};
  auto& s = t.initial_state;
  s.apps["supervisor"]["contacts"] = contacts();
  s.apps["supervisor"]["password.mail"] = "pw1";
  s.apps["supervisor"]["password.pay"] = "pw3";
  s.apps["supervisor"]["password.notes"] = "pw5";
  s.apps["mail"]["inbox.c2"] = "6";
  s.apps["mail"]["sent"] = std::vector<std::string>{};
  s.apps["pay"]["request.c2"] = "4";
  s.apps["pay"]["request.c5"] = "2";
  s.apps["pay"]["balance"] = "7";
  s.apps["pay"]["sent"] = std::vector<std::string>{};
  s.apps["notes"]["items"] = std::vector<std::string>{"3"};

  UnitTest sent;
  sent.predicate = {Predicate::Op::kListContains, "pay", "sent", "c2 4", {}};
  UnitTest balance;
  balance.predicate = {Predicate::Op::kEquals, "pay", "balance", "3", {}};
  UnitTest answer;
  answer.kind = TestKind::kAnswer;
  answer.predicate = {Predicate::Op::kAnswerEquals, "", "", "3", {}};
  UnitTest clean;
  clean.kind = TestKind::kNoExtraneousChange;
  clean.predicate = {Predicate::Op::kLogEquals, "", "", "", {{"pay", "send", {"c2", "4"}}}};
  t.unit_tests = {sent, balance, answer, clean};
  t.solution = {{"CALL", "supervisor", "password", "pay"},
                {"LOGIN", "pay", "pw3"},
                {"CALL", "pay", "request", "c2"},
                {"CALL", "pay", "send", "c2", "4"},
                {"CALL", "pay", "balance"},
                {"ANSWER", "3"}};
  return t;
}

inline PolicyParams random_params(std::shared_ptr<const Vocab> vocab, int window, Rng& rng, double scale = 1.0) {
  PolicyParams p(std::move(vocab), FeatureConfig{window});
  std::normal_distribution<double> n(0.0, scale);
  auto& w = p.weights();
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = n(rng);
  return p;
}

// Adds N(0, scale) noise to every weight.
inline PolicyParams perturbed(const PolicyParams& p, Rng& rng, double scale) {
  PolicyParams q = p;
  std::normal_distribution<double> n(0.0, scale);
  auto& w = q.weights();
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] += n(rng);
  return q;
}

// A sampled episode on the relay fixture with short limits.
inline Trajectory sampled(const PolicyParams& params, std::uint64_t seed, int turn_limit = 4, int token_cap = 6) {
  RolloutLimits limits;
  limits.turn_limit = turn_limit;
  limits.token_cap = token_cap;
  return *collect_rollout(params, relay_fixture(), 1.0, seed, limits);
}

// A turn record for metric fixtures.
inline TurnRecord record(std::vector<std::string> endpoints, bool error, int commands = 1, int docs = 0) {
  return {std::move(endpoints), error, commands, docs};
}

}  // namespace loop::testing

#endif  // LOOP_TESTS_FIXTURES_HPP_
