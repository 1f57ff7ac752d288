#ifndef LOOP_ERROR_HPP_
#define LOOP_ERROR_HPP_

#include <stdexcept>
#include <string>

namespace loop {

// Input that does not satisfy a documented format (bad token index, bad file).
class MalformedInput : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values where finite ones are required.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A caller broke an operation's precondition.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// A run configuration that cannot be satisfied.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace loop

#endif  // LOOP_ERROR_HPP_
