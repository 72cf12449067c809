#pragma once

#include <stdexcept>
#include <string>

namespace medgrpo {

// Bad shapes, out-of-range hyperparameters, malformed config documents.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Calling an operation outside its precondition (unknown patient, stepping a
// finished episode, empty candidate set, ...).
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// A caller-supplied closure broke its contract, e.g. a policy returning a
// distribution that does not sum to one.
class ContractViolation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training produced a non-finite parameter.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(int iteration, const std::string& what)
      : std::runtime_error(what), iteration_(iteration) {}
  int iteration() const noexcept { return iteration_; }

 private:
  int iteration_;
};

}  // namespace medgrpo
