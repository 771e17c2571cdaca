#pragma once

#include <stdexcept>
#include <string>

namespace fatspeech {

// Bad invocation or configuration (CLI exit code 1).
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed, missing or inconsistent input data (CLI exit code 2).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training produced a non-finite loss (CLI exit code 3).
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::string last_checkpoint)
      : std::runtime_error(what), last_checkpoint_(std::move(last_checkpoint)) {}
  const std::string& last_checkpoint() const { return last_checkpoint_; }

 private:
  std::string last_checkpoint_;
};

}  // namespace fatspeech
