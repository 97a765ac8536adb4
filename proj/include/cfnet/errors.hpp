#pragma once

#include <stdexcept>
#include <string>

namespace cfn {

// Bad usage or configuration: unknown keys, shape mismatches, invalid arguments.
// CLI exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Numerical failure at runtime: nonfinite values, failed gradient checks.
// CLI exit code 3.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A broken internal invariant; indicates a bug or corrupted state, not bad input.
// CLI exit code 4.
class InvariantError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed serialized data. Carries a kind so callers can distinguish the
// failure mode without parsing messages.
class FormatError : public std::runtime_error {
 public:
  enum class Kind { BadMagic, BadVersion, Truncated, Corrupt };

  FormatError(Kind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace cfn
