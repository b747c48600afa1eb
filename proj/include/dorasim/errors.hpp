#pragma once

#include <stdexcept>
#include <string>

namespace dorasim {

/// Invalid or inconsistent configuration (maps to CLI exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller broke an operation's precondition.
class PreconditionError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A protocol invariant (version window, C1 equivalence, scheduling in the
/// past) was broken. Always fatal for the simulation that raised it.
class ProtocolViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// The event queue ran dry before the stop condition held (exit code 3).
class DeadlockError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dorasim
