#pragma once

#include <stdexcept>
#include <string>

namespace olfsl {

// Invalid configuration: bad shapes, malformed layer stacks, unknown config keys.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad or missing input data: dataset roots, manifests, image files, checkpoints.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Numeric breakdown at runtime (non-finite loss, degenerate scores).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// API misuse: backward on a detached tensor, reusing a consumed tape,
// optimizer key mismatches.
class LogicError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class CheckpointError : public DataError {
 public:
  enum class Kind { bad_magic, bad_version, truncated, shape_mismatch };

  CheckpointError(Kind kind, const std::string& msg) : DataError(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

// Stable CLI exit codes.
enum ExitCode : int {
  kExitOk = 0,
  kExitConfig = 2,
  kExitData = 3,
  kExitNumeric = 4,
  kExitVerification = 5,
};

}  // namespace olfsl
