#pragma once

#include <stdexcept>
#include <string>

namespace infobfr {

// Failure classes map onto CLI exit codes (see cli.hpp).
enum class ErrorKind {
  kInvalidArgument,
  kMissingArtifact,
  kRuntime,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void throw_invalid(const std::string& message) {
  throw Error(ErrorKind::kInvalidArgument, message);
}

[[noreturn]] inline void throw_missing(const std::string& message) {
  throw Error(ErrorKind::kMissingArtifact, message);
}

[[noreturn]] inline void throw_runtime(const std::string& message) {
  throw Error(ErrorKind::kRuntime, message);
}

}  // namespace infobfr
