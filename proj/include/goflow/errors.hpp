#pragma once

#include <stdexcept>
#include <string>

namespace goflow {

// Exit codes used by the command-line tool.
enum class ExitCode : int {
  kSuccess = 0,
  kValidation = 2,
  kNumerical = 3,
  kNonConvergence = 4,
};

class Error : public std::runtime_error {
 public:
  Error(ExitCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ExitCode code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

/// Bad input: domain violations, malformed files, shape mismatches.
class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what) : Error(ExitCode::kValidation, what) {}
};

/// Graph or shape structure that cannot be processed (disconnected graph, mismatched specs).
class StructuralError : public Error {
 public:
  explicit StructuralError(const std::string& what) : Error(ExitCode::kValidation, what) {}
};

/// Non-finite values, singular geometry, integration blow-up.
class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what) : Error(ExitCode::kNumerical, what) {}
};

class ConvergenceError : public Error {
 public:
  explicit ConvergenceError(const std::string& what) : Error(ExitCode::kNonConvergence, what) {}
};

}  // namespace goflow
