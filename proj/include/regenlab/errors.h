#pragma once

#include <stdexcept>
#include <string>

namespace regenlab {

// Error taxonomy. Everything derives from Error so callers can catch one type
// at the CLI boundary while tests pin down the specific failure class.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Mismatched tensor shapes / dimensions.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// NaN / Inf encountered in a forward or backward pass.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

// API misuse: preconditions violated (non-scalar backward, missing grads, ...).
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& msg) : Error(msg) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Requested more data than the generator can supply.
class CapacityError : public Error {
 public:
  explicit CapacityError(const std::string& msg) : Error(msg) {}
};

// Token outside the closed vocabulary.
class VocabError : public Error {
 public:
  explicit VocabError(const std::string& msg) : Error(msg) {}
};

class TrainingError : public Error {
 public:
  explicit TrainingError(const std::string& msg) : Error(msg) {}
};

class CycleError : public Error {
 public:
  explicit CycleError(const std::string& msg) : Error(msg) {}
};

class ReportError : public Error {
 public:
  explicit ReportError(const std::string& msg) : Error(msg) {}
};

}  // namespace regenlab
