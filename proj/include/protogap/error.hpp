#pragma once

#include <stdexcept>
#include <string>

namespace protogap {

/// Base of every error raised by the library. Each subclass maps to one
/// failure family so the CLI can translate it into a stable exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes or lengths do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// An argument lies outside the mathematical domain of the operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf produced or encountered where a finite value is required.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Model configuration is inconsistent.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A tensor's shape disagrees with the configuration; the message names it.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Malformed file content (checkpoint header, corpus sidecar, report JSON).
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Invalid request: bad indices, conflicting interventions, undefined
/// experiment for this model.
class SpecError : public Error {
 public:
  using Error::Error;
};

/// Two results computed under different evaluator contracts were combined.
class ContractError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace protogap
