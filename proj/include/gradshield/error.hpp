// Copyright 2026 The GradShield Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>

namespace gradshield {

/// Base of every error thrown by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller broke an operation's precondition (shape mismatch, out-of-range index, ...).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

/// An iterative kernel hit its iteration cap.
class ConvergenceFailure : public Error {
 public:
  ConvergenceFailure(const std::string& what, double residual)
      : Error(what + " (residual " + std::to_string(residual) + ")"), residual_(residual) {}
  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

/// Cosine similarity requested between two zero vectors, or a zero candidate gradient.
class UndefinedSimilarity : public Error {
 public:
  using Error::Error;
};

/// Binary file could not be decoded. Carries the byte offset of the failure.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::uint64_t offset)
      : Error(what + " at byte offset " + std::to_string(offset)), offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

/// Non-finite values surfaced during training.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// The inversion oracle cannot be applied to this gradient.
class OracleInapplicable : public Error {
 public:
  using Error::Error;
};

/// Every gradient-inversion restart diverged.
class AttackFailure : public Error {
 public:
  using Error::Error;
};

/// Configuration document failed validation. `field` is a dotted path, `line` 1-based (0 if unknown).
class ConfigError : public Error {
 public:
  ConfigError(std::string field, std::size_t line, const std::string& what)
      : Error(format(field, line, what)), field_(std::move(field)), line_(line) {}
  const std::string& field() const noexcept { return field_; }
  std::size_t line() const noexcept { return line_; }

 private:
  static std::string format(const std::string& field, std::size_t line, const std::string& what) {
    std::string out = "config";
    if (line > 0) out += ":" + std::to_string(line);
    if (!field.empty()) out += ": " + field;
    return out + ": " + what;
  }
  std::string field_;
  std::size_t line_;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ContractViolation(message);
}

}  // namespace gradshield
