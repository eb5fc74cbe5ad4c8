#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace bmcl {

/// Shape mismatch between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A numeric argument outside its valid domain (T <= 0, probability > 1, ...).
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Caller broke an API precondition (non-scalar backward, foreign tape, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Data violates a domain invariant (group id inconsistent with attribute/label, empty group, ...).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input file. `position` is a byte offset for binary files and a
/// 1-based line number for text files.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t position)
      : std::runtime_error(what), position_(position) {}
  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

/// File written by an incompatible format version.
class FormatVersionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid experiment configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace bmcl
