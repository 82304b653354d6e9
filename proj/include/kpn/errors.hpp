#pragma once

#include <stdexcept>
#include <string>

namespace kpn {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes or lengths that do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A value outside the domain an operation is defined on.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// An API or command used in a way it does not support.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Input record missing a field or carrying a field of the wrong type.
class SchemaError : public Error {
 public:
  using Error::Error;
};

/// Input that cannot be parsed at all (bad JSON, truncated binary file).
class ParseError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values showed up during training.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace kpn
