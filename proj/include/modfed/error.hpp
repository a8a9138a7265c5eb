#pragma once

#include <stdexcept>
#include <string>

namespace modfed {

enum class ErrorKind {
  Shape,
  Contract,
  Config,
  Protocol,
  Numeric,
  UnsupportedSize,
  Io,
};

const char* to_string(ErrorKind kind) noexcept;

// Every failure raised by the library is an Error carrying its kind, so the
// C API can map it onto a status code without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(ErrorKind::Shape, what) {}
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what) : Error(ErrorKind::Contract, what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::Config, what) {}
};

class ProtocolError : public Error {
 public:
  explicit ProtocolError(const std::string& what) : Error(ErrorKind::Protocol, what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ErrorKind::Numeric, what) {}
};

class UnsupportedSizeError : public Error {
 public:
  explicit UnsupportedSizeError(const std::string& what)
      : Error(ErrorKind::UnsupportedSize, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorKind::Io, what) {}
};

}  // namespace modfed

namespace modfed {

// Rethrows `e` as the same error kind with `context` prepended.
[[noreturn]] inline void rethrow_with_context(const Error& e, const std::string& context) {
  const std::string what = context + ": " + e.what();
  switch (e.kind()) {
    case ErrorKind::Shape: throw ShapeError(what);
    case ErrorKind::Contract: throw ContractError(what);
    case ErrorKind::Config: throw ConfigError(what);
    case ErrorKind::Protocol: throw ProtocolError(what);
    case ErrorKind::Numeric: throw NumericError(what);
    case ErrorKind::UnsupportedSize: throw UnsupportedSizeError(what);
    case ErrorKind::Io: throw IoError(what);
  }
  throw Error(e.kind(), what);
}

}  // namespace modfed
