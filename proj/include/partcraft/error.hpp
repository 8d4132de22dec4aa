#pragma once

#include <stdexcept>
#include <string>

namespace partcraft {

enum class ErrorKind {
  Input,
  Config,
  State,
  Backend,
  Numeric,
  Internal,
  NotFound,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Input: return "input";
    case ErrorKind::Config: return "config";
    case ErrorKind::State: return "state";
    case ErrorKind::Backend: return "backend";
    case ErrorKind::Numeric: return "numeric";
    case ErrorKind::Internal: return "internal";
    case ErrorKind::NotFound: return "not-found";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class InputError : public Error {
 public:
  explicit InputError(const std::string& what) : Error(ErrorKind::Input, what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::Config, what) {}
};

class StateError : public Error {
 public:
  explicit StateError(const std::string& what) : Error(ErrorKind::State, what) {}
};

class BackendError : public Error {
 public:
  explicit BackendError(const std::string& what) : Error(ErrorKind::Backend, what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ErrorKind::Numeric, what) {}
};

class InternalError : public Error {
 public:
  explicit InternalError(const std::string& what) : Error(ErrorKind::Internal, what) {}
};

class NotFoundError : public Error {
 public:
  explicit NotFoundError(const std::string& what) : Error(ErrorKind::NotFound, what) {}
};

}  // namespace partcraft
