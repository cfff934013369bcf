// ctxrnnt/errors.h
//
// Exception types shared by all modules. The CLI maps them onto exit codes.

#ifndef CTXRNNT_ERRORS_H_
#define CTXRNNT_ERRORS_H_

#include <stdexcept>
#include <string>

namespace ctxrnnt {

// Caller violated a documented precondition (bad shape, bad id, bad flag).
class UsageError : public std::invalid_argument {
 public:
  explicit UsageError(const std::string &what) : std::invalid_argument(what) {}
};

// Inconsistent or unsupported configuration.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string &what) : std::runtime_error(what) {}
};

// A computation produced NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string &what) : std::runtime_error(what) {}
};

// Malformed input file. `line` is 1-based; 0 when not line oriented.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string &what, int line)
      : std::runtime_error(what), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

// Checkpoint directory does not match what it claims to contain.
class LoadError : public std::runtime_error {
 public:
  explicit LoadError(const std::string &what) : std::runtime_error(what) {}
};

}  // namespace ctxrnnt

#endif  // CTXRNNT_ERRORS_H_
