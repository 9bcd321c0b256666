#pragma once

#include <stdexcept>
#include <string>

namespace pf {

// Failure categories map onto CLI exit codes: usage=2, numeric=3, validation=4.
enum class ErrorKind { Usage, Numeric, Validation };

class Error : public std::runtime_error {
  public:
    Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    ErrorKind kind() const { return kind_; }

  private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail_usage(const std::string& msg) { throw Error(ErrorKind::Usage, msg); }
[[noreturn]] inline void fail_numeric(const std::string& msg) { throw Error(ErrorKind::Numeric, msg); }
[[noreturn]] inline void fail_validation(const std::string& msg) { throw Error(ErrorKind::Validation, msg); }

}  // namespace pf
