#pragma once

#include <stdexcept>
#include <string>

namespace caswit {

enum class ErrorKind {
  Usage,      // bad CLI arguments or misuse of an API precondition
  Config,     // invalid configuration value or combination
  Dimension,  // tensor/grid shape mismatch
  Parameter,  // invalid numeric parameter (eps <= 0, ...)
  Data,       // bad input data (labels out of range, duplicate tiles, ...)
  Parse,      // malformed text input (manifest, config file)
  Format,     // malformed binary input (checkpoint, netpbm)
  Numeric,    // NaN/Inf abort
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

// Process exit codes: 0 success, 1 usage, 2 data, 3 numeric.
inline int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Usage:
    case ErrorKind::Config:
    case ErrorKind::Dimension:
    case ErrorKind::Parameter:
      return 1;
    case ErrorKind::Data:
    case ErrorKind::Parse:
    case ErrorKind::Format:
      return 2;
    case ErrorKind::Numeric:
      return 3;
  }
  return 1;
}

}  // namespace caswit
