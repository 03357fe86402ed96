#pragma once

#include <stdexcept>
#include <string>

namespace spdelab {

enum class ErrorKind {
  Domain,       // argument outside the operation's domain (negative lambda, p <= d, ...)
  Shape,        // grid / triple mismatch
  Config,       // malformed or inconsistent configuration
  Numeric,      // non-finite value or solver non-convergence
  Gate,         // hypothesis gate refused (smallness, ellipticity)
  Divergence,   // trajectory exceeded the overflow guard
  Io,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  [[nodiscard]] ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Domain: return "domain";
    case ErrorKind::Shape: return "shape";
    case ErrorKind::Config: return "config";
    case ErrorKind::Numeric: return "numeric";
    case ErrorKind::Gate: return "gate";
    case ErrorKind::Divergence: return "divergence";
    case ErrorKind::Io: return "io";
  }
  return "unknown";
}

}  // namespace spdelab
