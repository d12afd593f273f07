#ifndef SAE_ERROR_HPP
#define SAE_ERROR_HPP

#include <iostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sae {

/// Input failed a documented precondition (bad shape, out-of-range value).
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A dense or per-node Cholesky factorization failed.
class FactorizationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// MCMC produced a non-finite draw; carries the iteration at which it happened.
class SamplerError : public std::runtime_error {
 public:
  SamplerError(const std::string& what, long iteration)
      : std::runtime_error(what + " (iteration " + std::to_string(iteration) + ")"),
        iteration_(iteration) {}
  long iteration() const noexcept { return iteration_; }

 private:
  long iteration_;
};

/// Aggregated record-level validation failures, one entry per offending row.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(std::vector<std::string> issues)
      : std::runtime_error(join(issues)), issues_(std::move(issues)) {}
  const std::vector<std::string>& issues() const noexcept { return issues_; }

 private:
  static std::string join(const std::vector<std::string>& issues) {
    std::string out = std::to_string(issues.size()) + " validation error(s)";
    for (const auto& s : issues) out += "\n  " + s;
    return out;
  }
  std::vector<std::string> issues_;
};

namespace detail {

inline void warn(const std::string& msg) { std::clog << "warning: " << msg << '\n'; }

}  // namespace detail
}  // namespace sae

#endif  // SAE_ERROR_HPP
