#pragma once

#include <stdexcept>
#include <string>

namespace cdtta {

// Error categories. The CLI maps them onto process exit codes.
enum class ErrorKind {
  invalid_shape,
  invalid_branch,
  stale_context,
  invalid_config,
  invalid_feature,
  domain,
  format,
  data,
  undefined_metric,
  numeric,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

const char* to_string(ErrorKind kind) noexcept;

}  // namespace cdtta
