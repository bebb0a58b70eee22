#pragma once

#include <optional>
#include <string>

#include "cdtta/errors.hpp"

namespace cdtta::testing {

struct Caught {
  std::optional<ErrorKind> kind;
  std::string message;
};

// Runs f and reports the cdtta::Error it raised, if any.
template <typename F>
Caught catch_error(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return {e.kind(), e.what()};
  }
  return {};
}

}  // namespace cdtta::testing
