#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "cdtta/errors.hpp"

namespace cdtta::cli {

// Process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumeric = 4;

int exit_code(ErrorKind kind) noexcept;

// Runs one command line (args[0] is the program name). Never throws.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cdtta::cli
