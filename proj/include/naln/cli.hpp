#pragma once

#include <ostream>

namespace naln {

inline constexpr const char* kToolVersion = "0.1.0";

/// Runs the command-line tool. Returns the process exit code: 0 on success,
/// 2 for usage or data errors, 3 for internal errors.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace naln
