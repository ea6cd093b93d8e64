#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace bofi::cli {

/// Exit codes of the bofi tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitRuntime = 4;

/// Runs the tool on argv-style arguments (without the program name).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace bofi::cli
