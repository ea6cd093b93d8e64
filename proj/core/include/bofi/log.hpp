#pragma once

#include <string_view>

namespace bofi::log {

enum class Level { Error = 0, Info = 1, Debug = 2 };

/// Verbosity comes from BOFI_LOG={error,info,debug}; default info.
Level level();
void set_level(Level l);

void error(std::string_view msg);
void info(std::string_view msg);
void debug(std::string_view msg);

}  // namespace bofi::log
