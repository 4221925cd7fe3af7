#pragma once

#include <string>

namespace docseg::log {

/// Verbosity from DOCSEG_LOG: 0 errors only, 1 warnings, 2 info (default), 3 debug.
int verbosity();

void warn(const std::string& msg);
void info(const std::string& msg);
void debug(const std::string& msg);

}  // namespace docseg::log
