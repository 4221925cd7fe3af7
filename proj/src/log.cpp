#include "docseg/log.hpp"

#include <cstdlib>
#include <iostream>

namespace docseg::log {

int verbosity() {
  static const int level = [] {
    const char* env = std::getenv("DOCSEG_LOG");
    if (!env || !*env) return 2;
    return std::atoi(env);
  }();
  return level;
}

void warn(const std::string& msg) {
  if (verbosity() >= 1) std::cerr << "warning: " << msg << "\n";
}

void info(const std::string& msg) {
  if (verbosity() >= 2) std::cerr << msg << "\n";
}

void debug(const std::string& msg) {
  if (verbosity() >= 3) std::cerr << "debug: " << msg << "\n";
}

}  // namespace docseg::log
