#pragma once

#include <cstdlib>
#include <iostream>
#include <string>
#include <string_view>

namespace blackfed::log {

enum class Level { error = 0, warn = 1, info = 2, debug = 3 };

/// Verbosity from BLACKFED_LOG (error|warn|info|debug), default warn.
inline Level threshold() {
  static const Level level = [] {
    const char* env = std::getenv("BLACKFED_LOG");
    const std::string_view v = env ? env : "";
    if (v == "error") return Level::error;
    if (v == "info") return Level::info;
    if (v == "debug") return Level::debug;
    return Level::warn;
  }();
  return level;
}

inline void write(Level level, std::string_view tag, const std::string& text) {
  if (level > threshold()) return;
  std::cerr << "[blackfed " << tag << "] " << text << '\n';
}

inline void error(const std::string& text) { write(Level::error, "error", text); }
inline void warn(const std::string& text) { write(Level::warn, "warn", text); }
inline void info(const std::string& text) { write(Level::info, "info", text); }
inline void debug(const std::string& text) { write(Level::debug, "debug", text); }

}  // namespace blackfed::log
