#pragma once

// Minimal stderr logging. The threshold comes from LIOUVILLE_REACH_LOG
// (error, warn, info, debug); default warn.

#include <cstdlib>
#include <iostream>
#include <mutex>
#include <string>

namespace lreach::log {

enum class Level
{
  error = 0,
  warn = 1,
  info = 2,
  debug = 3,
};

inline Level threshold()
{
  static const Level level = [] {
    const char* env = std::getenv("LIOUVILLE_REACH_LOG");
    const std::string v = env ? env : "";
    if (v == "error") return Level::error;
    if (v == "info") return Level::info;
    if (v == "debug") return Level::debug;
    return Level::warn;
  }();
  return level;
}

inline void write(Level level, const std::string& message)
{
  if (static_cast<int>(level) > static_cast<int>(threshold())) return;
  static std::mutex mutex;
  static const char* names[] = {"error", "warn", "info", "debug"};
  std::lock_guard<std::mutex> lock(mutex);
  std::cerr << "[lreach " << names[static_cast<int>(level)] << "] " << message << '\n';
}

inline void info(const std::string& m) { write(Level::info, m); }
inline void warn(const std::string& m) { write(Level::warn, m); }
inline void debug(const std::string& m) { write(Level::debug, m); }

}  // namespace lreach::log
