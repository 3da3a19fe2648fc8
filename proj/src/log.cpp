#include "vessel3d/log.hpp"

#include <iostream>
#include <mutex>

namespace vessel3d::log {
namespace {

std::mutex& sink_mutex() {
  static std::mutex m;
  return m;
}

Sink& current_sink() {
  static Sink sink = [](Level level, const std::string& message) {
    std::cerr << (level == Level::kWarning ? "warning: " : "") << message << '\n';
  };
  return sink;
}

void emit(Level level, const std::string& message) {
  std::lock_guard lock(sink_mutex());
  if (current_sink()) current_sink()(level, message);
}

}  // namespace

void set_sink(Sink sink) {
  std::lock_guard lock(sink_mutex());
  current_sink() = std::move(sink);
}

void info(const std::string& message) { emit(Level::kInfo, message); }
void warn(const std::string& message) { emit(Level::kWarning, message); }

}  // namespace vessel3d::log
