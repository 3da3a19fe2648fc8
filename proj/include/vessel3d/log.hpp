#pragma once

#include <functional>
#include <string>

namespace vessel3d::log {

enum class Level { kInfo, kWarning };

using Sink = std::function<void(Level, const std::string&)>;

/// Replaces the process-wide sink. The default writes to stderr.
void set_sink(Sink sink);

void info(const std::string& message);
void warn(const std::string& message);

}  // namespace vessel3d::log
