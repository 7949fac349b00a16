#pragma once

#include <nlohmann/json.hpp>

#include <string_view>

namespace prag::log {

enum class Level { debug, info, warn, error };

/// Writes one JSON object per line to stderr: {"level":..,"event":..,<fields>}.
void emit(Level level, std::string_view event, nlohmann::json fields = nlohmann::json::object());

inline void info(std::string_view event, nlohmann::json fields = nlohmann::json::object()) {
  emit(Level::info, event, std::move(fields));
}
inline void warn(std::string_view event, nlohmann::json fields = nlohmann::json::object()) {
  emit(Level::warn, event, std::move(fields));
}
inline void debug(std::string_view event, nlohmann::json fields = nlohmann::json::object()) {
  emit(Level::debug, event, std::move(fields));
}

void set_min_level(Level level);

}  // namespace prag::log
