#pragma once

#include <nlohmann/json.hpp>

#include <string_view>

namespace tokstd::cli {

/// One JSON object per line on stderr.
void log(std::string_view level, std::string_view message, nlohmann::json fields = nlohmann::json::object());

inline void info(std::string_view message, nlohmann::json fields = nlohmann::json::object()) {
    log("info", message, std::move(fields));
}

inline void warn(std::string_view message, nlohmann::json fields = nlohmann::json::object()) {
    log("warn", message, std::move(fields));
}

void set_log_command(std::string_view command);
void set_quiet(bool quiet);

} // namespace tokstd::cli
