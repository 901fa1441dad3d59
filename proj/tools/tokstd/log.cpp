#include "log.hpp"

#include <chrono>
#include <cstdio>
#include <mutex>
#include <string>

namespace tokstd::cli {
namespace {

std::mutex g_mutex;
std::string g_command;
bool g_quiet = false;

} // namespace

void set_log_command(std::string_view command) { g_command = command; }

void set_quiet(bool quiet) { g_quiet = quiet; }

void log(std::string_view level, std::string_view message, nlohmann::json fields) {
    if (g_quiet && level == "info") {
        return;
    }
    const auto now = std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
    nlohmann::json line = {{"ts", now}, {"level", level}, {"cmd", g_command}, {"msg", message}};
    for (auto& [k, v] : fields.items()) {
        line[k] = v;
    }
    const std::string text = line.dump() + '\n';
    std::lock_guard lock(g_mutex);
    std::fputs(text.c_str(), stderr);
}

} // namespace tokstd::cli
