#pragma once

#include <spdlog/spdlog.h>

#include <memory>
#include <string>

namespace latinf {

// Shared stderr logger named "latinf".
std::shared_ptr<spdlog::logger> logger();
void set_log_level(const std::string& level);

}  // namespace latinf
