#include "latinf/logging.hpp"

#include <spdlog/sinks/stdout_color_sinks.h>

namespace latinf {

std::shared_ptr<spdlog::logger> logger() {
  static std::shared_ptr<spdlog::logger> instance = [] {
    auto l = spdlog::get("latinf");
    if (!l) l = spdlog::stderr_color_mt("latinf");
    l->set_pattern("[%H:%M:%S] [%^%l%$] %v");
    return l;
  }();
  return instance;
}

void set_log_level(const std::string& level) { logger()->set_level(spdlog::level::from_str(level)); }

}  // namespace latinf
