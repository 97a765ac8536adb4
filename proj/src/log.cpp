#include "cfnet/log.hpp"

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <mutex>

namespace cfn {
namespace {

LogLevel parse_level() {
  const char* env = std::getenv("CFN_LOG");
  if (env == nullptr) return LogLevel::Info;
  if (std::strcmp(env, "error") == 0) return LogLevel::Error;
  if (std::strcmp(env, "debug") == 0) return LogLevel::Debug;
  return LogLevel::Info;
}

void emit(const char* tag, const std::string& msg) {
  static std::mutex mu;
  std::lock_guard<std::mutex> lock(mu);
  std::fprintf(stderr, "[%s] %s\n", tag, msg.c_str());
}

bool enabled(LogLevel want) {
  return static_cast<int>(log_level()) >= static_cast<int>(want);
}

}  // namespace

LogLevel log_level() {
  static const LogLevel level = parse_level();
  return level;
}

void log_error(const std::string& msg) { emit("error", msg); }

void log_info(const std::string& msg) {
  if (enabled(LogLevel::Info)) emit("info", msg);
}

void log_debug(const std::string& msg) {
  if (enabled(LogLevel::Debug)) emit("debug", msg);
}

}  // namespace cfn
