#pragma once

#include <string>

namespace cfn {

enum class LogLevel { Error = 0, Info = 1, Debug = 2 };

// Parsed once from CFN_LOG (error|info|debug); anything else means info.
LogLevel log_level();

// All output goes to stderr so command stdout stays machine-readable.
void log_error(const std::string& msg);
void log_info(const std::string& msg);
void log_debug(const std::string& msg);

}  // namespace cfn
