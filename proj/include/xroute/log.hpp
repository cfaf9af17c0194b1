#pragma once

#include <functional>
#include <string>

namespace xroute {

using WarningHandler = std::function<void(const std::string&)>;

/// Installs a warning sink and returns the previous one. The default handler
/// writes "warning: <msg>" to stderr.
WarningHandler set_warning_handler(WarningHandler handler);

void warn(const std::string& message);

} // namespace xroute
