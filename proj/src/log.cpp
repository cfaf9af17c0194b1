#include "xroute/log.hpp"

#include <iostream>
#include <mutex>

namespace xroute {

namespace {

std::mutex g_mutex;

WarningHandler& handler() {
    static WarningHandler h = [](const std::string& msg) { std::cerr << "warning: " << msg << '\n'; };
    return h;
}

} // namespace

WarningHandler set_warning_handler(WarningHandler h) {
    std::lock_guard lock(g_mutex);
    auto previous = std::move(handler());
    handler() = std::move(h);
    return previous;
}

void warn(const std::string& message) {
    std::lock_guard lock(g_mutex);
    if (handler()) handler()(message);
}

} // namespace xroute
