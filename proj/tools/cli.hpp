#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace xroute::cli {

/// Process exit codes.
enum ExitCode : int {
    kOk = 0,
    kValidation = 2,
    kUsage = 3,
    kNumeric = 4,
};

/// Runs the command line in-process. `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace xroute::cli
