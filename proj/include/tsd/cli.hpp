#pragma once

// Command-line surface: gen | train | probe | backtest | gradcheck.
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <string>
#include <vector>

namespace tsd {

int run_cli(std::vector<std::string> args);  // args without the program name

}  // namespace tsd
