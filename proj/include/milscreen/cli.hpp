#pragma once

#include <iosfwd>

namespace milscreen {

/// Exit codes of the command-line front end.
enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2 };

/// Runs one command (generate, tile, train, eval, attention, impact, trial).
/// Output directories default to $MILSCREEN_OUT, else the working directory.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace milscreen
