#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace protogap {

/// Stable exit codes of the command-line tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitUsage = 2,
  kExitContract = 3,
  kExitNumerical = 4,
};

/// Runs one subcommand. `args` excludes the program name.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace protogap
