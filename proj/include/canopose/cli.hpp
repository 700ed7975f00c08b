#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace canopose {

/// Exit codes of the command-line tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,
  kExitDegenerate = 2,
  kExitPropertyFailure = 3,
};

/// Runs one subcommand. `args` excludes the program name. JSON results go to
/// `out`, logs and the resolved config to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace canopose
