#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace cmkt::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kSuiteFailure = 3 };

// Subcommands: synth, train, decode, eval, gradcheck. `args` excludes the program name.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cmkt::cli
