#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace svfm::cli {

/// Exit codes of every command.
enum ExitCode : int { Ok = 0, BadConfig = 2, NumericalFailure = 3 };

/// Parses argv-style arguments (args[0] is the program name) and runs one
/// subcommand: gen | train | eval | forecast | nfe-report. Reports go to `out`,
/// diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace svfm::cli
