#pragma once

#include <string>
#include <vector>

namespace convrec {

/// Entry point behind the binary: parses flags (and an optional key = value
/// config file, command line taking precedence), dispatches the subcommand,
/// and maps any failure to a nonzero exit code with a one-line diagnostic.
int run_cli(const std::vector<std::string>& args);

}  // namespace convrec
