#pragma once

#include <string>
#include <utility>
#include <vector>

namespace cpkd {

// Entry point of the command-line tool. Returns 0 on success, 1 on
// validation errors (including unknown flags), 2 on I/O errors.
int run_cli(int argc, const char* const* argv);

// Introspection for tests: (subcommand, [(flag, description), ...]) for
// every subcommand, so help coverage can be asserted without spawning.
std::vector<std::pair<std::string, std::vector<std::pair<std::string, std::string>>>> cli_flag_table();

}  // namespace cpkd
