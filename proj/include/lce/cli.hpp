#pragma once

#include <string>
#include <vector>

namespace lce::cli {

// Runs one subcommand (args excludes the program name). Exit codes:
// 0 success, 1 validation or runtime failure, 2 usage error.
int run(const std::vector<std::string>& args);

}  // namespace lce::cli
