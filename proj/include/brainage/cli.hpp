#pragma once

#include <string>
#include <vector>

namespace brainage {

// Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.
int run_cli(int argc, const char* const* argv);
int run_cli(const std::vector<std::string>& args);

}  // namespace brainage
