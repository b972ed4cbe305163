#pragma once

#include <string>
#include <vector>

namespace dtqn {

// Exit codes: 0 success, 1 configuration error, 2 runtime failure.
int run_cli(const std::vector<std::string>& argv);

}  // namespace dtqn
