#pragma once

#include <string>
#include <vector>

namespace mfdet {

// Full command dispatch: args excludes the program name. Returns the process
// exit code: 0 success, 2 configuration or usage error, 3 numerical
// divergence during training.
int run_cli(const std::vector<std::string>& args);

}  // namespace mfdet
