#pragma once

#include <string>
#include <vector>

namespace histoprog::cli {

/// Entry point of the histoprog tool. Returns 0 on success, 1 on validation
/// errors (bad flags, config or inputs) and 2 on numerical failures.
int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args);  // args exclude the program name

}  // namespace histoprog::cli
