#pragma once

#include <string>
#include <vector>

namespace adatsc::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNumeric = 3;

// Runs one command line (without the program name). Returns the exit code.
int run(const std::vector<std::string>& args);

}  // namespace adatsc::cli
