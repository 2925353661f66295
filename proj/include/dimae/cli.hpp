#pragma once

#include <iostream>
#include <string>
#include <vector>

namespace dimae::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitValidation = 3;
inline constexpr int kExitIo = 4;
inline constexpr int kExitNumeric = 5;

/// Runs one subcommand. Failures print a single line "error: <category>: <message>"
/// to `err`; usage errors also print the usage text.
int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr);
/// `args` excludes the program name.
int dispatch(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr);

}  // namespace dimae::cli
