#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace tomolab {

inline constexpr const char* kToolVersion = "0.1.0";

enum ExitCode : int {
  kExitOk = 0,
  kExitInput = 1,
  kExitUnidentifiable = 2,
  kExitNoConvergence = 3,
};

/// Runs the tomolab command line; args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Hex SHA-256 of a byte string.
std::string sha256_hex(const std::string& bytes);

}  // namespace tomolab
