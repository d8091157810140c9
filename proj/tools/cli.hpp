#pragma once

namespace latinf::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfigError = 2,
  kDataError = 3,
  kIntegrityError = 4,
  kNumericError = 5,
};

// Parses argv and runs one command. Never throws; returns the process exit code.
int run(int argc, const char* const* argv);

}  // namespace latinf::cli
