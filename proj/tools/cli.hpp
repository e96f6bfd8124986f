#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mct::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kDataFailure = 2, kNumericFailure = 3 };

/// Runs one command line (without the program name). Normal output goes to
/// `out`, progress and diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mct::cli
