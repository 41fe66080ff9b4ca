#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mvhuber::cli {

enum ExitCode : int { kOk = 0, kCheckFailed = 1, kUsage = 2, kNumeric = 3 };

// Runs one command line (without the program name). Results go to `out` as a
// single JSON document {"header": ..., "result": ...}; diagnostics go to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mvhuber::cli
