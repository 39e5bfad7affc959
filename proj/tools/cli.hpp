#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace regfactor::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

// args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace regfactor::cli
