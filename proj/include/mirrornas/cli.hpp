#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mirrornas {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;      // bad flags, config, or input files
inline constexpr int kExitEvaluator = 3;  // evaluator unreachable or transport failure

/// git-describe-style version captured at configure time.
std::string version_string();

/// Runs one command. `args` excludes the program name. Results go to files or
/// `out`; diagnostics go to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mirrornas
