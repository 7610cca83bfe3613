#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace vtrfeat::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumeric = 4;

/// Default parent of run directories when --out is not given.
inline constexpr const char* kRunDirEnv = "VTRFEAT_RUN_DIR";

/// Subcommands synth, train, eval-grad, teach, repeat, report. `args`
/// excludes the program name. Progress goes to `out`; failures print one
/// JSON line {"error": kind, "exit_code": n, "message": ...} to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv);

}  // namespace vtrfeat::cli
