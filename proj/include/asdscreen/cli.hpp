#pragma once

#include <iosfwd>

namespace asdscreen::cli {

// Exit codes are a scripting contract.
inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitIo = 3;
inline constexpr int kExitNumerical = 4;

// Environment variable naming the default output root.
inline constexpr const char* kOutputRootEnv = "ASDSCREEN_OUTPUT_ROOT";

/// Entry point of the `asdscreen` tool: synth, train, sweep, fuse, report.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace asdscreen::cli
