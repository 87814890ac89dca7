#pragma once

/**
 * Command-line surface.
 *
 * Commands: synth, distill, train, replay, eval, report. Global flags:
 * --config <path>, --seed <u64>, --out <dir>, --mock-vlm <rule>. Configs are
 * JSON; unknown keys are rejected before any work starts, and the validated
 * config is echoed verbatim to <out>/config.echo.
 *
 * Exit codes: 0 success, 1 validation failure, 2 runtime failure (partial
 * results are left in place).
 */

#include <string>
#include <vector>

namespace rainkit::cli {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

int run(int argc, const char* const* argv);

// Convenience for tests: run("distill", {"--config", ...}).
int run_args(const std::vector<std::string>& args);

}  // namespace rainkit::cli
