#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "ssmcl/config.hpp"

namespace ssmcl {

/// Exit-code contract shared by every subcommand.
enum ExitCode : int { kExitOk = 0, kExitCheckFailed = 1, kExitConfig = 2, kExitNumeric = 3 };

/// Loads the task list named by the config: the dataset file when one is
/// given, otherwise the generated benchmark. Model input dims follow the data.
std::vector<TaskData> load_tasks(RunConfig& cfg);

/// Each command writes only below cfg.out_dir and returns an ExitCode.
/// Errors propagate as exceptions; run_cli maps them to exit codes.
int cmd_gen(const RunConfig& cfg, std::ostream& log);
int cmd_train(RunConfig cfg, std::ostream& log);
int cmd_ablate(RunConfig cfg, std::ostream& log);
int cmd_sweep_eta(RunConfig cfg, const std::vector<double>& etas, std::ostream& log);
int cmd_grad_check(const GradCheckConfig& cfg, std::ostream& log);

/// Full command-line entry point.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace ssmcl
