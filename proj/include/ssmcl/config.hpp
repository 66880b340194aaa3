#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ssmcl/bench.hpp"
#include "ssmcl/grad.hpp"
#include "ssmcl/trainer.hpp"

namespace ssmcl {

/// Everything one CLI invocation needs. Parsed from a JSON document whose
/// unknown keys are rejected.
struct RunConfig {
  BenchSpec bench;
  std::optional<std::filesystem::path> dataset;  // load instead of generating
  TrainConfig train;
  std::vector<ProjectorFlags> ablate_subsets;
  std::vector<double> sweep_etas;
  GradCheckConfig grad_check;
  std::filesystem::path out_dir = "out";
};

/// Throws ConfigError naming the offending key on any malformed input.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace ssmcl
