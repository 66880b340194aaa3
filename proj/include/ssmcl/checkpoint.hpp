#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "ssmcl/nullspace.hpp"
#include "ssmcl/ssm.hpp"

namespace ssmcl {

struct NamedTensor {
  std::string name;
  Matrix value;
};

/// Checkpoint format, little-endian:
///   "SSMCKPT1", u32 tensor count, then per tensor
///   u32 name length, name bytes, u32 rows, u32 cols, rows*cols f64 row-major.
std::vector<std::uint8_t> encode_checkpoint(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> decode_checkpoint(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

/// Everything a continual run needs to resume or be inspected.
struct ModelState {
  Backbone blocks;
  std::vector<Matrix> heads;
  std::vector<CovarianceBank> banks;
  std::vector<ProjectorSet> projectors;
};

std::vector<NamedTensor> to_tensors(const ModelState& state);
ModelState from_tensors(const std::vector<NamedTensor>& tensors);

}  // namespace ssmcl
