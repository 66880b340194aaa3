#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "ssmcl/ssm.hpp"

namespace ssmcl {

struct BenchSpec {
  std::uint64_t seed = 0;
  Index tasks = 5;
  Index classes_per_task = 4;
  Index train_per_class = 100;
  Index test_per_class = 50;
  Index seq_len = 16;
  Index d_raw = 32;
  double template_scale = 1.0;
  double noise_scale = 0.1;
  /// When > 0, each task's templates lie in its own random subspace of this
  /// dimension; 0 draws template tokens from the full D_raw space.
  Index task_subspace_dim = 6;

  void validate() const;
};

struct TaskData {
  Index num_classes = 0;
  SequenceBatch train;
  SequenceBatch test;
};

/// Class-incremental synthetic benchmark. Class c of task t has global id
/// t * classes_per_task + c and a fixed template; samples are template plus
/// spherical Gaussian noise. Every draw is keyed by (seed, class, split,
/// sample), so adding tasks never changes earlier ones.
std::vector<TaskData> generate(const BenchSpec& spec);

/// Binary dataset format, little-endian:
///   "SSMCL1\0", u32 T, u32 L, u32 D_raw,
///   T x (u32 classes, u32 M_train, u32 M_test),
///   per task: train tokens then test tokens as f64 (sample, token, dim) order,
///   per task: train labels then test labels as u32.
void save_dataset(const std::filesystem::path& path, const std::vector<TaskData>& tasks);
std::vector<TaskData> load_dataset(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_dataset(const std::vector<TaskData>& tasks);
std::vector<TaskData> decode_dataset(const std::vector<std::uint8_t>& bytes);

}  // namespace ssmcl
