#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ssmcl/bench.hpp"
#include "ssmcl/grad.hpp"
#include "ssmcl/nullspace.hpp"
#include "ssmcl/ssm.hpp"

namespace ssmcl {

enum class OptimizerMode { Plain, Adaptive };

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Which backbone tensors receive updates.
struct TrainableMask {
  bool A = true;
  bool W_B = true;
  bool W_C = true;
  bool W_delta = true;
  bool delta_bias = true;
  bool W_out = true;
};

struct TrainConfig {
  ModelDims dims;
  int epochs = 30;
  Index batch_size = 20;
  double lr = 3e-2;       // backbone
  double head_lr = 1e-1;  // classifier heads
  double eta = 1.0;
  OptimizerMode optimizer = OptimizerMode::Plain;
  AdamConfig adam;
  ProjectorFlags flags;
  NullRankOptions null_rank;
  TrainableMask trainable;
  bool freeze_bias_after_first_task = false;
  std::uint64_t seed = 0;

  void validate() const;
  /// "cl" when any projector is enabled, otherwise the sequential baseline "seq".
  std::string mode() const { return flags.any() ? "cl" : "seq"; }
};

/// a[j][i] = accuracy (percent) after task j on task i, for i <= j.
class AccuracyMatrix {
 public:
  Index tasks() const { return static_cast<Index>(rows_.size()); }
  double at(Index j, Index i) const;
  const std::vector<double>& row(Index j) const { return rows_.at(static_cast<std::size_t>(j)); }
  /// Appends the row for the next task; it must have one entry per task seen.
  void append(std::vector<double> row);

  static AccuracyMatrix from_rows(std::vector<std::vector<double>> rows);

 private:
  std::vector<std::vector<double>> rows_;
};

struct FinalMetrics {
  double avg_accuracy = 0.0;
  std::optional<double> avg_forgetting;  // absent for a single task
};

/// Accuracy = mean_i a[T][i]; Forgetting = mean_{i<T} max_{i<=j<T} (a[j][i] - a[T][i]).
/// Negative forgetting terms are kept as-is.
FinalMetrics final_metrics(const AccuracyMatrix& acc);

struct StepConfig {
  double lr = 1e-2;
  double head_lr = 1e-1;
  TrainableMask trainable;
};

/// theta <- theta - lr * P(direction) for the backbone (P = identity when
/// projs is null) and head <- head - head_lr * direction for the heads.
/// delta_bias is never projected.
void update_step(Backbone& blocks, std::vector<Matrix>& heads, const Gradients& direction,
                 const std::vector<ProjectorSet>* projs, const StepConfig& step);

/// Class-incremental accuracy (percent) per test batch: argmax over the
/// concatenated heads, where logit_classes maps each logit column to a class id.
std::vector<double> evaluate(const Backbone& blocks, const std::vector<Matrix>& heads,
                             const std::vector<int>& logit_classes,
                             const std::vector<const SequenceBatch*>& tests);

struct EpochRecord {
  Index task;
  int epoch;
  double loss;
  double lr;
};

/// Sequential learner: one head per task, projected updates from the second
/// task on, covariance and projector refresh after every task.
class ContinualLearner {
 public:
  ContinualLearner(TrainConfig cfg, Index d_raw);

  /// Trains a fresh head and the backbone on one task.
  void train_task(const TaskData& task,
                  const std::function<void(const EpochRecord&)>& on_epoch = {});
  /// Folds the task's features into the covariance banks and rebuilds the projectors.
  void consolidate(const SequenceBatch& train);

  std::vector<double> evaluate(const std::vector<const SequenceBatch*>& tests) const;
  /// Cross-entropy of task `task` with its own head.
  double task_loss(Index task, const SequenceBatch& data) const;

  const TrainConfig& config() const { return cfg_; }
  const Backbone& backbone() const { return blocks_; }
  Backbone& backbone() { return blocks_; }
  const std::vector<Matrix>& heads() const { return heads_; }
  const std::vector<CovarianceBank>& banks() const { return banks_; }
  const std::vector<ProjectorSet>& projectors() const { return projectors_; }
  const std::vector<int>& logit_classes() const { return logit_classes_; }
  Index tasks_learned() const { return static_cast<Index>(task_classes_.size()); }

 private:
  std::vector<int> local_targets(Index task, const SequenceBatch& data) const;

  TrainConfig cfg_;
  Backbone blocks_;
  std::vector<Matrix> heads_;
  std::vector<CovarianceBank> banks_;
  std::vector<ProjectorSet> projectors_;
  std::vector<std::vector<int>> task_classes_;
  std::vector<int> logit_classes_;
};

struct TaskRecord {
  Index task;
  std::vector<double> accuracies;
  FinalMetrics metrics;
  std::vector<double> old_task_losses;  // loss on every task seen so far, own head
};

struct TrainObserver {
  std::function<void(const EpochRecord&)> on_epoch;
  std::function<void(const TaskRecord&, const ContinualLearner&)> on_task_end;
};

struct TrainResult {
  AccuracyMatrix accuracy;
  FinalMetrics metrics;
  std::vector<std::vector<double>> loss_history;  // [after task j][task i]
  std::vector<std::vector<double>> epoch_losses;  // [task][epoch]
  Backbone blocks;
  std::vector<Matrix> heads;
  std::vector<CovarianceBank> banks;
  std::vector<ProjectorSet> projectors;
};

TrainResult run_task_sequence(const TrainConfig& cfg, const std::vector<TaskData>& tasks,
                              const TrainObserver& observer = {});

/// ||after - before||_F / ||before||_F
double relative_drift(const Matrix& before, const Matrix& after);

}  // namespace ssmcl
