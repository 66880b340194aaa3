#include "ssmcl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "ssmcl/rng.hpp"

namespace ssmcl {

void TrainConfig::validate() const {
  dims.validate();
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("learning rate must be > 0");
  if (!(head_lr >= 0.0)) throw ConfigError("head learning rate must be >= 0");
  if (!(eta >= 0.0 && eta <= 1.0)) throw ConfigError("eta must lie in [0, 1]");
  if (flags.h2 && dims.d_delta != dims.d_model) {
    throw ConfigError("projector H2 cannot act on the A gradient unless d_delta == d_model");
  }
}

// ---------------------------------------------------------------------------
// Metrics

double AccuracyMatrix::at(Index j, Index i) const {
  if (i > j) throw DomainError("accuracy a[j][i] is defined only for i <= j");
  return rows_.at(static_cast<std::size_t>(j)).at(static_cast<std::size_t>(i));
}

void AccuracyMatrix::append(std::vector<double> row) {
  if (row.size() != rows_.size() + 1) {
    throw ShapeError("accuracy row for task " + std::to_string(rows_.size() + 1) + " has " +
                     std::to_string(row.size()) + " entries");
  }
  for (double a : row)
    if (!(a >= 0.0 && a <= 100.0)) throw DomainError("accuracy outside [0, 100]");
  rows_.push_back(std::move(row));
}

AccuracyMatrix AccuracyMatrix::from_rows(std::vector<std::vector<double>> rows) {
  AccuracyMatrix acc;
  for (auto& r : rows) acc.append(std::move(r));
  return acc;
}

FinalMetrics final_metrics(const AccuracyMatrix& acc) {
  const Index t = acc.tasks();
  if (t == 0) throw DomainError("final_metrics: empty accuracy matrix");
  const auto& last = acc.row(t - 1);
  FinalMetrics m;
  m.avg_accuracy = std::accumulate(last.begin(), last.end(), 0.0) / static_cast<double>(t);
  if (t >= 2) {
    double total = 0.0;
    for (Index i = 0; i + 1 < t; ++i) {
      double worst = -std::numeric_limits<double>::infinity();
      for (Index j = i; j + 1 < t; ++j) worst = std::max(worst, acc.at(j, i) - acc.at(t - 1, i));
      total += worst;
    }
    m.avg_forgetting = total / static_cast<double>(t - 1);
  }
  return m;
}

double relative_drift(const Matrix& before, const Matrix& after) {
  if (before.rows() != after.rows() || before.cols() != after.cols()) {
    throw ShapeError("relative_drift: shapes differ");
  }
  const double base = before.norm();
  const double diff = (after - before).norm();
  return base == 0.0 ? diff : diff / base;
}

// ---------------------------------------------------------------------------
// Updates

namespace {

// Applies fn to matching tensors of several Gradients-shaped objects.
template <typename Fn, typename... Rest>
void zip_tensors(Fn&& fn, Gradients& first, Rest&... rest) {
  for (std::size_t k = 0; k < first.blocks.size(); ++k) {
    fn(first.blocks[k].A, rest.blocks[k].A...);
    fn(first.blocks[k].W_B, rest.blocks[k].W_B...);
    fn(first.blocks[k].W_C, rest.blocks[k].W_C...);
    fn(first.blocks[k].W_delta, rest.blocks[k].W_delta...);
    fn(first.blocks[k].delta_bias, rest.blocks[k].delta_bias...);
    fn(first.blocks[k].W_out, rest.blocks[k].W_out...);
  }
  for (std::size_t t = 0; t < first.heads.size(); ++t) fn(first.heads[t], rest.heads[t]...);
}

struct AdamState {
  Gradients m, v;
  int step = 0;
};

// Bias-corrected Adam direction m_hat / (sqrt(v_hat) + eps).
Gradients adam_direction(AdamState& st, const Gradients& g, const AdamConfig& cfg) {
  if (st.step == 0) {
    st.m = g;
    st.v = g;
    zip_tensors([](auto& m, auto& v) { m.setZero(); v.setZero(); }, st.m, st.v);
  }
  ++st.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, st.step);
  const double c2 = 1.0 - std::pow(cfg.beta2, st.step);
  Gradients dir = g;
  Gradients grad = g;
  zip_tensors(
      [&](auto& d, auto& m, auto& v, auto& gi) {
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * gi;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * gi.cwiseAbs2();
        d = ((m / c1).array() / ((v / c2).array().sqrt() + cfg.eps)).matrix();
      },
      dir, st.m, st.v, grad);
  return dir;
}

}  // namespace

void update_step(Backbone& blocks, std::vector<Matrix>& heads, const Gradients& direction,
                 const std::vector<ProjectorSet>* projs, const StepConfig& step) {
  if (direction.blocks.size() != blocks.size() || direction.heads.size() != heads.size()) {
    throw ShapeError("update_step: gradient structure does not match the model");
  }
  const Gradients dir = projs ? project_gradients(*projs, direction) : direction;
  const auto& mask = step.trainable;
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    auto& p = blocks[k];
    const auto& g = dir.blocks[k];
    if (mask.A) p.ssm.A -= step.lr * g.A;
    if (mask.W_B) p.ssm.W_B -= step.lr * g.W_B;
    if (mask.W_C) p.ssm.W_C -= step.lr * g.W_C;
    if (mask.W_delta) p.ssm.W_delta -= step.lr * g.W_delta;
    if (mask.delta_bias) p.ssm.delta_bias -= step.lr * g.delta_bias;
    if (mask.W_out) p.W_out -= step.lr * g.W_out;
  }
  for (std::size_t t = 0; t < heads.size(); ++t) heads[t] -= step.head_lr * dir.heads[t];
}

std::vector<double> evaluate(const Backbone& blocks, const std::vector<Matrix>& heads,
                             const std::vector<int>& logit_classes,
                             const std::vector<const SequenceBatch*>& tests) {
  const Matrix cat = concat_heads(heads);
  if (cat.cols() != static_cast<Index>(logit_classes.size())) {
    throw ShapeError("evaluate: logit class map does not match the heads");
  }
  std::vector<double> acc;
  for (const SequenceBatch* test : tests) {
    if (test->size() == 0) {
      acc.push_back(0.0);
      continue;
    }
    const Matrix logits = model_forward(*test, blocks, heads);
    Index correct = 0;
    for (Index i = 0; i < logits.rows(); ++i) {
      Index arg = 0;
      logits.row(i).maxCoeff(&arg);
      if (logit_classes[static_cast<std::size_t>(arg)] == test->labels[static_cast<std::size_t>(i)])
        ++correct;
    }
    acc.push_back(100.0 * static_cast<double>(correct) / static_cast<double>(test->size()));
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Learner

ContinualLearner::ContinualLearner(TrainConfig cfg, Index d_raw) : cfg_(std::move(cfg)) {
  cfg_.dims.d_raw = d_raw;
  cfg_.validate();
  blocks_ = init_backbone(cfg_.dims, cfg_.seed);
  for (Index k = 0; k < cfg_.dims.n_blocks; ++k)
    banks_.push_back(CovarianceBank::zeros(cfg_.dims.d_model, cfg_.dims.d_delta));
}

std::vector<int> ContinualLearner::local_targets(Index task, const SequenceBatch& data) const {
  const auto& classes = task_classes_.at(static_cast<std::size_t>(task));
  std::vector<int> targets;
  targets.reserve(data.labels.size());
  for (int label : data.labels) {
    auto it = std::lower_bound(classes.begin(), classes.end(), label);
    if (it == classes.end() || *it != label) {
      throw ConfigError("label " + std::to_string(label) + " is not a class of task " +
                        std::to_string(task + 1));
    }
    targets.push_back(static_cast<int>(it - classes.begin()));
  }
  return targets;
}

void ContinualLearner::train_task(const TaskData& task,
                                  const std::function<void(const EpochRecord&)>& on_epoch) {
  task.train.validate();
  if (task.train.size() == 0) throw ConfigError("task has no training samples");
  std::set<int> label_set(task.train.labels.begin(), task.train.labels.end());
  for (int label : label_set) {
    if (std::find(logit_classes_.begin(), logit_classes_.end(), label) != logit_classes_.end()) {
      throw ConfigError("class " + std::to_string(label) + " already belongs to an earlier task");
    }
  }
  const Index task_index = tasks_learned();
  task_classes_.emplace_back(label_set.begin(), label_set.end());
  logit_classes_.insert(logit_classes_.end(), label_set.begin(), label_set.end());
  heads_.push_back(Matrix::Zero(cfg_.dims.d_out, static_cast<Index>(label_set.size())));

  const std::vector<int> targets = local_targets(task_index, task.train);
  const bool project = task_index > 0 && cfg_.flags.any();
  StepConfig step{cfg_.lr, cfg_.head_lr, cfg_.trainable};
  if (cfg_.freeze_bias_after_first_task && task_index > 0) step.trainable.delta_bias = false;

  AdamState adam;
  const Index m = task.train.size();
  std::vector<Index> order(static_cast<std::size_t>(m));
  for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), Index{0});
    CounterRng rng(cfg_.seed, mix_key(0x5EED, static_cast<std::uint64_t>(task_index) * 100003u +
                                                  static_cast<std::uint64_t>(epoch)));
    for (Index i = m - 1; i > 0; --i)
      std::swap(order[static_cast<std::size_t>(i)],
                order[rng.below(static_cast<std::uint64_t>(i + 1))]);

    double loss_sum = 0.0;
    for (Index start = 0; start < m; start += cfg_.batch_size) {
      const Index len = std::min(cfg_.batch_size, m - start);
      std::vector<Index> idx(order.begin() + start, order.begin() + start + len);
      const SequenceBatch batch = task.train.gather(idx);
      std::vector<int> batch_targets;
      for (Index i : idx) batch_targets.push_back(targets[static_cast<std::size_t>(i)]);

      std::vector<Matrix> active{heads_.back()};
      LossAndGradients lg = backward(batch, blocks_, active, batch_targets);
      if (!std::isfinite(lg.loss)) {
        throw NumericError("non-finite loss in task " + std::to_string(task_index + 1) +
                           ", epoch " + std::to_string(epoch + 1));
      }
      const Gradients dir = cfg_.optimizer == OptimizerMode::Adaptive
                                ? adam_direction(adam, lg.grads, cfg_.adam)
                                : std::move(lg.grads);
      update_step(blocks_, active, dir, project ? &projectors_ : nullptr, step);
      heads_.back() = std::move(active.front());
      loss_sum += lg.loss * static_cast<double>(len);
    }
    if (on_epoch) on_epoch({task_index, epoch, loss_sum / static_cast<double>(m), cfg_.lr});
  }
}

void ContinualLearner::consolidate(const SequenceBatch& train) {
  train.validate();
  constexpr Index kChunk = 256;
  for (Index start = 0; start < train.size(); start += kChunk) {
    const Index len = std::min(kChunk, train.size() - start);
    SequenceBatch chunk;
    chunk.seq_len = train.seq_len;
    chunk.x = train.x.middleRows(start * train.seq_len, len * train.seq_len);
    chunk.labels.assign(train.labels.begin() + start, train.labels.begin() + start + len);
    const auto outs = backbone_forward_capture(chunk, blocks_);
    for (std::size_t k = 0; k < outs.size(); ++k) accumulate(banks_[k], *outs[k].features);
  }
  projectors_.clear();
  for (const auto& bank : banks_)
    projectors_.push_back(build_projectors(bank, cfg_.eta, cfg_.flags, cfg_.null_rank));
}

std::vector<double> ContinualLearner::evaluate(
    const std::vector<const SequenceBatch*>& tests) const {
  return ssmcl::evaluate(blocks_, heads_, logit_classes_, tests);
}

double ContinualLearner::task_loss(Index task, const SequenceBatch& data) const {
  std::vector<Matrix> head{heads_.at(static_cast<std::size_t>(task))};
  return cross_entropy(model_forward(data, blocks_, head), local_targets(task, data));
}

TrainResult run_task_sequence(const TrainConfig& cfg, const std::vector<TaskData>& tasks,
                              const TrainObserver& observer) {
  if (tasks.empty()) throw ConfigError("run_task_sequence: no tasks");
  std::set<int> seen;
  for (const auto& t : tasks) {
    const std::set<int> labels(t.train.labels.begin(), t.train.labels.end());
    for (int l : labels)
      if (seen.count(l)) throw ConfigError("label spaces overlap: class " + std::to_string(l));
    for (int l : t.test.labels)
      if (!labels.count(l)) {
        throw ConfigError("test label " + std::to_string(l) + " is not in its task's train split");
      }
    seen.insert(labels.begin(), labels.end());
  }

  ContinualLearner learner(cfg, tasks.front().train.x.cols());
  TrainResult result;
  std::vector<const SequenceBatch*> tests;
  for (std::size_t j = 0; j < tasks.size(); ++j) {
    std::vector<double> losses;
    learner.train_task(tasks[j], [&](const EpochRecord& rec) {
      losses.push_back(rec.loss);
      if (observer.on_epoch) observer.on_epoch(rec);
    });
    result.epoch_losses.push_back(std::move(losses));
    learner.consolidate(tasks[j].train);

    tests.push_back(&tasks[j].test);
    TaskRecord rec;
    rec.task = static_cast<Index>(j);
    rec.accuracies = learner.evaluate(tests);
    result.accuracy.append(rec.accuracies);
    rec.metrics = final_metrics(result.accuracy);
    for (std::size_t i = 0; i <= j; ++i)
      rec.old_task_losses.push_back(learner.task_loss(static_cast<Index>(i), tasks[i].train));
    result.loss_history.push_back(rec.old_task_losses);
    if (observer.on_task_end) observer.on_task_end(rec, learner);
  }
  result.metrics = final_metrics(result.accuracy);
  result.blocks = learner.backbone();
  result.heads = learner.heads();
  result.banks = learner.banks();
  result.projectors = learner.projectors();
  return result;
}

}  // namespace ssmcl
