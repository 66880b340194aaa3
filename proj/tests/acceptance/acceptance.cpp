// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "ssmcl/commands.hpp"
#include "ssmcl/rng.hpp"
#include "ssmcl/trainer.hpp"

using namespace ssmcl;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string opt_fmt(const std::optional<double>& v) { return v ? fmt(*v) : "n/a"; }

Matrix random_matrix(CounterRng& rng, Index r, Index c) {
  Matrix m(r, c);
  for (Index i = 0; i < r; ++i)
    for (Index j = 0; j < c; ++j) m(i, j) = rng.normal();
  return m;
}

// 1. Analytic gradients against central differences.
Outcome gradient_oracle() {
  GradCheckConfig cfg;
  cfg.seeds = {1, 2, 3, 4, 5, 6};
  const GradCheckReport r = run_grad_check(cfg);
  return {r.passed && r.max_rel_error <= 1e-4,
          "max relative error " + fmt(r.max_rel_error) + " over " + std::to_string(cfg.seeds.size()) +
              " seeds (worst " + r.worst + ")"};
}

// 2. Recurrence equals causal convolution for token-invariant parameters.
Outcome lti_equivalence() {
  CounterRng rng(2024, 2);
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const Index l = 4 + 3 * trial, d = 1 + trial % 5, n = 1 + trial % 4;
    Tensor a0(1, d, n), b0(1, d, n);
    for (auto& v : a0.data()) v = 0.99 * rng.uniform();
    for (auto& v : b0.data()) v = rng.normal();
    const Matrix c0 = random_matrix(rng, 1, n);
    Tensor abar(l, d, n), bbar(l, d, n);
    for (Index t = 0; t < l; ++t) {
      abar.slice(t) = a0.slice(0);
      bbar.slice(t) = b0.slice(0);
    }
    const Matrix x = random_matrix(rng, l, d);
    const Matrix y = selective_scan(x, abar, bbar, c0.replicate(l, 1));
    const Matrix conv = causal_convolution(x, build_lti_kernel(a0, b0, c0, l));
    worst = std::max(worst, (y - conv).norm() / y.norm());
  }
  return {worst <= 1e-10, "max relative error " + fmt(worst) + " over 10 configs"};
}

// 3. Projector symmetry, idempotence and annihilation of exact-rank covariances.
Outcome projector_algebra() {
  CounterRng rng(7, 3);
  double sym = 0.0, idem = 0.0, ann = 0.0;
  for (Index dim : {4, 8, 16, 32}) {
    for (Index r = 1; r < dim; r += 3) {
      const Matrix q = gram(random_matrix(rng, r, dim));
      const Matrix h = build_projector(q, 1.0);
      sym = std::max(sym, (h - h.transpose()).norm());
      idem = std::max(idem, (h * h - h).norm());
      ann = std::max(ann, (q * h).norm() / q.norm());
    }
  }
  return {sym <= 1e-10 && idem <= 1e-10 && ann <= 1e-9,
          "symmetry " + fmt(sym) + ", idempotence " + fmt(idem) + ", |QH|/|Q| " + fmt(ann)};
}

ModelDims small_dims(Index d_raw, Index seq_len) {
  ModelDims d;
  d.d_raw = d_raw;
  d.d_model = 8;
  d.d_state = 3;
  d.d_delta = 8;
  d.seq_len = seq_len;
  d.n_blocks = 2;
  d.d_out = 8;
  return d;
}

// 4. Projected steps leave every old feature product unchanged.
Outcome condition_satisfaction() {
  CounterRng rng(4, 4);
  const ModelDims dims = small_dims(8, 3);
  Backbone blocks = init_backbone(dims, 4);
  SequenceBatch old_data{3, random_matrix(rng, 2 * 3, 8), {0, 1}};
  SequenceBatch new_data{3, random_matrix(rng, 8 * 3, 8), {2, 3, 2, 3, 2, 3, 2, 3}};
  const auto caps = backbone_forward_capture(old_data, blocks);
  std::vector<ProjectorSet> projs;
  for (const auto& c : caps) {
    CovarianceBank bank = CovarianceBank::zeros(dims.d_model, dims.d_delta);
    accumulate(bank, *c.features);
    projs.push_back(build_projectors(bank, 1.0, ProjectorFlags::all()));
  }
  const Backbone before = blocks;
  std::vector<Matrix> heads{random_matrix(rng, 8, 2)};
  const std::vector<int> targets{0, 1, 0, 1, 0, 1, 0, 1};
  for (int step = 0; step < 5; ++step) {
    const auto g = backward(new_data, blocks, heads, targets);
    update_step(blocks, heads, g.grads, &projs, {0.05, 0.1, {}});
  }
  double worst = 0.0;
  auto ratio = [&](const Matrix& f, const Matrix& dw) {
    if (dw.norm() == 0.0) return;
    worst = std::max(worst, (f * dw).norm() / (f.norm() * dw.norm()));
  };
  bool moved = false;
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    const FeatureCapture& f = *caps[k].features;
    const auto& a = before[k].ssm;
    const auto& b = blocks[k].ssm;
    ratio(f.x_feats, b.W_delta - a.W_delta);
    ratio(f.x_feats, b.W_C - a.W_C);
    ratio(f.delta_feats, b.A - a.A);
    ratio(f.deltax_feats, b.W_B - a.W_B);
    ratio(f.y_feats, blocks[k].W_out - before[k].W_out);
    moved = moved || (b.W_C - a.W_C).norm() > 1e-8;
  }
  return {worst <= 1e-9 && moved, "max relative feature product " + fmt(worst)};
}

// Restricted regime: W_C, W_delta, W_out trainable; every task adds fewer
// feature rows than D so the accumulated covariances keep an exact null space.
struct ExactRun {
  std::vector<double> drift;      // old-task output drift after each later task
  std::vector<double> task0_loss;  // task-1 loss after every task
};

ExactRun exact_regime_run() {
  BenchSpec spec;
  spec.seed = 3;
  spec.tasks = 4;
  spec.classes_per_task = 2;
  spec.train_per_class = 1;
  spec.test_per_class = 10;
  spec.seq_len = 3;
  spec.d_raw = 32;
  spec.noise_scale = 0.3;
  TrainConfig c;
  c.dims = small_dims(32, 3);
  c.dims.d_model = c.dims.d_delta = c.dims.d_out = 32;
  c.epochs = 20;
  c.batch_size = 2;
  c.lr = 0.05;
  c.head_lr = 0.5;
  c.trainable.A = false;
  c.trainable.W_B = false;
  c.freeze_bias_after_first_task = true;
  const auto tasks = generate(spec);
  ExactRun out;
  Matrix reference;
  TrainObserver obs;
  obs.on_task_end = [&](const TaskRecord& r, const ContinualLearner& learner) {
    const Matrix y = backbone_forward(tasks[0].train, learner.backbone());
    if (r.task == 0) {
      reference = y;
    } else {
      out.drift.push_back(relative_drift(reference, y));
    }
    out.task0_loss.push_back(r.old_task_losses[0]);
  };
  run_task_sequence(c, tasks, obs);
  return out;
}

// 5. Old-task outputs survive later tasks in the restricted regime.
Outcome exact_consistency(const ExactRun& run) {
  double worst = 0.0;
  for (double d : run.drift) worst = std::max(worst, d);
  return {worst <= 1e-8, "max relative drift " + fmt(worst) + " over " +
                             std::to_string(run.drift.size()) + " later tasks"};
}

// 7. Task-1 loss stays put at every later task boundary.
Outcome loss_stability(const ExactRun& run) {
  double worst = 0.0;
  const double base = run.task0_loss.front();
  for (double l : run.task0_loss) worst = std::max(worst, std::abs(l - base) / base);
  return {worst <= 0.05, "task-1 loss " + fmt(base) + ", max relative change " + fmt(worst)};
}

// 6. Projected training forgets less than plain sequential training.
Outcome anti_forgetting(const std::vector<TaskData>& tasks, const RunConfig& cfg) {
  TrainConfig seq = cfg.train;
  seq.flags = ProjectorFlags::none();
  const FinalMetrics s = run_task_sequence(seq, tasks).metrics;
  TrainConfig cl = cfg.train;
  cl.flags = ProjectorFlags::all();
  const FinalMetrics c = run_task_sequence(cl, tasks).metrics;
  const bool pass = s.avg_forgetting && c.avg_forgetting &&
                    *c.avg_forgetting <= 0.5 * *s.avg_forgetting && c.avg_accuracy > s.avg_accuracy;
  return {pass, "seq acc " + fmt(s.avg_accuracy) + " forg " + opt_fmt(s.avg_forgetting) +
                    "; cl acc " + fmt(c.avg_accuracy) + " forg " + opt_fmt(c.avg_forgetting)};
}

// 8. Forgetting at eta = 1 does not exceed forgetting at eta = 0.
Outcome eta_sweep(const std::vector<TaskData>& tasks, const RunConfig& cfg) {
  const std::vector<double> etas{0.0, 0.5, 0.85, 0.9, 0.95, 1.0};
  std::vector<FinalMetrics> m;
  std::string detail;
  for (double eta : etas) {
    TrainConfig t = cfg.train;
    t.flags = ProjectorFlags::all();
    t.eta = eta;
    m.push_back(run_task_sequence(t, tasks).metrics);
    detail += (detail.empty() ? "" : "; ") + std::string("eta ") + fmt(eta) + ": acc " +
              fmt(m.back().avg_accuracy) + " forg " + opt_fmt(m.back().avg_forgetting);
  }
  const bool pass = m.front().avg_forgetting && m.back().avg_forgetting &&
                    *m.back().avg_forgetting <= *m.front().avg_forgetting;
  return {pass, detail};
}

// 9. Final metrics on hand-computed matrices.
Outcome metric_formulas() {
  struct Case {
    std::vector<std::vector<double>> rows;
    double acc;
    double forg;
  };
  const std::vector<Case> cases{
      {{{100}, {80, 90}}, 85.0, 20.0},
      {{{70}, {70, 70}, {70, 70, 70}}, 70.0, 0.0},
      {{{90}, {70, 80}, {50, 60, 100}}, 70.0, 30.0},
  };
  std::string detail;
  bool pass = true;
  for (const auto& c : cases) {
    const FinalMetrics m = final_metrics(AccuracyMatrix::from_rows(c.rows));
    pass = pass && m.avg_accuracy == c.acc && m.avg_forgetting && *m.avg_forgetting == c.forg;
    detail += (detail.empty() ? "" : "; ") + fmt(m.avg_accuracy) + "/" + opt_fmt(m.avg_forgetting);
  }
  return {pass, detail};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// 10. Two identical train commands give byte-identical outputs.
Outcome determinism(const RunConfig& cfg) {
  const fs::path root = fs::temp_directory_path() / "ssmcl_acceptance_determinism";
  fs::remove_all(root);
  std::ostringstream log;
  for (const char* run : {"a", "b"}) {
    RunConfig c = cfg;
    c.out_dir = root / run;
    cmd_train(c, log);
  }
  bool pass = true;
  std::string detail;
  for (const char* f : {"metrics.jsonl", "accuracy.csv", "checkpoint.bin"}) {
    const std::string a = slurp(root / "a" / f);
    const bool same = !a.empty() && a == slurp(root / "b" / f);
    pass = pass && same;
    detail += std::string(detail.empty() ? "" : ", ") + f + (same ? " identical" : " DIFFERS");
  }
  fs::remove_all(root);
  return {pass, detail};
}

}  // namespace

int main() {
  int failures = 0;
  auto report = [&](int id, const char* name, const std::function<Outcome()>& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!o.pass) ++failures;
    std::printf("%s criterion %d (%s): %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", id, name,
                o.detail.c_str(), secs);
    std::fflush(stdout);
  };

  RunConfig cfg = parse_run_config("{}");
  const auto tasks = load_tasks(cfg);
  ExactRun exact;

  report(1, "gradient oracle", gradient_oracle);
  report(2, "LTI equivalence", lti_equivalence);
  report(3, "projector algebra", projector_algebra);
  report(4, "condition satisfaction", condition_satisfaction);
  report(5, "exact output consistency", [&] {
    exact = exact_regime_run();
    return exact_consistency(exact);
  });
  report(6, "anti-forgetting direction", [&] { return anti_forgetting(tasks, cfg); });
  report(7, "old-task loss stability", [&] { return loss_stability(exact); });
  report(8, "eta sweep direction", [&] { return eta_sweep(tasks, cfg); });
  report(9, "metric formulas", metric_formulas);
  report(10, "determinism", [&] { return determinism(cfg); });

  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
