#include "ssmcl/commands.hpp"

#include <atomic>
#include <charconv>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <ostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "ssmcl/binary_io.hpp"
#include "ssmcl/checkpoint.hpp"

namespace ssmcl {

namespace {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

// Shortest round-trip decimal form, so reruns are byte-identical.
std::string num(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string opt_num(const std::optional<double>& v) { return v ? num(*v) : std::string(); }

ojson opt_json(const std::optional<double>& v) { return v ? ojson(*v) : ojson(nullptr); }

void write_text(const fs::path& path, const std::string& text) {
  write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

unsigned thread_cap() {
  unsigned n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("SSMCL_THREADS")) {
    unsigned v = 0;
    const std::string s(env);
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size() || v == 0) {
      throw ConfigError("SSMCL_THREADS must be a positive integer, got '" + s + "'");
    }
    n = v;
  }
  return n;
}

// Runs jobs[i] on up to thread_cap() workers; rethrows the first failure by index.
template <typename Job>
void run_parallel(std::size_t count, Job job) {
  std::vector<std::exception_ptr> errors(count);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        job(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n = std::min<std::size_t>(thread_cap(), count);
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::string accuracy_csv(const AccuracyMatrix& acc) {
  std::string s = "task";
  for (Index i = 0; i < acc.tasks(); ++i) s += ",acc_task" + std::to_string(i);
  s += "\n";
  for (Index j = 0; j < acc.tasks(); ++j) {
    s += std::to_string(j);
    for (Index i = 0; i < acc.tasks(); ++i) s += "," + (i <= j ? num(acc.at(j, i)) : std::string());
    s += "\n";
  }
  return s;
}

std::string metrics_row(const FinalMetrics& m) {
  return num(m.avg_accuracy) + "," + opt_num(m.avg_forgetting);
}

}  // namespace

std::vector<TaskData> load_tasks(RunConfig& cfg) {
  std::vector<TaskData> tasks;
  if (cfg.dataset) {
    tasks = load_dataset(*cfg.dataset);
    if (tasks.empty()) throw ConfigError("dataset " + cfg.dataset->string() + " has no tasks");
    cfg.train.dims.seq_len = tasks.front().train.seq_len;
    cfg.train.dims.d_raw = tasks.front().train.x.cols();
    cfg.train.validate();
  } else {
    tasks = generate(cfg.bench);
  }
  return tasks;
}

int cmd_gen(const RunConfig& cfg, std::ostream& log) {
  const auto tasks = generate(cfg.bench);
  fs::create_directories(cfg.out_dir);
  const fs::path path = cfg.out_dir / "dataset.bin";
  save_dataset(path, tasks);
  log << "wrote " << path.string() << " (" << tasks.size() << " tasks)\n";
  return kExitOk;
}

int cmd_train(RunConfig cfg, std::ostream& log) {
  const auto tasks = load_tasks(cfg);
  fs::create_directories(cfg.out_dir);
  const fs::path ckpt = cfg.out_dir / "checkpoint.bin";
  fs::remove(ckpt);
  const std::string mode = cfg.train.mode();

  std::ofstream jsonl(cfg.out_dir / "metrics.jsonl", std::ios::binary | std::ios::trunc);
  if (!jsonl) throw Error("cannot open " + (cfg.out_dir / "metrics.jsonl").string());

  TrainObserver obs;
  obs.on_epoch = [&](const EpochRecord& r) {
    ojson j;
    j["type"] = "epoch";
    j["mode"] = mode;
    j["task"] = r.task;
    j["epoch"] = r.epoch;
    j["loss"] = r.loss;
    j["lr"] = r.lr;
    jsonl << j.dump() << '\n';
  };
  obs.on_task_end = [&](const TaskRecord& r, const ContinualLearner& learner) {
    ojson j;
    j["type"] = "task";
    j["mode"] = mode;
    j["task"] = r.task;
    j["accuracies"] = r.accuracies;
    j["avg_accuracy"] = r.metrics.avg_accuracy;
    j["avg_forgetting"] = opt_json(r.metrics.avg_forgetting);
    j["old_task_losses"] = r.old_task_losses;
    jsonl << j.dump() << '\n';
    jsonl.flush();
    ModelState state{learner.backbone(), learner.heads(), learner.banks(), learner.projectors()};
    save_checkpoint(ckpt, to_tensors(state));
    log << "[" << mode << "] task " << r.task << " avg_accuracy " << num(r.metrics.avg_accuracy)
        << " avg_forgetting " << (r.metrics.avg_forgetting ? num(*r.metrics.avg_forgetting) : "-")
        << "\n";
  };

  const TrainResult result = run_task_sequence(cfg.train, tasks, obs);
  write_text(cfg.out_dir / "accuracy.csv", accuracy_csv(result.accuracy));
  return kExitOk;
}

int cmd_ablate(RunConfig cfg, std::ostream& log) {
  if (cfg.ablate_subsets.empty()) throw ConfigError("ablate.subsets is empty");
  const auto tasks = load_tasks(cfg);
  std::vector<TrainConfig> runs;
  for (const auto& flags : cfg.ablate_subsets) {
    TrainConfig t = cfg.train;
    t.flags = flags;
    t.validate();
    runs.push_back(t);
  }
  std::vector<FinalMetrics> metrics(runs.size());
  run_parallel(runs.size(), [&](std::size_t i) {
    metrics[i] = run_task_sequence(runs[i], tasks).metrics;
  });
  std::string csv = "subset,mode,avg_accuracy,avg_forgetting\n";
  for (std::size_t i = 0; i < runs.size(); ++i) {
    csv += runs[i].flags.label() + "," + runs[i].mode() + "," + metrics_row(metrics[i]) + "\n";
    log << runs[i].flags.label() << ": " << metrics_row(metrics[i]) << "\n";
  }
  fs::create_directories(cfg.out_dir);
  write_text(cfg.out_dir / "ablation.csv", csv);
  return kExitOk;
}

int cmd_sweep_eta(RunConfig cfg, const std::vector<double>& etas, std::ostream& log) {
  if (etas.empty()) throw ConfigError("sweep.etas is empty");
  for (double e : etas)
    if (!(e >= 0.0 && e <= 1.0)) throw ConfigError("sweep eta " + num(e) + " is outside [0, 1]");
  const auto tasks = load_tasks(cfg);
  std::vector<FinalMetrics> metrics(etas.size());
  run_parallel(etas.size(), [&](std::size_t i) {
    TrainConfig t = cfg.train;
    t.eta = etas[i];
    metrics[i] = run_task_sequence(t, tasks).metrics;
  });
  std::string csv = "eta,avg_accuracy,avg_forgetting\n";
  for (std::size_t i = 0; i < etas.size(); ++i) {
    csv += num(etas[i]) + "," + metrics_row(metrics[i]) + "\n";
    log << "eta " << num(etas[i]) << ": " << metrics_row(metrics[i]) << "\n";
  }
  fs::create_directories(cfg.out_dir);
  write_text(cfg.out_dir / "eta_sweep.csv", csv);
  return kExitOk;
}

int cmd_grad_check(const GradCheckConfig& cfg, std::ostream& log) {
  const GradCheckReport report = run_grad_check(cfg);
  log << "grad-check: " << report.entries.size() << " tensors, max relative error "
      << num(report.max_rel_error) << " (tolerance " << num(cfg.tolerance) << ")\n";
  if (!report.passed) {
    log << "FAIL: worst offender " << report.worst << "\n";
    return kExitCheckFailed;
  }
  log << "PASS\n";
  return kExitOk;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Null-space continual learning for selective state space models"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path, out_dir, mode, flags;
  std::optional<std::uint64_t> seed;
  std::optional<double> eta;
  std::vector<double> etas;
  bool inject_fault = false;
  app.add_option("--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--out", out_dir, "Output directory");
  app.add_option("--seed", seed, "Overrides the benchmark and training seeds");
  app.add_option("--mode", mode, "seq: no projection, cl: projected updates")
      ->check(CLI::IsMember({"seq", "cl"}));
  app.add_option("--eta", eta, "Projection strictness in [0, 1]");
  app.add_option("--flags", flags, "Comma list of H1delta,H1C,H2,H3,Hout (or all, none)");

  auto* gen = app.add_subcommand("gen", "Generate the synthetic benchmark dataset");
  auto* train = app.add_subcommand("train", "Train over the task sequence");
  auto* ablate = app.add_subcommand("ablate", "One run per projector subset");
  auto* sweep = app.add_subcommand("sweep-eta", "One run per eta value");
  sweep->add_option("--etas", etas, "Comma list of eta values")->delimiter(',');
  auto* grad = app.add_subcommand("grad-check", "Compare backward against finite differences");
  grad->add_flag("--inject-fault", inject_fault)->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    RunConfig cfg = config_path.empty() ? parse_run_config("{}") : load_run_config(config_path);
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (seed) {
      cfg.bench.seed = *seed;
      cfg.train.seed = *seed;
    }
    if (!flags.empty()) cfg.train.flags = ProjectorFlags::parse(split_list(flags));
    if (mode == "seq") {
      cfg.train.flags = ProjectorFlags::none();
    } else if (mode == "cl" && !cfg.train.flags.any()) {
      cfg.train.flags = ProjectorFlags::all();
    }
    if (eta) cfg.train.eta = *eta;
    cfg.train.validate();

    if (gen->parsed()) return cmd_gen(cfg, out);
    if (train->parsed()) return cmd_train(cfg, out);
    if (ablate->parsed()) return cmd_ablate(cfg, out);
    if (sweep->parsed()) return cmd_sweep_eta(cfg, etas.empty() ? cfg.sweep_etas : etas, out);
    GradCheckConfig g = cfg.grad_check;
    g.inject_sign_flip = inject_fault;
    return cmd_grad_check(g, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const FormatError& e) {
    err << "input error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitCheckFailed;
  }
}

}  // namespace ssmcl
