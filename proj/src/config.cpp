#include "ssmcl/config.hpp"

#include <fstream>
#include <initializer_list>
#include <sstream>

#include "json.hpp"

namespace ssmcl {

using nlohmann::json;

namespace {

// Fail-closed view over one JSON object: every key must be consumed or known.
class Section {
 public:
  Section(const json& j, std::string path, std::initializer_list<const char*> allowed)
      : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config: '" + display() + "' must be an object");
    for (const auto& [key, value] : j_.items()) {
      bool ok = false;
      for (const char* a : allowed) ok = ok || key == a;
      if (!ok) throw ConfigError("config: unknown key '" + qualified(key) + "'");
    }
  }

  bool has(const char* key) const { return j_.contains(key); }
  const json& at(const char* key) const { return j_.at(key); }
  std::string qualified(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  template <typename T>
  void read(const char* key, T& out) const {
    if (!has(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError("config: key '" + qualified(key) + "' has the wrong type");
    }
  }

  void read_count(const char* key, Index& out) const {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number_integer()) {
      throw ConfigError("config: key '" + qualified(key) + "' must be an integer");
    }
    out = v.get<Index>();
  }

  void read_real(const char* key, double& out) const {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number()) throw ConfigError("config: key '" + qualified(key) + "' must be a number");
    out = v.get<double>();
  }

  void read_bool(const char* key, bool& out) const {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_boolean()) throw ConfigError("config: key '" + qualified(key) + "' must be a boolean");
    out = v.get<bool>();
  }

 private:
  std::string display() const { return path_.empty() ? "<root>" : path_; }

  const json& j_;
  std::string path_;
};

std::vector<std::string> string_list(const json& v, const std::string& where) {
  if (!v.is_array()) throw ConfigError("config: '" + where + "' must be a list of strings");
  std::vector<std::string> out;
  for (const auto& e : v) {
    if (!e.is_string()) throw ConfigError("config: '" + where + "' must be a list of strings");
    out.push_back(e.get<std::string>());
  }
  return out;
}

void parse_bench(const json& j, BenchSpec& b) {
  Section s(j, "bench",
            {"seed", "tasks", "classes_per_task", "train_per_class", "test_per_class", "seq_len",
             "d_raw", "template_scale", "noise_scale", "task_subspace_dim"});
  s.read("seed", b.seed);
  s.read_count("tasks", b.tasks);
  s.read_count("classes_per_task", b.classes_per_task);
  s.read_count("train_per_class", b.train_per_class);
  s.read_count("test_per_class", b.test_per_class);
  s.read_count("seq_len", b.seq_len);
  s.read_count("d_raw", b.d_raw);
  s.read_real("template_scale", b.template_scale);
  s.read_real("noise_scale", b.noise_scale);
  s.read_count("task_subspace_dim", b.task_subspace_dim);
}

void parse_model(const json& j, ModelDims& d) {
  Section s(j, "model", {"d_model", "d_state", "d_delta", "n_blocks", "d_out", "gate"});
  s.read_count("d_model", d.d_model);
  d.d_delta = d.d_model;
  d.d_out = d.d_model;
  s.read_count("d_state", d.d_state);
  s.read_count("d_delta", d.d_delta);
  s.read_count("n_blocks", d.n_blocks);
  s.read_count("d_out", d.d_out);
  s.read_bool("gate", d.gate);
}

void parse_train(const json& j, TrainConfig& t) {
  Section s(j, "train",
            {"epochs", "batch_size", "lr", "head_lr", "eta", "optimizer", "adam", "flags", "seed",
             "trainable", "freeze_bias_after_first_task", "safety_cap"});
  Index epochs = t.epochs;
  s.read_count("epochs", epochs);
  t.epochs = static_cast<int>(epochs);
  s.read_count("batch_size", t.batch_size);
  s.read_real("lr", t.lr);
  s.read_real("head_lr", t.head_lr);
  s.read_real("eta", t.eta);
  s.read("seed", t.seed);
  s.read_bool("freeze_bias_after_first_task", t.freeze_bias_after_first_task);
  s.read_bool("safety_cap", t.null_rank.safety_cap);
  if (s.has("optimizer")) {
    std::string mode;
    s.read("optimizer", mode);
    if (mode == "plain") {
      t.optimizer = OptimizerMode::Plain;
    } else if (mode == "adaptive") {
      t.optimizer = OptimizerMode::Adaptive;
    } else {
      throw ConfigError("config: train.optimizer must be 'plain' or 'adaptive'");
    }
  }
  if (s.has("adam")) {
    Section a(s.at("adam"), "train.adam", {"beta1", "beta2", "eps"});
    a.read_real("beta1", t.adam.beta1);
    a.read_real("beta2", t.adam.beta2);
    a.read_real("eps", t.adam.eps);
  }
  if (s.has("flags")) t.flags = ProjectorFlags::parse(string_list(s.at("flags"), "train.flags"));
  if (s.has("trainable")) {
    Section m(s.at("trainable"), "train.trainable",
              {"A", "W_B", "W_C", "W_delta", "delta_bias", "W_out"});
    m.read_bool("A", t.trainable.A);
    m.read_bool("W_B", t.trainable.W_B);
    m.read_bool("W_C", t.trainable.W_C);
    m.read_bool("W_delta", t.trainable.W_delta);
    m.read_bool("delta_bias", t.trainable.delta_bias);
    m.read_bool("W_out", t.trainable.W_out);
  }
}

void parse_grad_check(const json& j, GradCheckConfig& g) {
  Section s(j, "grad_check",
            {"seeds", "d_raw", "d_model", "d_state", "d_delta", "seq_len", "batch", "n_blocks",
             "d_out", "classes", "gate", "step", "tolerance"});
  s.read("seeds", g.seeds);
  s.read_count("d_raw", g.d_raw);
  s.read_count("d_model", g.d_model);
  s.read_count("d_state", g.d_state);
  s.read_count("d_delta", g.d_delta);
  s.read_count("seq_len", g.seq_len);
  s.read_count("batch", g.batch);
  s.read_count("n_blocks", g.n_blocks);
  s.read_count("d_out", g.d_out);
  s.read_count("classes", g.classes);
  s.read_bool("gate", g.gate);
  s.read_real("step", g.step);
  s.read_real("tolerance", g.tolerance);
  if (g.classes < 2) throw ConfigError("config: grad_check.classes must be >= 2");
  if (!(g.step > 0.0)) throw ConfigError("config: grad_check.step must be > 0");
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  Section s(root, "",
            {"bench", "dataset", "model", "train", "ablate", "sweep", "grad_check", "out_dir"});
  RunConfig cfg;
  if (s.has("bench")) parse_bench(s.at("bench"), cfg.bench);
  if (s.has("dataset")) {
    std::string path;
    s.read("dataset", path);
    cfg.dataset = path;
  }
  if (s.has("model")) parse_model(s.at("model"), cfg.train.dims);
  if (s.has("train")) parse_train(s.at("train"), cfg.train);
  if (s.has("ablate")) {
    Section a(s.at("ablate"), "ablate", {"subsets"});
    if (a.has("subsets")) {
      const json& subsets = a.at("subsets");
      if (!subsets.is_array()) throw ConfigError("config: 'ablate.subsets' must be a list");
      for (const auto& sub : subsets)
        cfg.ablate_subsets.push_back(ProjectorFlags::parse(string_list(sub, "ablate.subsets")));
    }
  }
  if (s.has("sweep")) {
    Section w(s.at("sweep"), "sweep", {"etas"});
    w.read("etas", cfg.sweep_etas);
  }
  if (s.has("grad_check")) parse_grad_check(s.at("grad_check"), cfg.grad_check);
  if (s.has("out_dir")) {
    std::string out;
    s.read("out_dir", out);
    cfg.out_dir = out;
  }
  cfg.train.dims.seq_len = cfg.bench.seq_len;
  cfg.train.dims.d_raw = cfg.bench.d_raw;
  cfg.bench.validate();
  cfg.train.validate();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

}  // namespace ssmcl
