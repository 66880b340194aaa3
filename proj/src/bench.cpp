#include "ssmcl/bench.hpp"

#include <cmath>
#include <limits>

#include <Eigen/QR>

#include "ssmcl/binary_io.hpp"
#include "ssmcl/rng.hpp"

namespace ssmcl {

void BenchSpec::validate() const {
  if (tasks < 1 || classes_per_task < 1 || train_per_class < 1 || test_per_class < 1 ||
      seq_len < 1 || d_raw < 1) {
    throw ConfigError("bench: all counts must be >= 1");
  }
  if (!(noise_scale >= 0.0)) throw ConfigError("bench: noise_scale must be >= 0");
  if (!(template_scale >= 0.0)) throw ConfigError("bench: template_scale must be >= 0");
  if (task_subspace_dim < 0 || task_subspace_dim > d_raw) {
    throw ConfigError("bench: task_subspace_dim must lie in [0, d_raw]");
  }
}

namespace {

enum Stream : std::uint64_t { kTemplate = 1, kTrain = 2, kTest = 3, kSubspace = 4 };

std::uint64_t stream_key(Stream stream, std::uint64_t cls, std::uint64_t sample) {
  return mix_key(mix_key(stream, cls), sample);
}

SequenceBatch make_split(const BenchSpec& spec, const std::vector<Matrix>& templates,
                         Index first_class, Index per_class, Stream stream) {
  SequenceBatch batch;
  batch.seq_len = spec.seq_len;
  batch.x.resize(spec.classes_per_task * per_class * spec.seq_len, spec.d_raw);
  Index m = 0;
  for (Index c = 0; c < spec.classes_per_task; ++c) {
    const auto cls = static_cast<std::uint64_t>(first_class + c);
    for (Index i = 0; i < per_class; ++i, ++m) {
      CounterRng rng(spec.seed, stream_key(stream, cls, static_cast<std::uint64_t>(i)));
      auto sample = batch.sample(m);
      sample = templates[static_cast<std::size_t>(c)];
      if (spec.noise_scale > 0.0) {
        for (Index l = 0; l < spec.seq_len; ++l)
          for (Index d = 0; d < spec.d_raw; ++d) sample(l, d) += spec.noise_scale * rng.normal();
      }
      batch.labels.push_back(static_cast<int>(first_class + c));
    }
  }
  return batch;
}

}  // namespace

std::vector<TaskData> generate(const BenchSpec& spec) {
  spec.validate();
  std::vector<TaskData> tasks;
  for (Index t = 0; t < spec.tasks; ++t) {
    const Index first = t * spec.classes_per_task;
    const Index r = spec.task_subspace_dim > 0 ? spec.task_subspace_dim : spec.d_raw;
    Matrix basis;  // d_raw x r, orthonormal columns
    if (spec.task_subspace_dim > 0) {
      CounterRng rng(spec.seed, stream_key(kSubspace, static_cast<std::uint64_t>(t), 0));
      Matrix g(spec.d_raw, r);
      for (Index i = 0; i < g.rows(); ++i)
        for (Index j = 0; j < r; ++j) g(i, j) = rng.normal();
      basis = Eigen::HouseholderQR<Matrix>(g).householderQ() * Matrix::Identity(spec.d_raw, r);
    }
    // Token coordinates are rescaled so the expected token norm matches the full-space case.
    const double coord_scale =
        spec.template_scale * std::sqrt(static_cast<double>(spec.d_raw) / static_cast<double>(r));
    std::vector<Matrix> templates;
    for (Index c = 0; c < spec.classes_per_task; ++c) {
      CounterRng rng(spec.seed, stream_key(kTemplate, static_cast<std::uint64_t>(first + c), 0));
      Matrix coords(spec.seq_len, r);
      for (Index l = 0; l < spec.seq_len; ++l)
        for (Index d = 0; d < r; ++d) coords(l, d) = coord_scale * rng.normal();
      templates.push_back(spec.task_subspace_dim > 0 ? Matrix(coords * basis.transpose()) : coords);
    }
    TaskData task;
    task.num_classes = spec.classes_per_task;
    task.train = make_split(spec, templates, first, spec.train_per_class, kTrain);
    task.test = make_split(spec, templates, first, spec.test_per_class, kTest);
    tasks.push_back(std::move(task));
  }
  return tasks;
}

namespace {

constexpr std::string_view kDatasetMagic{"SSMCL1\0", 7};

std::uint32_t to_u32(Index v, const char* what) {
  if (v < 0 || v > std::numeric_limits<std::uint32_t>::max()) {
    throw Error(std::string("dataset field out of u32 range: ") + what);
  }
  return static_cast<std::uint32_t>(v);
}

}  // namespace

std::vector<std::uint8_t> encode_dataset(const std::vector<TaskData>& tasks) {
  const Index seq_len = tasks.empty() ? 0 : tasks.front().train.seq_len;
  const Index d_raw = tasks.empty() ? 0 : tasks.front().train.x.cols();
  for (const auto& t : tasks) {
    for (const SequenceBatch* b : {&t.train, &t.test}) {
      b->validate();
      if (b->seq_len != seq_len || b->x.cols() != d_raw) {
        throw ShapeError("encode_dataset: tasks disagree on sequence length or width");
      }
    }
  }
  ByteWriter w;
  w.bytes(kDatasetMagic);
  w.u32(to_u32(static_cast<Index>(tasks.size()), "T"));
  w.u32(to_u32(seq_len, "L"));
  w.u32(to_u32(d_raw, "D_raw"));
  for (const auto& t : tasks) {
    w.u32(to_u32(t.num_classes, "classes"));
    w.u32(to_u32(t.train.size(), "M_train"));
    w.u32(to_u32(t.test.size(), "M_test"));
  }
  for (const auto& t : tasks) {
    for (const SequenceBatch* b : {&t.train, &t.test})
      for (Index r = 0; r < b->x.rows(); ++r)
        for (Index c = 0; c < b->x.cols(); ++c) w.f64(b->x(r, c));
  }
  for (const auto& t : tasks) {
    for (const SequenceBatch* b : {&t.train, &t.test})
      for (int label : b->labels) w.u32(to_u32(label, "label"));
  }
  return std::move(w.buffer());
}

std::vector<TaskData> decode_dataset(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes, "dataset");
  r.expect(kDatasetMagic);
  const std::uint32_t n_tasks = r.u32("T");
  const Index seq_len = r.u32("L");
  const Index d_raw = r.u32("D_raw");
  if (n_tasks > 0 && (seq_len == 0 || d_raw == 0)) {
    throw FormatError("dataset: zero sequence length or width", r.offset());
  }
  // Header sizes are checked against the remaining bytes before allocating.
  r.need(static_cast<std::size_t>(n_tasks) * 12, "task headers");
  struct Header {
    std::uint32_t classes, m_train, m_test;
  };
  std::vector<Header> headers(n_tasks);
  unsigned __int128 payload = 0;
  for (auto& h : headers) {
    h.classes = r.u32("classes");
    h.m_train = r.u32("M_train");
    h.m_test = r.u32("M_test");
    const unsigned __int128 m = static_cast<unsigned __int128>(h.m_train) + h.m_test;
    payload += m * static_cast<std::uint64_t>(seq_len) * static_cast<std::uint64_t>(d_raw) * 8 + m * 4;
  }
  if (payload > r.remaining()) throw FormatError("dataset: truncated while reading payload", r.offset());
  std::vector<TaskData> tasks(n_tasks);
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    auto& t = tasks[i];
    t.num_classes = headers[i].classes;
    t.train.seq_len = t.test.seq_len = seq_len;
    t.train.labels.resize(headers[i].m_train);
    t.test.labels.resize(headers[i].m_test);
  }
  for (auto& t : tasks) {
    for (SequenceBatch* b : {&t.train, &t.test}) {
      b->x.resize(b->size() * seq_len, d_raw);
      for (Index row = 0; row < b->x.rows(); ++row)
        for (Index c = 0; c < d_raw; ++c) b->x(row, c) = r.f64("tokens");
    }
  }
  for (auto& t : tasks) {
    for (SequenceBatch* b : {&t.train, &t.test})
      for (int& label : b->labels) {
        const std::uint32_t v = r.u32("label");
        if (v > static_cast<std::uint32_t>(std::numeric_limits<int>::max())) {
          throw FormatError("dataset: label out of range", r.offset() - 4);
        }
        label = static_cast<int>(v);
      }
  }
  if (!r.done()) throw FormatError("dataset: trailing bytes", r.offset());
  return tasks;
}

void save_dataset(const std::filesystem::path& path, const std::vector<TaskData>& tasks) {
  write_file(path, encode_dataset(tasks));
}

std::vector<TaskData> load_dataset(const std::filesystem::path& path) {
  return decode_dataset(read_file(path));
}

}  // namespace ssmcl
