#include "ssmcl/checkpoint.hpp"

#include <limits>
#include <map>

#include "ssmcl/binary_io.hpp"

namespace ssmcl {

namespace {

constexpr std::string_view kCheckpointMagic{"SSMCKPT1", 8};

std::uint32_t checked_u32(std::size_t v) {
  if (v > std::numeric_limits<std::uint32_t>::max()) throw Error("checkpoint field too large");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const std::vector<NamedTensor>& tensors) {
  ByteWriter w;
  w.bytes(kCheckpointMagic);
  w.u32(checked_u32(tensors.size()));
  for (const auto& t : tensors) {
    w.u32(checked_u32(t.name.size()));
    w.bytes(t.name);
    w.u32(checked_u32(static_cast<std::size_t>(t.value.rows())));
    w.u32(checked_u32(static_cast<std::size_t>(t.value.cols())));
    for (Index r = 0; r < t.value.rows(); ++r)
      for (Index c = 0; c < t.value.cols(); ++c) w.f64(t.value(r, c));
  }
  return std::move(w.buffer());
}

std::vector<NamedTensor> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes, "checkpoint");
  r.expect(kCheckpointMagic);
  const std::uint32_t count = r.u32("tensor count");
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const std::uint32_t len = r.u32("name length");
    t.name = r.str(len, "name");
    const std::uint64_t rows = r.u32("rows");
    const std::uint64_t cols = r.u32("cols");
    r.need_product(rows, cols, 8, "tensor payload");
    t.value.resize(static_cast<Index>(rows), static_cast<Index>(cols));
    for (Index rr = 0; rr < t.value.rows(); ++rr)
      for (Index c = 0; c < t.value.cols(); ++c) t.value(rr, c) = r.f64("tensor payload");
    out.push_back(std::move(t));
  }
  if (!r.done()) throw FormatError("checkpoint: trailing bytes", r.offset());
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  write_file(path, encode_checkpoint(tensors));
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

namespace {

Matrix row_of(std::initializer_list<double> values) {
  Matrix m(1, static_cast<Index>(values.size()));
  Index i = 0;
  for (double v : values) m(0, i++) = v;
  return m;
}

}  // namespace

std::vector<NamedTensor> to_tensors(const ModelState& s) {
  std::vector<NamedTensor> out;
  for (std::size_t k = 0; k < s.blocks.size(); ++k) {
    const std::string p = "block" + std::to_string(k) + ".";
    const auto& b = s.blocks[k];
    out.push_back({p + "embed", b.embed});
    out.push_back({p + "A", b.ssm.A});
    out.push_back({p + "W_B", b.ssm.W_B});
    out.push_back({p + "W_C", b.ssm.W_C});
    out.push_back({p + "W_delta", b.ssm.W_delta});
    out.push_back({p + "delta_bias", b.ssm.delta_bias.transpose()});
    out.push_back({p + "W_out", b.W_out});
    if (b.gated()) out.push_back({p + "gate", b.gate});
    out.push_back({p + "input_norm", row_of({b.input_norm ? 1.0 : 0.0})});
  }
  for (std::size_t t = 0; t < s.heads.size(); ++t)
    out.push_back({"head" + std::to_string(t), s.heads[t]});
  for (std::size_t k = 0; k < s.banks.size(); ++k) {
    const std::string p = "bank" + std::to_string(k) + ".";
    const auto& b = s.banks[k];
    out.push_back({p + "q1", b.q1});
    out.push_back({p + "q2", b.q2});
    out.push_back({p + "q3", b.q3});
    out.push_back({p + "q_out", b.q_out});
    out.push_back({p + "rows", row_of({static_cast<double>(b.rows[0]), static_cast<double>(b.rows[1]),
                                       static_cast<double>(b.rows[2]),
                                       static_cast<double>(b.rows[3])})});
  }
  for (std::size_t k = 0; k < s.projectors.size(); ++k) {
    const std::string p = "proj" + std::to_string(k) + ".";
    const auto& h = s.projectors[k];
    out.push_back({p + "h1", h.h1});
    out.push_back({p + "h2", h.h2});
    out.push_back({p + "h3", h.h3});
    out.push_back({p + "h_out", h.h_out});
    const auto& f = h.flags;
    out.push_back({p + "meta", row_of({h.eta, double(f.h1_delta), double(f.h1_c), double(f.h2),
                                       double(f.h3), double(f.h_out)})});
    out.push_back({p + "null_ranks",
                   row_of({double(h.null_ranks[0]), double(h.null_ranks[1]),
                           double(h.null_ranks[2]), double(h.null_ranks[3])})});
  }
  return out;
}

ModelState from_tensors(const std::vector<NamedTensor>& tensors) {
  std::map<std::string, const Matrix*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t.value;
  auto get = [&](const std::string& name) -> const Matrix& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint: missing tensor " + name, 0);
    return *it->second;
  };
  auto has = [&](const std::string& name) { return by_name.count(name) > 0; };
  auto get_row = [&](const std::string& name, Index cols) -> const Matrix& {
    const Matrix& m = get(name);
    if (m.rows() != 1 || m.cols() != cols) {
      throw FormatError("checkpoint: tensor " + name + " should be 1x" + std::to_string(cols), 0);
    }
    return m;
  };

  ModelState s;
  for (std::size_t k = 0; has("block" + std::to_string(k) + ".A"); ++k) {
    const std::string p = "block" + std::to_string(k) + ".";
    MambaBlockParams b;
    b.embed = get(p + "embed");
    b.ssm.A = get(p + "A");
    b.ssm.W_B = get(p + "W_B");
    b.ssm.W_C = get(p + "W_C");
    b.ssm.W_delta = get(p + "W_delta");
    b.ssm.delta_bias = get_row(p + "delta_bias", b.ssm.W_delta.cols()).transpose();
    b.W_out = get(p + "W_out");
    if (has(p + "gate")) b.gate = get(p + "gate");
    b.input_norm = get_row(p + "input_norm", 1)(0, 0) != 0.0;
    s.blocks.push_back(std::move(b));
  }
  for (std::size_t t = 0; has("head" + std::to_string(t)); ++t)
    s.heads.push_back(get("head" + std::to_string(t)));
  for (std::size_t k = 0; has("bank" + std::to_string(k) + ".q1"); ++k) {
    const std::string p = "bank" + std::to_string(k) + ".";
    CovarianceBank b;
    b.q1 = get(p + "q1");
    b.q2 = get(p + "q2");
    b.q3 = get(p + "q3");
    b.q_out = get(p + "q_out");
    const Matrix& rows = get_row(p + "rows", 4);
    for (std::size_t i = 0; i < 4; ++i)
      b.rows[i] = static_cast<std::int64_t>(rows(0, static_cast<Index>(i)));
    s.banks.push_back(std::move(b));
  }
  for (std::size_t k = 0; has("proj" + std::to_string(k) + ".h1"); ++k) {
    const std::string p = "proj" + std::to_string(k) + ".";
    ProjectorSet h;
    h.h1 = get(p + "h1");
    h.h2 = get(p + "h2");
    h.h3 = get(p + "h3");
    h.h_out = get(p + "h_out");
    const Matrix& meta = get_row(p + "meta", 6);
    h.eta = meta(0, 0);
    h.flags = {meta(0, 1) != 0.0, meta(0, 2) != 0.0, meta(0, 3) != 0.0, meta(0, 4) != 0.0,
               meta(0, 5) != 0.0};
    const Matrix& ranks = get_row(p + "null_ranks", 4);
    for (std::size_t i = 0; i < 4; ++i)
      h.null_ranks[i] = static_cast<Index>(ranks(0, static_cast<Index>(i)));
    s.projectors.push_back(std::move(h));
  }
  return s;
}

}  // namespace ssmcl
