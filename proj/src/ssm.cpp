#include "ssmcl/ssm.hpp"

#include "ssmcl/rng.hpp"

namespace ssmcl {

void ModelDims::validate() const {
  if (d_raw < 1 || d_model < 1 || d_state < 1 || seq_len < 1 || n_blocks < 1 || d_out < 1) {
    throw ConfigError("model dimensions must all be >= 1");
  }
  if (d_delta != 1 && d_delta != d_model) {
    throw ConfigError("d_delta must be 1 or d_model (" + std::to_string(d_model) + "), got " +
                      std::to_string(d_delta));
  }
}

void SequenceBatch::validate() const {
  if (seq_len < 1) throw ShapeError("SequenceBatch: seq_len must be >= 1");
  if (x.rows() != size() * seq_len) {
    throw ShapeError("SequenceBatch: " + std::to_string(x.rows()) + " rows for " +
                     std::to_string(size()) + " samples of length " + std::to_string(seq_len));
  }
}

SequenceBatch SequenceBatch::gather(const std::vector<Index>& samples) const {
  SequenceBatch out;
  out.seq_len = seq_len;
  out.x.resize(static_cast<Index>(samples.size()) * seq_len, x.cols());
  out.labels.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    out.sample(static_cast<Index>(i)) = sample(samples[i]);
    out.labels.push_back(labels[static_cast<std::size_t>(samples[i])]);
  }
  return out;
}

double default_delta_bias() {
  // softplus^{-1}(0.055)
  return std::log(std::expm1(0.055));
}

namespace {

Matrix uniform_matrix(CounterRng& rng, Index rows, Index cols, double bound) {
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = rng.uniform(-bound, bound);
  return m;
}

}  // namespace

MambaBlockParams init_block(const ModelDims& dims, Index block, std::uint64_t seed) {
  dims.validate();
  const Index d_in = dims.block_input_width(block);
  const Index d = dims.d_model;
  CounterRng rng(seed, 0x10000 + static_cast<std::uint64_t>(block));

  MambaBlockParams p;
  // Variance-preserving frozen embedding.
  p.embed = uniform_matrix(rng, d_in, d, std::sqrt(3.0 / static_cast<double>(d_in)));
  p.ssm.A.resize(d, dims.d_state);
  for (Index n = 0; n < dims.d_state; ++n) p.ssm.A.col(n).setConstant(-static_cast<double>(n + 1));
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  p.ssm.W_B = uniform_matrix(rng, d, dims.d_state, bound);
  p.ssm.W_C = uniform_matrix(rng, d, dims.d_state, bound);
  p.ssm.W_delta = uniform_matrix(rng, d, dims.d_delta, bound);
  p.ssm.delta_bias = Vector::Constant(dims.d_delta, default_delta_bias());
  p.W_out = uniform_matrix(rng, d, dims.d_out, std::sqrt(3.0 / static_cast<double>(d)));
  p.input_norm = dims.input_norm;
  if (dims.gate) p.gate = uniform_matrix(rng, d_in, d, std::sqrt(3.0 / static_cast<double>(d_in)));
  return p;
}

Backbone init_backbone(const ModelDims& dims, std::uint64_t seed) {
  Backbone blocks;
  for (Index k = 0; k < dims.n_blocks; ++k) blocks.push_back(init_block(dims, k, seed));
  return blocks;
}

Bcd compute_bcd(const Matrix& x_emb, const SsmParams& p) {
  if (x_emb.cols() != p.W_B.rows() || x_emb.cols() != p.W_C.rows() ||
      x_emb.cols() != p.W_delta.rows()) {
    throw ShapeError("compute_bcd: tokens " + shape_str(x_emb) + " do not match W_B " +
                     shape_str(p.W_B) + ", W_C " + shape_str(p.W_C) + ", W_delta " +
                     shape_str(p.W_delta));
  }
  if (p.delta_bias.size() != p.W_delta.cols()) {
    throw ShapeError("compute_bcd: delta_bias length does not match W_delta columns");
  }
  Bcd out;
  out.b = x_emb * p.W_B;
  out.c = x_emb * p.W_C;
  Matrix pre = (x_emb * p.W_delta).rowwise() + p.delta_bias.transpose();
  out.delta = pre.unaryExpr([](double z) { return softplus(z); });
  return out;
}

Discretized discretize(const Matrix& delta, const Matrix& a, const Matrix& b) {
  const Index rows = delta.rows();
  const Index d = a.rows();
  const Index n = a.cols();
  if (b.rows() != rows || b.cols() != n) {
    throw ShapeError("discretize: B is " + shape_str(b) + ", expected " + shape_str(rows, n));
  }
  if (delta.cols() != 1 && delta.cols() != d) {
    throw ShapeError("discretize: delta has " + std::to_string(delta.cols()) +
                     " columns, expected 1 or " + std::to_string(d));
  }
  if ((delta.array() <= 0.0).any()) throw DomainError("discretize: step size must be positive");

  const bool per_channel = delta.cols() == d;
  Discretized out{Tensor(rows, d, n), Tensor(rows, d, n)};
  for (Index l = 0; l < rows; ++l) {
    for (Index ch = 0; ch < d; ++ch) {
      const double dt = delta(l, per_channel ? ch : 0);
      for (Index s = 0; s < n; ++s) {
        const double z = dt * a(ch, s);
        out.abar(l, ch, s) = std::exp(z);
        out.bbar(l, ch, s) = zoh_phi(z) * dt * b(l, s);
      }
    }
  }
  return out;
}

namespace {

void check_scan_shapes(const Matrix& x, const Tensor& abar, const Tensor& bbar, const Matrix& c) {
  const Index rows = x.rows();
  const Index d = x.cols();
  const Index n = c.cols();
  auto conforms = [&](const Tensor& t) {
    return t.dim0() == rows && t.dim1() == d && t.dim2() == n;
  };
  if (c.rows() != rows || !conforms(abar) || !conforms(bbar)) {
    throw ShapeError("selective_scan: inconsistent shapes (x " + shape_str(x) + ", C " +
                     shape_str(c) + ")");
  }
}

Matrix scan_impl(const Matrix& x, const Tensor& abar, const Tensor& bbar, const Matrix& c,
                 Index seq_len, Tensor* states) {
  const Index rows = x.rows();
  const Index d = x.cols();
  const Index n = c.cols();
  Matrix y = Matrix::Zero(rows, d);
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> h(d, n);
  for (Index r = 0; r < rows; ++r) {
    if (r % seq_len == 0) h.setZero();
    const auto a_r = abar.slice(r);
    const auto b_r = bbar.slice(r);
    for (Index ch = 0; ch < d; ++ch) {
      const double xv = x(r, ch);
      double acc = 0.0;
      for (Index s = 0; s < n; ++s) {
        const double hv = a_r(ch, s) * h(ch, s) + b_r(ch, s) * xv;
        h(ch, s) = hv;
        acc += c(r, s) * hv;
      }
      y(r, ch) = acc;
    }
    if (states) states->slice(r) = h;
  }
  return y;
}

}  // namespace

Matrix selective_scan(const Matrix& x_emb, const Tensor& abar, const Tensor& bbar, const Matrix& c,
                      Index seq_len) {
  check_scan_shapes(x_emb, abar, bbar, c);
  if (seq_len < 1) throw ShapeError("selective_scan: seq_len must be >= 1");
  if (x_emb.rows() % seq_len != 0) {
    throw ShapeError("selective_scan: row count is not a multiple of seq_len");
  }
  return scan_impl(x_emb, abar, bbar, c, seq_len, nullptr);
}

Matrix selective_scan(const Matrix& x_emb, const Tensor& abar, const Tensor& bbar,
                      const Matrix& c) {
  check_scan_shapes(x_emb, abar, bbar, c);
  return scan_impl(x_emb, abar, bbar, c, std::max<Index>(x_emb.rows(), 1), nullptr);
}

Matrix build_lti_kernel(const Tensor& abar0, const Tensor& bbar0, const Matrix& c0, Index k_len) {
  const Index d = abar0.dim1();
  const Index n = abar0.dim2();
  if (abar0.dim0() != 1 || bbar0.dim0() != 1 || bbar0.dim1() != d || bbar0.dim2() != n ||
      c0.rows() != 1 || c0.cols() != n) {
    throw ShapeError("build_lti_kernel: expected single-token slices 1xDxN and C of 1xN");
  }
  Matrix kernel = Matrix::Zero(std::max<Index>(k_len, 0), d);
  for (Index ch = 0; ch < d; ++ch) {
    for (Index s = 0; s < n; ++s) {
      double power = 1.0;
      for (Index k = 0; k < k_len; ++k) {
        kernel(k, ch) += c0(0, s) * power * bbar0(0, ch, s);
        power *= abar0(0, ch, s);
      }
    }
  }
  return kernel;
}

Matrix causal_convolution(const Matrix& x, const Matrix& kernel) {
  if (kernel.cols() != x.cols()) throw ShapeError("causal_convolution: channel mismatch");
  Matrix y = Matrix::Zero(x.rows(), x.cols());
  for (Index l = 0; l < x.rows(); ++l)
    for (Index k = 0; k <= l && k < kernel.rows(); ++k)
      y.row(l) += kernel.row(k).cwiseProduct(x.row(l - k));
  return y;
}

BlockTrace trace_block(const Matrix& x_in, Index seq_len, const MambaBlockParams& block) {
  if (x_in.cols() != block.embed.rows()) {
    throw ShapeError("mamba_block_forward: input width " + std::to_string(x_in.cols()) +
                     " does not match embedding " + shape_str(block.embed));
  }
  if (block.W_out.rows() != block.ssm.d_model() || block.embed.cols() != block.ssm.d_model()) {
    throw ShapeError("mamba_block_forward: block parameter shapes are inconsistent");
  }
  if (seq_len < 1 || x_in.rows() % seq_len != 0) {
    throw ShapeError("mamba_block_forward: row count is not a multiple of seq_len");
  }
  BlockTrace t;
  t.seq_len = seq_len;
  t.x_in = x_in;
  if (block.input_norm) {
    t.rms = (x_in.rowwise().squaredNorm() / static_cast<double>(x_in.cols())).array() + kRmsEps;
    t.rms = t.rms.cwiseSqrt();
    t.x_norm = x_in.array().colwise() / t.rms.array();
  } else {
    t.x_norm = x_in;
  }
  t.x = t.x_norm * block.embed;
  t.b = t.x * block.ssm.W_B;
  t.c = t.x * block.ssm.W_C;
  t.delta_pre = (t.x * block.ssm.W_delta).rowwise() + block.ssm.delta_bias.transpose();
  t.delta = t.delta_pre.unaryExpr([](double z) { return softplus(z); });
  auto disc = discretize(t.delta, block.ssm.A, t.b);
  t.abar = std::move(disc.abar);
  t.bbar = std::move(disc.bbar);
  t.h = Tensor(t.x.rows(), t.x.cols(), block.ssm.d_state());
  t.scan = scan_impl(t.x, t.abar, t.bbar, t.c, seq_len, &t.h);
  if (block.gated()) {
    t.gate_pre = t.x_norm * block.gate;
    t.u = t.scan.cwiseProduct(t.gate_pre.unaryExpr([](double z) { return silu(z); }));
  } else {
    t.u = t.scan;
  }
  t.y = t.u * block.W_out;
  return t;
}

namespace {

Matrix delta_times_x(const Matrix& delta, const Matrix& x) {
  if (delta.cols() == x.cols()) return delta.cwiseProduct(x);
  return x.array().colwise() * delta.col(0).array();
}

}  // namespace

BlockOutput mamba_block_forward(const Matrix& x_in, Index seq_len, const MambaBlockParams& block,
                                bool capture) {
  BlockTrace t = trace_block(x_in, seq_len, block);
  BlockOutput out;
  if (capture) {
    FeatureCapture f;
    f.deltax_feats = delta_times_x(t.delta, t.x);
    f.x_feats = std::move(t.x);
    f.delta_feats = std::move(t.delta);
    f.y_feats = std::move(t.u);
    out.features = std::move(f);
  }
  out.y = std::move(t.y);
  return out;
}

BlockOutput mamba_block_forward(const SequenceBatch& batch, const MambaBlockParams& block,
                                bool capture) {
  batch.validate();
  return mamba_block_forward(batch.x, batch.seq_len, block, capture);
}

Matrix backbone_forward(const SequenceBatch& batch, const Backbone& blocks) {
  batch.validate();
  Matrix h = batch.x;
  for (const auto& block : blocks) h = mamba_block_forward(h, batch.seq_len, block, false).y;
  return h;
}

std::vector<BlockOutput> backbone_forward_capture(const SequenceBatch& batch,
                                                  const Backbone& blocks) {
  batch.validate();
  std::vector<BlockOutput> outs;
  outs.reserve(blocks.size());
  const Matrix* input = &batch.x;
  for (const auto& block : blocks) {
    outs.push_back(mamba_block_forward(*input, batch.seq_len, block, true));
    input = &outs.back().y;
  }
  return outs;
}

Matrix mean_pool(const Matrix& tokens, Index seq_len) {
  const Index m = tokens.rows() / seq_len;
  Matrix pooled(m, tokens.cols());
  for (Index i = 0; i < m; ++i)
    pooled.row(i) = tokens.middleRows(i * seq_len, seq_len).colwise().mean();
  return pooled;
}

Matrix concat_heads(const std::vector<Matrix>& heads) {
  if (heads.empty()) throw ConfigError("model_forward: at least one classifier head is required");
  Index width = 0;
  for (const auto& h : heads) {
    if (h.rows() != heads.front().rows()) throw ShapeError("heads have different input widths");
    width += h.cols();
  }
  Matrix cat(heads.front().rows(), width);
  Index col = 0;
  for (const auto& h : heads) {
    cat.middleCols(col, h.cols()) = h;
    col += h.cols();
  }
  return cat;
}

Matrix model_forward(const SequenceBatch& batch, const Backbone& blocks,
                     const std::vector<Matrix>& heads) {
  const Matrix cat = concat_heads(heads);
  const Matrix pooled = mean_pool(backbone_forward(batch, blocks), batch.seq_len);
  return matmul(pooled, cat);
}

}  // namespace ssmcl
