#include "ssmcl/grad.hpp"

#include <algorithm>

#include "ssmcl/rng.hpp"

namespace ssmcl {

BlockGradients BlockGradients::zeros_like(const MambaBlockParams& block) {
  const auto& p = block.ssm;
  return {Matrix::Zero(p.A.rows(), p.A.cols()),
          Matrix::Zero(p.W_B.rows(), p.W_B.cols()),
          Matrix::Zero(p.W_C.rows(), p.W_C.cols()),
          Matrix::Zero(p.W_delta.rows(), p.W_delta.cols()),
          Vector::Zero(p.delta_bias.size()),
          Matrix::Zero(block.W_out.rows(), block.W_out.cols())};
}

Gradients Gradients::zeros_like(const Backbone& blocks, const std::vector<Matrix>& heads) {
  Gradients g;
  for (const auto& b : blocks) g.blocks.push_back(BlockGradients::zeros_like(b));
  for (const auto& h : heads) g.heads.push_back(Matrix::Zero(h.rows(), h.cols()));
  return g;
}

std::string ParamId::name() const {
  const std::string k = std::to_string(index);
  switch (kind) {
    case ParamKind::A: return "block" + k + ".A";
    case ParamKind::W_B: return "block" + k + ".W_B";
    case ParamKind::W_C: return "block" + k + ".W_C";
    case ParamKind::W_delta: return "block" + k + ".W_delta";
    case ParamKind::delta_bias: return "block" + k + ".delta_bias";
    case ParamKind::W_out: return "block" + k + ".W_out";
    case ParamKind::head: return "head" + k;
  }
  return "?";
}

namespace {

void check_targets(Index rows, Index classes, std::span<const int> targets) {
  if (static_cast<Index>(targets.size()) != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " labels for " +
                     std::to_string(rows) + " rows");
  }
  for (int t : targets) {
    if (t < 0 || t >= classes) {
      throw DomainError("cross_entropy: label " + std::to_string(t) + " outside [0, " +
                        std::to_string(classes) + ")");
    }
  }
}

// Row-wise softmax.
Matrix softmax_rows(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    p.row(i) = (logits.row(i).array() - mx).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

}  // namespace

double cross_entropy(const Matrix& logits, std::span<const int> targets) {
  check_targets(logits.rows(), logits.cols(), targets);
  if (logits.rows() == 0) throw DomainError("cross_entropy: empty batch");
  double total = 0.0;
  for (Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    const double lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
    total += lse - logits(i, targets[static_cast<std::size_t>(i)]);
  }
  return total / static_cast<double>(logits.rows());
}

BlockBackward block_backward(const BlockTrace& t, const MambaBlockParams& block,
                             const Matrix& d_output, bool want_input_grad) {
  const auto& p = block.ssm;
  const Index rows = t.x.rows();
  const Index d = p.d_model();
  const Index n = p.d_state();
  const Index seq_len = t.seq_len;
  const bool per_channel = p.d_delta() == d;

  BlockBackward out;
  BlockGradients& g = out.grads;
  g = BlockGradients::zeros_like(block);
  g.W_out = t.u.transpose() * d_output;
  const Matrix d_u = d_output * block.W_out.transpose();

  Matrix d_scan;
  if (want_input_grad) out.d_input = Matrix::Zero(t.x_norm.rows(), t.x_norm.cols());
  if (block.gated()) {
    const Matrix gate = t.gate_pre.unaryExpr([](double z) { return silu(z); });
    d_scan = d_u.cwiseProduct(gate);
    if (want_input_grad) {
      const Matrix d_gate_pre = d_u.cwiseProduct(t.scan).cwiseProduct(t.gate_pre.unaryExpr(
          [](double z) { return sigmoid(z) * (1.0 + z * (1.0 - sigmoid(z))); }));
      out.d_input += d_gate_pre * block.gate.transpose();
    }
  } else {
    d_scan = d_u;
  }

  Matrix d_x = Matrix::Zero(rows, d);
  Matrix d_b = Matrix::Zero(rows, n);
  Matrix d_c = Matrix::Zero(rows, n);
  Matrix d_delta = Matrix::Zero(rows, p.d_delta());
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> carry(d, n);

  for (Index r = rows - 1; r >= 0; --r) {
    if ((r + 1) % seq_len == 0) carry.setZero();
    const bool first = r % seq_len == 0;
    for (Index ch = 0; ch < d; ++ch) {
      const Index dc = per_channel ? ch : 0;
      const double dt = t.delta(r, dc);
      const double ds = d_scan(r, ch);
      const double xv = t.x(r, ch);
      double dx_acc = 0.0;
      double ddt_acc = 0.0;
      for (Index s = 0; s < n; ++s) {
        const double hv = t.h(r, ch, s);
        d_c(r, s) += ds * hv;
        const double gh = carry(ch, s) + ds * t.c(r, s);
        const double h_prev = first ? 0.0 : t.h(r - 1, ch, s);
        const double abar = t.abar(r, ch, s);
        const double d_abar = gh * h_prev;
        const double d_bbar = gh * xv;
        dx_acc += gh * t.bbar(r, ch, s);
        carry(ch, s) = gh * abar;

        const double a = p.A(ch, s);
        const double z = dt * a;
        const auto [phi, dphi] = zoh_phi_with_derivative(z, abar);
        const double bv = t.b(r, s);
        const double dz = d_abar * abar + d_bbar * dphi * dt * bv;
        ddt_acc += d_bbar * phi * bv + dz * a;
        d_b(r, s) += d_bbar * phi * dt;
        g.A(ch, s) += dz * dt;
      }
      d_x(r, ch) += dx_acc;
      d_delta(r, dc) += ddt_acc;
    }
  }

  const Matrix d_pre =
      d_delta.cwiseProduct(t.delta_pre.unaryExpr([](double z) { return sigmoid(z); }));
  g.W_delta = t.x.transpose() * d_pre;
  g.delta_bias = d_pre.colwise().sum().transpose();
  g.W_B = t.x.transpose() * d_b;
  g.W_C = t.x.transpose() * d_c;
  if (want_input_grad) {
    d_x += d_pre * p.W_delta.transpose();
    d_x += d_b * p.W_B.transpose();
    d_x += d_c * p.W_C.transpose();
    out.d_input += d_x * block.embed.transpose();
    if (block.input_norm) {
      // d x_j = (g_j - xhat_j * mean_i(g_i xhat_i)) / rms
      const Vector proj = t.x_norm.cwiseProduct(out.d_input).rowwise().sum() /
                          static_cast<double>(t.x_norm.cols());
      out.d_input = (out.d_input.array() - t.x_norm.array().colwise() * proj.array()).matrix();
      out.d_input = out.d_input.array().colwise() / t.rms.array();
    }
  }
  return out;
}

LossAndGradients backward(const SequenceBatch& batch, const Backbone& blocks,
                          const std::vector<Matrix>& heads, std::span<const int> targets) {
  batch.validate();
  const Matrix cat = concat_heads(heads);
  const Index m = batch.size();
  const Index seq_len = batch.seq_len;
  check_targets(m, cat.cols(), targets);
  if (m == 0) throw DomainError("backward: empty batch");

  std::vector<BlockTrace> traces;
  traces.reserve(blocks.size());
  const Matrix* input = &batch.x;
  for (const auto& block : blocks) {
    traces.push_back(trace_block(*input, seq_len, block));
    input = &traces.back().y;
  }
  const Matrix pooled = mean_pool(*input, seq_len);
  const Matrix logits = matmul(pooled, cat);

  LossAndGradients out;
  out.loss = cross_entropy(logits, targets);

  Matrix d_logits = softmax_rows(logits);
  for (Index i = 0; i < m; ++i) d_logits(i, targets[static_cast<std::size_t>(i)]) -= 1.0;
  d_logits /= static_cast<double>(m);

  const Matrix d_cat = pooled.transpose() * d_logits;
  Index col = 0;
  for (const auto& h : heads) {
    out.grads.heads.push_back(d_cat.middleCols(col, h.cols()));
    col += h.cols();
  }

  const Matrix d_pooled = d_logits * cat.transpose();
  Matrix d_y(m * seq_len, d_pooled.cols());
  for (Index i = 0; i < m; ++i)
    d_y.middleRows(i * seq_len, seq_len).rowwise() =
        d_pooled.row(i) / static_cast<double>(seq_len);

  out.grads.blocks.resize(blocks.size());
  for (std::size_t k = blocks.size(); k-- > 0;) {
    BlockBackward bb = block_backward(traces[k], blocks[k], d_y, k > 0);
    out.grads.blocks[k] = std::move(bb.grads);
    if (k > 0) d_y = std::move(bb.d_input);
  }
  return out;
}

LossAndGradients backward(const SequenceBatch& batch, const Backbone& blocks,
                          const std::vector<Matrix>& heads) {
  return backward(batch, blocks, heads, batch.labels);
}

double central_difference(const std::function<double(double)>& f, double x, double h) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

Gradients finite_diff(const SequenceBatch& batch, const Backbone& blocks,
                      const std::vector<Matrix>& heads, std::span<const int> targets,
                      const ParamSelector& select, double step) {
  if (!(step > 0.0)) throw DomainError("finite_diff: step must be positive");
  Backbone work_blocks = blocks;
  std::vector<Matrix> work_heads = heads;
  auto loss_at = [&] {
    return cross_entropy(model_forward(batch, work_blocks, work_heads), targets);
  };

  Gradients estimate = Gradients::zeros_like(blocks, heads);

  auto probe = [&](const ParamId& id, auto& param, auto& slot) {
    if (!select(id)) return;
    for (Index i = 0; i < param.size(); ++i) {
      const double saved = param.data()[i];
      param.data()[i] = saved + step;
      const double up = loss_at();
      param.data()[i] = saved - step;
      const double down = loss_at();
      param.data()[i] = saved;
      slot.data()[i] = (up - down) / (2.0 * step);
    }
  };

  for (std::size_t k = 0; k < work_blocks.size(); ++k) {
    auto& p = work_blocks[k];
    auto& e = estimate.blocks[k];
    const auto idx = static_cast<Index>(k);
    probe(ParamId{ParamKind::A, idx}, p.ssm.A, e.A);
    probe(ParamId{ParamKind::W_B, idx}, p.ssm.W_B, e.W_B);
    probe(ParamId{ParamKind::W_C, idx}, p.ssm.W_C, e.W_C);
    probe(ParamId{ParamKind::W_delta, idx}, p.ssm.W_delta, e.W_delta);
    probe(ParamId{ParamKind::delta_bias, idx}, p.ssm.delta_bias, e.delta_bias);
    probe(ParamId{ParamKind::W_out, idx}, p.W_out, e.W_out);
  }
  for (std::size_t t = 0; t < work_heads.size(); ++t)
    probe(ParamId{ParamKind::head, static_cast<Index>(t)}, work_heads[t], estimate.heads[t]);
  return estimate;
}

double relative_error(const Eigen::Ref<const Matrix>& a, const Eigen::Ref<const Matrix>& b) {
  const double denom = std::max({a.norm(), b.norm(), 1e-7});
  return (a - b).norm() / denom;
}

namespace {

struct CheckProblem {
  SequenceBatch batch;
  Backbone blocks;
  std::vector<Matrix> heads;
};

CheckProblem make_check_problem(const GradCheckConfig& cfg, std::uint64_t seed) {
  ModelDims dims;
  dims.d_raw = cfg.d_raw;
  dims.d_model = cfg.d_model;
  dims.d_state = cfg.d_state;
  dims.d_delta = cfg.d_delta == 0 ? cfg.d_model : cfg.d_delta;
  dims.seq_len = cfg.seq_len;
  dims.n_blocks = cfg.n_blocks;
  dims.d_out = cfg.d_out;
  dims.gate = cfg.gate;
  dims.validate();

  CheckProblem prob;
  prob.blocks = init_backbone(dims, seed);
  CounterRng rng(seed, 0xC0FFEE);
  // Move away from the symmetric initialization so every path carries signal.
  for (auto& b : prob.blocks) {
    b.ssm.A = -(Matrix::NullaryExpr(b.ssm.A.rows(), b.ssm.A.cols(),
                                    [&] { return rng.uniform(0.2, 2.0); }));
    b.ssm.delta_bias =
        Vector::NullaryExpr(b.ssm.delta_bias.size(), [&] { return rng.uniform(-1.0, 0.5); });
    b.ssm.W_delta *= 2.0;
    b.W_out = Matrix::NullaryExpr(b.W_out.rows(), b.W_out.cols(), [&] { return rng.normal(); });
  }
  // Two heads exercise the concatenation path.
  const Index first = std::max<Index>(1, cfg.classes / 2);
  prob.heads.push_back(
      Matrix::NullaryExpr(cfg.d_out, first, [&] { return rng.normal(); }));
  prob.heads.push_back(
      Matrix::NullaryExpr(cfg.d_out, cfg.classes - first + 1, [&] { return rng.normal(); }));
  const int classes = static_cast<int>(prob.heads[0].cols() + prob.heads[1].cols());

  prob.batch.seq_len = cfg.seq_len;
  prob.batch.x = Matrix::NullaryExpr(cfg.batch * cfg.seq_len, cfg.d_raw,
                                     [&] { return rng.normal(); });
  for (Index i = 0; i < cfg.batch; ++i)
    prob.batch.labels.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(classes))));
  return prob;
}

}  // namespace

GradCheckReport run_grad_check(const GradCheckConfig& cfg) {
  if (cfg.seeds.empty()) throw ConfigError("grad check: no seeds");
  GradCheckReport report;
  report.max_rel_error = 0.0;
  for (std::uint64_t seed : cfg.seeds) {
    CheckProblem prob = make_check_problem(cfg, seed);
    LossAndGradients analytic = backward(prob.batch, prob.blocks, prob.heads);
    if (cfg.inject_sign_flip) analytic.grads.blocks.front().W_C *= -1.0;
    const Gradients numeric = finite_diff(prob.batch, prob.blocks, prob.heads, prob.batch.labels,
                                          [](const ParamId&) { return true; }, cfg.step);

    struct Pair {
      ParamId id;
      Matrix analytic;
    };
    std::vector<Pair> pairs;
    for_each_tensor(analytic.grads,
                    [&](const ParamId& id, const auto& t) { pairs.push_back({id, t}); });
    std::size_t i = 0;
    for_each_tensor(numeric, [&](const ParamId& id, const auto& t) {
      const double err = relative_error(pairs[i].analytic, Matrix(t));
      ++i;
      report.entries.push_back({seed, id.name(), err});
      if (!(err <= report.max_rel_error)) {
        report.max_rel_error = err;
        report.worst = "seed " + std::to_string(seed) + " " + id.name();
      }
    });
  }
  report.passed = report.max_rel_error <= cfg.tolerance;
  return report;
}

}  // namespace ssmcl
