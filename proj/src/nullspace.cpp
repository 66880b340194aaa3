#include "ssmcl/nullspace.hpp"

namespace ssmcl {

CovarianceBank CovarianceBank::zeros(Index d_model, Index d_delta) {
  CovarianceBank bank;
  bank.q1 = Matrix::Zero(d_model, d_model);
  bank.q2 = Matrix::Zero(d_delta, d_delta);
  bank.q3 = Matrix::Zero(d_model, d_model);
  bank.q_out = Matrix::Zero(d_model, d_model);
  return bank;
}

CovarianceBank& accumulate(CovarianceBank& bank, const FeatureCapture& f) {
  auto add = [](Matrix& q, const Matrix& rows, std::int64_t& count, const char* name) {
    if (rows.cols() != q.cols()) {
      throw ShapeError(std::string("accumulate: ") + name + " features have width " +
                       std::to_string(rows.cols()) + ", bank expects " +
                       std::to_string(q.cols()));
    }
    q += gram(rows);
    count += rows.rows();
  };
  const Index n = f.x_feats.rows();
  if (f.delta_feats.rows() != n || f.deltax_feats.rows() != n || f.y_feats.rows() != n) {
    throw ShapeError("accumulate: feature blocks have different row counts");
  }
  add(bank.q1, f.x_feats, bank.rows[0], "X");
  add(bank.q2, f.delta_feats, bank.rows[1], "delta");
  add(bank.q3, f.deltax_feats, bank.rows[2], "delta*X");
  add(bank.q_out, f.y_feats, bank.rows[3], "W_out input");
  return bank;
}

namespace {

struct FlagName {
  const char* name;
  bool ProjectorFlags::*member;
};

constexpr FlagName kFlagNames[] = {
    {"H1delta", &ProjectorFlags::h1_delta},
    {"H1C", &ProjectorFlags::h1_c},
    {"H2", &ProjectorFlags::h2},
    {"H3", &ProjectorFlags::h3},
    {"Hout", &ProjectorFlags::h_out},
};

Index exact_null_rank(const Vector& eigvals, double tolerance) {
  const double top = eigvals.size() ? std::max(eigvals.maxCoeff(), 0.0) : 0.0;
  return (eigvals.array() <= tolerance * top).count();
}

}  // namespace

ProjectorFlags ProjectorFlags::parse(const std::vector<std::string>& names) {
  ProjectorFlags flags = none();
  for (const auto& raw : names) {
    if (raw == "all") {
      flags = all();
      continue;
    }
    if (raw == "none" || raw.empty()) continue;
    bool found = false;
    for (const auto& f : kFlagNames) {
      if (raw == f.name) {
        flags.*f.member = true;
        found = true;
      }
    }
    if (!found) throw ConfigError("unknown projector flag '" + raw + "'");
  }
  return flags;
}

std::vector<std::string> ProjectorFlags::names() const {
  std::vector<std::string> out;
  for (const auto& f : kFlagNames)
    if (this->*f.member) out.emplace_back(f.name);
  return out;
}

std::string ProjectorFlags::label() const {
  std::string out;
  for (const auto& n : names()) out += (out.empty() ? "" : "+") + n;
  return out.empty() ? "none" : out;
}

Index select_null_rank(const Vector& eigvals, const NullRankOptions& opts) {
  const Vector lam = eigvals.cwiseMax(0.0);
  const Index j_total = lam.size();
  const double top = j_total ? lam.maxCoeff() : 0.0;
  const Index exact = exact_null_rank(lam, opts.exact_tolerance);
  if (j_total < 3 || top == 0.0 || exact > 0) return exact;

  // One-based j in [2, J-1] is zero-based i = j-1 in [1, J-2].
  Index corner = 1;
  double best = lam(0) - 2.0 * lam(1) + lam(2);
  for (Index i = 2; i + 1 < j_total; ++i) {
    const double curvature = lam(i - 1) - 2.0 * lam(i) + lam(i + 1);
    if (curvature > best) {
      best = curvature;
      corner = i;
    }
  }
  const Index rank = j_total - (corner + 1);
  if (opts.safety_cap && lam(j_total - rank) > opts.cap_ratio * top) return exact;
  return rank;
}

NullBasis null_basis(const Matrix& q, const NullRankOptions& opts) {
  const auto eig = sym_eigh(q);
  const Index rank = select_null_rank(eig.values, opts);
  return {eig.vectors.rightCols(rank), eig.values};
}

namespace {

Matrix relax(const Matrix& basis, Index dim, double eta) {
  return eta * (basis * basis.transpose()) + (1.0 - eta) * Matrix::Identity(dim, dim);
}

void check_eta(double eta) {
  if (!(eta >= 0.0 && eta <= 1.0)) throw ConfigError("eta must lie in [0, 1]");
}

}  // namespace

Matrix build_projector(const Matrix& q, double eta, const NullRankOptions& opts) {
  check_eta(eta);
  return relax(null_basis(q, opts).basis, q.rows(), eta);
}

ProjectorSet build_projectors(const CovarianceBank& bank, double eta, const ProjectorFlags& flags,
                              const NullRankOptions& opts) {
  check_eta(eta);
  ProjectorSet set;
  set.eta = eta;
  set.flags = flags;
  const Matrix* qs[] = {&bank.q1, &bank.q2, &bank.q3, &bank.q_out};
  Matrix* hs[] = {&set.h1, &set.h2, &set.h3, &set.h_out};
  for (std::size_t i = 0; i < 4; ++i) {
    NullBasis nb = null_basis(*qs[i], opts);
    set.null_ranks[i] = nb.basis.cols();
    *hs[i] = relax(nb.basis, qs[i]->rows(), eta);
  }
  return set;
}

namespace {

void apply(const Matrix& h, Matrix& g, const char* projector, const char* param) {
  if (h.cols() != g.rows() || h.rows() != h.cols()) {
    throw ConfigError(std::string("projector ") + projector + " is " + shape_str(h) +
                      " but the " + param + " gradient is " + shape_str(g) +
                      (std::string(projector) == "H2" ? " (H2 requires d_delta == d_model)" : ""));
  }
  g = h * g;
}

}  // namespace

BlockGradients project_gradients(const ProjectorSet& projs, const BlockGradients& grads) {
  BlockGradients out = grads;
  const auto& f = projs.flags;
  if (f.h1_delta) apply(projs.h1, out.W_delta, "H1", "W_delta");
  if (f.h1_c) apply(projs.h1, out.W_C, "H1", "W_C");
  if (f.h2) apply(projs.h2, out.A, "H2", "A");
  if (f.h3) apply(projs.h3, out.W_B, "H3", "W_B");
  if (f.h_out) apply(projs.h_out, out.W_out, "Hout", "W_out");
  return out;
}

Gradients project_gradients(const std::vector<ProjectorSet>& projs, const Gradients& grads) {
  if (projs.size() != grads.blocks.size()) {
    throw ConfigError("project_gradients: " + std::to_string(projs.size()) +
                      " projector sets for " + std::to_string(grads.blocks.size()) + " blocks");
  }
  Gradients out;
  out.heads = grads.heads;
  for (std::size_t k = 0; k < projs.size(); ++k)
    out.blocks.push_back(project_gradients(projs[k], grads.blocks[k]));
  return out;
}

}  // namespace ssmcl
