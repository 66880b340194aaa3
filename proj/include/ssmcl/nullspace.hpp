#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "ssmcl/grad.hpp"
#include "ssmcl/ssm.hpp"

namespace ssmcl {

/// Uncentered feature covariances accumulated over every consolidated task.
struct CovarianceBank {
  Matrix q1;     // from X, D x D
  Matrix q2;     // from delta, d_delta x d_delta
  Matrix q3;     // from delta (.) X, D x D
  Matrix q_out;  // from the W_out input, D x D
  std::array<std::int64_t, 4> rows{};  // feature rows folded into q1, q2, q3, q_out

  static CovarianceBank zeros(Index d_model, Index d_delta);
};

/// Adds the Gram matrix of each captured feature block. Never resets.
CovarianceBank& accumulate(CovarianceBank& bank, const FeatureCapture& features);

/// Which gradients get projected. Disabled entries pass through untouched.
struct ProjectorFlags {
  bool h1_delta = true;  // W_delta by H1
  bool h1_c = true;      // W_C by H1
  bool h2 = true;        // A by H2
  bool h3 = true;        // W_B by H3
  bool h_out = true;     // W_out by H_out

  static ProjectorFlags all() { return {}; }
  static ProjectorFlags none() { return {false, false, false, false, false}; }
  bool any() const { return h1_delta || h1_c || h2 || h3 || h_out; }

  /// Names: H1delta, H1C, H2, H3, Hout; "all" and "none" are accepted too.
  static ProjectorFlags parse(const std::vector<std::string>& names);
  std::vector<std::string> names() const;
  std::string label() const;  // "+"-joined names, or "none"

  friend bool operator==(const ProjectorFlags&, const ProjectorFlags&) = default;
};

struct NullRankOptions {
  double exact_tolerance = 1e-12;  // relative to the largest eigenvalue
  bool safety_cap = false;
  double cap_ratio = 1e-3;
};

/// Number of trailing eigenvalues treated as zero.
///
/// Uses the L-shape corner rule R = J - argmax_j (l[j-1] - 2 l[j] + l[j+1]),
/// j in [2, J-1] one-based, ties to the smallest j. Falls back to counting
/// eigenvalues <= exact_tolerance * l_max when J < 3, the spectrum is zero,
/// or it already contains numerically zero eigenvalues.
Index select_null_rank(const Vector& eigvals, const NullRankOptions& opts = {});

struct NullBasis {
  Matrix basis;  // columns span the selected null space
  Vector eigvals;
};

NullBasis null_basis(const Matrix& q, const NullRankOptions& opts = {});

/// eta * U0 U0^T + (1 - eta) I with U0 the null basis of q.
Matrix build_projector(const Matrix& q, double eta, const NullRankOptions& opts = {});

struct ProjectorSet {
  Matrix h1;     // D x D
  Matrix h2;     // d_delta x d_delta
  Matrix h3;     // D x D
  Matrix h_out;  // D x D
  double eta = 1.0;
  ProjectorFlags flags;
  std::array<Index, 4> null_ranks{};  // for h1, h2, h3, h_out
};

ProjectorSet build_projectors(const CovarianceBank& bank, double eta, const ProjectorFlags& flags,
                              const NullRankOptions& opts = {});

/// Left-multiplies each enabled projector into its gradient; bias is untouched.
BlockGradients project_gradients(const ProjectorSet& projs, const BlockGradients& grads);

/// Per-block projection; heads are never projected.
Gradients project_gradients(const std::vector<ProjectorSet>& projs, const Gradients& grads);

}  // namespace ssmcl
