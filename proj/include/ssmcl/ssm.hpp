#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <utility>
#include <vector>

#include "ssmcl/linalg.hpp"

namespace ssmcl {

// ---------------------------------------------------------------------------
// Scalar nonlinearities

template <typename Scalar>
Scalar softplus(Scalar z) {
  // log(1 + e^z), clamped away from zero so the step size stays strictly positive.
  const Scalar v = z > Scalar(0) ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
  return std::max(v, std::numeric_limits<Scalar>::min());
}

template <typename Scalar>
Scalar sigmoid(Scalar z) {
  if (z >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-z));
  const Scalar e = std::exp(z);
  return e / (Scalar(1) + e);
}

template <typename Scalar>
Scalar silu(Scalar z) {
  return z * sigmoid(z);
}

inline constexpr double kZohSeriesThreshold = 1e-8;

/// ZOH input factor phi(z) = (e^z - 1) / z, with phi(0) = 1.
template <typename Scalar>
Scalar zoh_phi(Scalar z) {
  if (std::abs(z) < Scalar(kZohSeriesThreshold)) return Scalar(1) + z / Scalar(2) + z * z / Scalar(6);
  return std::expm1(z) / z;
}

/// d/dz phi(z). Uses the Taylor series near zero where the closed form cancels.
template <typename Scalar>
Scalar zoh_phi_derivative(Scalar z) {
  if (std::abs(z) < Scalar(kZohSeriesThreshold)) return Scalar(0.5) + z / Scalar(3);
  if (std::abs(z) < Scalar(1e-3)) {
    const Scalar z2 = z * z;
    return Scalar(0.5) + z / Scalar(3) + z2 / Scalar(8) + z2 * z / Scalar(30) + z2 * z2 / Scalar(144);
  }
  const Scalar em1 = std::expm1(z);
  return (z * (em1 + Scalar(1)) - em1) / (z * z);
}

/// phi(z) and phi'(z) for callers that already hold e^z.
template <typename Scalar>
std::pair<Scalar, Scalar> zoh_phi_with_derivative(Scalar z, Scalar ez) {
  if (std::abs(z) < Scalar(1e-3)) return {zoh_phi(z), zoh_phi_derivative(z)};
  const Scalar em1 = ez - Scalar(1);
  return {em1 / z, (z * ez - em1) / (z * z)};
}

// ---------------------------------------------------------------------------
// Parameters and data

struct ModelDims {
  Index d_raw = 32;    // raw token width
  Index d_model = 32;  // D
  Index d_state = 8;   // N
  Index d_delta = 32;  // 1 or D
  Index seq_len = 16;  // L
  Index n_blocks = 2;
  Index d_out = 32;  // width of the post-SSM linear layer
  bool gate = false;  // frozen SiLU gating branch
  bool input_norm = true;  // parameter-free RMS normalization of each block input

  void validate() const;
  Index block_input_width(Index block) const { return block == 0 ? d_raw : d_out; }
};

struct SsmParams {
  Matrix A;           // D x N
  Matrix W_B;         // D x N
  Matrix W_C;         // D x N
  Matrix W_delta;     // D x d_delta
  Vector delta_bias;  // d_delta

  Index d_model() const { return A.rows(); }
  Index d_state() const { return A.cols(); }
  Index d_delta() const { return W_delta.cols(); }
};

struct MambaBlockParams {
  Matrix embed;  // D_in x D, frozen
  SsmParams ssm;
  Matrix W_out;  // D x D_out
  Matrix gate;   // D_in x D, frozen; empty when the gating branch is off
  bool input_norm = false;  // rows of the input are RMS-normalized before embed and gate

  bool gated() const { return gate.size() != 0; }
};

using Backbone = std::vector<MambaBlockParams>;

/// M sequences of L tokens, stacked into an (M*L) x D_raw matrix.
struct SequenceBatch {
  Index seq_len = 0;
  Matrix x;
  std::vector<int> labels;

  Index size() const { return static_cast<Index>(labels.size()); }
  auto sample(Index m) const { return x.middleRows(m * seq_len, seq_len); }
  auto sample(Index m) { return x.middleRows(m * seq_len, seq_len); }

  void validate() const;
  /// Rows selected by sample index, in the given order.
  SequenceBatch gather(const std::vector<Index>& samples) const;
};

/// Per-token features stacked over samples; every member has M*L rows.
struct FeatureCapture {
  Matrix x_feats;       // embedded tokens X
  Matrix delta_feats;   // step sizes delta
  Matrix deltax_feats;  // delta (.) X
  Matrix y_feats;       // input of W_out
};

/// Freshly initialized block; A_{d,n} = -(n+1), W_B, W_C, W_delta uniform in
/// +-1/sqrt(D), W_out uniform in +-sqrt(3/D).
MambaBlockParams init_block(const ModelDims& dims, Index block, std::uint64_t seed);
Backbone init_backbone(const ModelDims& dims, std::uint64_t seed);

/// Bias value whose softplus is the midpoint of [0.01, 0.1].
double default_delta_bias();

// ---------------------------------------------------------------------------
// Forward operations

struct Bcd {
  Matrix b;      // L x N
  Matrix c;      // L x N
  Matrix delta;  // L x d_delta, strictly positive
};

Bcd compute_bcd(const Matrix& x_emb, const SsmParams& p);

struct Discretized {
  Tensor abar;  // L x D x N
  Tensor bbar;  // L x D x N
};

Discretized discretize(const Matrix& delta, const Matrix& a, const Matrix& b);

/// Selective scan over one sequence; h_0 = 0.
Matrix selective_scan(const Matrix& x_emb, const Tensor& abar, const Tensor& bbar, const Matrix& c);

/// Selective scan over stacked sequences of length seq_len; state resets per sequence.
Matrix selective_scan(const Matrix& x_emb, const Tensor& abar, const Tensor& bbar, const Matrix& c,
                      Index seq_len);

/// Convolution kernel of a token-invariant SSM: kernel(k, d) = sum_n c_n abar_{d,n}^k bbar_{d,n}.
Matrix build_lti_kernel(const Tensor& abar0, const Tensor& bbar0, const Matrix& c0, Index k_len);

/// y(l, d) = sum_{k <= l} kernel(k, d) x(l - k, d).
Matrix causal_convolution(const Matrix& x, const Matrix& kernel);

inline constexpr double kRmsEps = 1e-6;

/// Intermediate values of one block forward pass, kept for the backward pass.
struct BlockTrace {
  Index seq_len = 0;
  Matrix x_in;    // (M*L) x D_in
  Matrix x_norm;  // x_in after the optional RMS normalization
  Vector rms;     // per-row normalizer; empty when input_norm is off
  Matrix x;       // embedded tokens
  Matrix b, c;
  Matrix delta_pre;  // bias + X W_delta
  Matrix delta;
  Tensor abar, bbar, h;
  Matrix scan;      // SSM output
  Matrix gate_pre;  // empty when ungated
  Matrix u;         // input of W_out
  Matrix y;         // block output
};

BlockTrace trace_block(const Matrix& x_in, Index seq_len, const MambaBlockParams& block);

struct BlockOutput {
  Matrix y;  // (M*L) x D_out
  std::optional<FeatureCapture> features;
};

BlockOutput mamba_block_forward(const Matrix& x_in, Index seq_len, const MambaBlockParams& block,
                                bool capture);
BlockOutput mamba_block_forward(const SequenceBatch& batch, const MambaBlockParams& block,
                                bool capture);

/// Output of the last block for every stacked token.
Matrix backbone_forward(const SequenceBatch& batch, const Backbone& blocks);

/// Block outputs with feature capture for every block, in order.
std::vector<BlockOutput> backbone_forward_capture(const SequenceBatch& batch,
                                                  const Backbone& blocks);

/// Per-sample mean over tokens: (M*L) x F -> M x F.
Matrix mean_pool(const Matrix& tokens, Index seq_len);

/// Concatenate heads column-wise in task order.
Matrix concat_heads(const std::vector<Matrix>& heads);

/// Mean-pooled backbone output times every head, concatenated in task order.
Matrix model_forward(const SequenceBatch& batch, const Backbone& blocks,
                     const std::vector<Matrix>& heads);

}  // namespace ssmcl
