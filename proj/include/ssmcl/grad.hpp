#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ssmcl/ssm.hpp"

namespace ssmcl {

struct BlockGradients {
  Matrix A;
  Matrix W_B;
  Matrix W_C;
  Matrix W_delta;
  Vector delta_bias;
  Matrix W_out;

  static BlockGradients zeros_like(const MambaBlockParams& block);
};

struct Gradients {
  std::vector<BlockGradients> blocks;
  std::vector<Matrix> heads;

  static Gradients zeros_like(const Backbone& blocks, const std::vector<Matrix>& heads);
};

enum class ParamKind { A, W_B, W_C, W_delta, delta_bias, W_out, head };

/// Names one trainable tensor. `index` is the block for SSM tensors and the task for heads.
struct ParamId {
  ParamKind kind;
  Index index;

  std::string name() const;
};

/// Visit every trainable tensor of a Gradients-shaped object.
template <typename Grads, typename Fn>
void for_each_tensor(Grads& g, Fn&& fn) {
  for (Index k = 0; k < static_cast<Index>(g.blocks.size()); ++k) {
    auto& b = g.blocks[static_cast<std::size_t>(k)];
    fn(ParamId{ParamKind::A, k}, b.A);
    fn(ParamId{ParamKind::W_B, k}, b.W_B);
    fn(ParamId{ParamKind::W_C, k}, b.W_C);
    fn(ParamId{ParamKind::W_delta, k}, b.W_delta);
    fn(ParamId{ParamKind::delta_bias, k}, b.delta_bias);
    fn(ParamId{ParamKind::W_out, k}, b.W_out);
  }
  for (Index t = 0; t < static_cast<Index>(g.heads.size()); ++t)
    fn(ParamId{ParamKind::head, t}, g.heads[static_cast<std::size_t>(t)]);
}

/// Mean cross-entropy with max-subtraction. Targets index logit columns.
double cross_entropy(const Matrix& logits, std::span<const int> targets);

struct LossAndGradients {
  double loss = 0.0;
  Gradients grads;
};

/// Loss and exact gradients for every trainable tensor. `targets` index the
/// concatenated head columns. The frozen embedding and gate get no gradient.
LossAndGradients backward(const SequenceBatch& batch, const Backbone& blocks,
                          const std::vector<Matrix>& heads, std::span<const int> targets);
LossAndGradients backward(const SequenceBatch& batch, const Backbone& blocks,
                          const std::vector<Matrix>& heads);

/// Gradient of the block parameters and, when requested, of the block input,
/// given the upstream gradient of the block output.
struct BlockBackward {
  BlockGradients grads;
  Matrix d_input;  // empty unless requested
};
BlockBackward block_backward(const BlockTrace& trace, const MambaBlockParams& block,
                             const Matrix& d_output, bool want_input_grad);

/// (f(x + h) - f(x - h)) / 2h
double central_difference(const std::function<double(double)>& f, double x, double h);

using ParamSelector = std::function<bool(const ParamId&)>;

/// Central-difference estimate of the loss gradient for every selected tensor;
/// unselected tensors are left at zero.
Gradients finite_diff(const SequenceBatch& batch, const Backbone& blocks,
                      const std::vector<Matrix>& heads, std::span<const int> targets,
                      const ParamSelector& select, double step = 1e-5);

struct GradCheckConfig {
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  Index d_raw = 5;
  Index d_model = 8;
  Index d_state = 4;
  Index d_delta = 0;  // 0 selects d_model
  Index seq_len = 6;
  Index batch = 3;
  Index n_blocks = 2;
  Index d_out = 6;
  Index classes = 3;
  bool gate = false;
  double step = 1e-5;
  double tolerance = 1e-4;
  bool inject_sign_flip = false;  // test hook: negates one analytic gradient
};

struct GradCheckEntry {
  std::uint64_t seed;
  std::string param;
  double rel_error;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  std::string worst;
  bool passed = false;
};

/// ||a - b||_F / max(||a||_F, ||b||_F, 1e-7)
double relative_error(const Eigen::Ref<const Matrix>& a, const Eigen::Ref<const Matrix>& b);

GradCheckReport run_grad_check(const GradCheckConfig& cfg);

}  // namespace ssmcl
