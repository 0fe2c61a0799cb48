#pragma once

#include "efl/nn/autograd.hpp"

#include <span>
#include <vector>

namespace efl::nn {

// Differentiable primitives. Matrices are [rows, cols]; feature maps are
// [C, H, W] and reinterpret as [C, H*W] where a matrix view is needed.

Var matmul(const Var& a, const Var& b);     // [m,k]·[k,n]
Var matmul_nt(const Var& a, const Var& b);  // [m,k]·[n,k]^T
Var transpose(const Var& a);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_n(const std::vector<Var>& terms);

Var add_bias(const Var& x, const Var& bias);          // x[m,n] + b[n]
Var add_channel(const Var& x, const Var& bias);       // x[C,...] + b[C]
Var mul_channel(const Var& x, const Var& gain);       // x[C,...] * g[C]

Var relu(const Var& x);
Var silu(const Var& x);
Var gelu(const Var& x);
Var tanh(const Var& x);

enum class MaskKind { none, causal, key_prefix };

struct SoftmaxMask {
  MaskKind kind = MaskKind::none;
  int valid_keys = 0;  // key_prefix: columns >= valid_keys get zero weight

  static SoftmaxMask none() { return {}; }
  static SoftmaxMask causal() { return {MaskKind::causal, 0}; }
  static SoftmaxMask prefix(int n) { return {MaskKind::key_prefix, n}; }
};

Var softmax_rows(const Var& x, SoftmaxMask mask = {});

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta, double eps = 1e-5);

Var embedding(const Var& table, std::span<const int> ids);

Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(const Var& x, int r0, int r1);
Var reshape(const Var& x, std::vector<int> shape);

// Weight layout [out, in*k*k]; stride 1 or 2, symmetric zero padding.
Var conv2d(const Var& x, const Var& weight, const Var& bias, int kernel, int stride, int pad);
Var upsample2x(const Var& x);
Var space_to_depth(const Var& x, int factor);
Var depth_to_space(const Var& x, int factor);

Var l2_normalize_rows(const Var& x, double eps = 1e-12);

Var sum(const Var& x);
Var mean(const Var& x);
Var mse_loss(const Var& pred, const Tensor& target);
// Mean token cross-entropy; targets < 0 are excluded from the mean.
Var cross_entropy(const Var& logits, std::span<const int> targets);

}  // namespace efl::nn
