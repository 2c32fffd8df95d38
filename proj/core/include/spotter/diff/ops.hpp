#pragma once

// Differentiable op catalog. Every function records a backward closure when
// any input requires grad. Shapes broadcast numpy-style for elementwise
// binary ops; spatial ops use channels-last layout ([B,] H, W, C).

#include <cstdint>
#include <span>
#include <vector>

#include "spotter/diff/tensor.hpp"

namespace spotter::diff {

/// Fill value used for attention masking. exp(kMaskFill - max) underflows to 0.
inline constexpr double kMaskFill = -1e9;

// Elementwise, broadcasting.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
/// Rejects any denominator with magnitude below 1e-12.
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T s);
template <typename T> Tensor<T> mul_scalar(const Tensor<T>& a, T s);
template <typename T> Tensor<T> neg(const Tensor<T>& a);

template <typename T> Tensor<T> exp(const Tensor<T>& a);
/// Rejects non-positive inputs.
template <typename T> Tensor<T> log(const Tensor<T>& a);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a);
template <typename T> Tensor<T> relu(const Tensor<T>& a);
/// a^p for a > 0.
template <typename T> Tensor<T> pow_scalar(const Tensor<T>& a, T p);
/// Gradient is zero where the input was clipped.
template <typename T> Tensor<T> clamp(const Tensor<T>& a, T lo, T hi);

/// [..., M, K] x [..., K, N]. The right operand may be 2-D and is then shared
/// across the left operand's batch dims.
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// Max-subtracted softmax along `axis` (negative counts from the end).
template <typename T> Tensor<T> softmax(const Tensor<T>& a, int axis);
template <typename T> Tensor<T> log_softmax(const Tensor<T>& a, int axis);

/// Normalizes over the last axis, then applies gain and bias of that extent.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     double eps = 1e-5);

/// x: [B, H, W, Cin] or [H, W, Cin]; weight: [kh, kw, Cin, Cout]; bias: [Cout]
/// or undefined. Zero padding.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride, int padding);

/// Nearest-neighbor upsample of the two spatial axes preceding channels.
template <typename T> Tensor<T> upsample_nearest(const Tensor<T>& x, int factor);

template <typename T>
Tensor<T> sum(const Tensor<T>& a, std::vector<int> axes, bool keepdim = false);
template <typename T>
Tensor<T> mean(const Tensor<T>& a, std::vector<int> axes, bool keepdim = false);
/// Sum over every element, rank-0 result.
template <typename T> Tensor<T> sum_all(const Tensor<T>& a);
template <typename T> Tensor<T> mean_all(const Tensor<T>& a);

template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);
template <typename T> Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& order);
/// Swaps the last two axes.
template <typename T> Tensor<T> transpose(const Tensor<T>& a);
/// One extent may be -1.
template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);
template <typename T> Tensor<T> broadcast_to(const Tensor<T>& a, const Shape& shape);
template <typename T> Tensor<T> slice(const Tensor<T>& a, int axis, int start, int length);

/// Gathers entries along `axis`. Repeated indices accumulate in backward.
template <typename T>
Tensor<T> index_select(const Tensor<T>& a, int axis, std::span<const int> indices);
/// Row lookup into a [V, D] table.
template <typename T> Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids);

/// Sets positions where `mask` is nonzero to `value`. mask_shape must
/// broadcast to a's shape. Masked positions receive no gradient.
template <typename T>
Tensor<T> masked_fill(const Tensor<T>& a, std::span<const std::uint8_t> mask,
                      const Shape& mask_shape, T value = static_cast<T>(kMaskFill));

template <typename T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T> Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a) { return neg(a); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, T s) { return mul_scalar(a, s); }
template <typename T> Tensor<T> operator*(T s, const Tensor<T>& a) { return mul_scalar(a, s); }
template <typename T> Tensor<T> operator+(const Tensor<T>& a, T s) { return add_scalar(a, s); }
template <typename T> Tensor<T> operator-(T s, const Tensor<T>& a) { return add_scalar(neg(a), s); }

// ---------------------------------------------------------------------------
// Uniform dispatch over the catalog, for table-driven callers and tests.

enum class Op {
  kAdd, kSub, kMul, kDiv, kExp, kLog, kSigmoid, kRelu,
  kMatmul, kSoftmax, kLayerNorm, kConv2d, kUpsampleNearest,
  kSum, kMean, kConcat, kTranspose, kReshape, kEmbedding, kMaskedFill,
};

struct OpAttrs {
  int axis = -1;
  std::vector<int> axes;
  bool keepdim = false;
  int stride = 1;
  int padding = 0;
  int factor = 2;
  Shape shape;
  std::vector<int> order;
  std::vector<int> indices;
  std::vector<std::uint8_t> mask;
  Shape mask_shape;
  double fill = kMaskFill;
};

const char* op_name(Op op);

/// Runs `op` on `inputs`. Input arity: binary ops and matmul take 2,
/// layer_norm takes (x, gain, bias), conv2d takes (x, weight[, bias]),
/// concat takes any number >= 1, everything else takes 1.
template <typename T>
Tensor<T> evaluate(Op op, const std::vector<Tensor<T>>& inputs, const OpAttrs& attrs = {});

}  // namespace spotter::diff
