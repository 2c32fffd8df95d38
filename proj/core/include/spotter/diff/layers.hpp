#pragma once

// Parameterized building blocks shared by the encoder, decoders and heads.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "spotter/diff/ops.hpp"
#include "spotter/diff/parameters.hpp"
#include "spotter/random.hpp"

namespace spotter::nn {

using diff::ParameterSet;
using diff::Shape;
using diff::Tensor;

/// x[..., in] -> x[..., out].
template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(ParameterSet<T>& params, const std::string& name, int in, int out, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& x) const;

  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]
};

template <typename T>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterSet<T>& params, const std::string& name, int dim, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& x) const;

  Tensor<T> gain;
  Tensor<T> bias;
};

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParameterSet<T>& params, const std::string& name, int in, int out, int kernel, int stride, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& x) const;

  Tensor<T> weight;  // [k, k, in, out]
  Tensor<T> bias;    // [out]
  int stride = 1;
  int padding = 0;
};

/// Positions to exclude from attention; `blocked` is nonzero where a query
/// may not attend. `shape` must broadcast to [B, heads, Lq, Lk].
struct BlockMask {
  std::vector<std::uint8_t> blocked;
  Shape shape;
};

/// Multi-head scaled dot-product attention over [B, L, d] sequences.
template <typename T>
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterSet<T>& params, const std::string& name, int dim, int heads, Rng& rng);

  Tensor<T> operator()(const Tensor<T>& queries, const Tensor<T>& keys_values,
                       const BlockMask* mask = nullptr) const;

  int heads() const { return heads_; }

 private:
  int dim_ = 0;
  int heads_ = 1;
  Linear<T> q_, k_, v_, out_;
};

template <typename T>
class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(ParameterSet<T>& params, const std::string& name, int dim, int hidden, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& x) const;

 private:
  Linear<T> in_, out_;
};

extern template class Linear<float>;
extern template class Linear<double>;
extern template class LayerNorm<float>;
extern template class LayerNorm<double>;
extern template class Conv2d<float>;
extern template class Conv2d<double>;
extern template class MultiHeadAttention<float>;
extern template class MultiHeadAttention<double>;
extern template class FeedForward<float>;
extern template class FeedForward<double>;

}  // namespace spotter::nn
