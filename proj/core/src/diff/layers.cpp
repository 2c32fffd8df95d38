#include "spotter/diff/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace spotter::nn {

using diff::Init;

template <typename T>
Linear<T>::Linear(ParameterSet<T>& params, const std::string& name, int in, int out, Rng& rng)
    : weight(params.create(name + ".weight", {in, out}, Init::kXavierUniform, rng)),
      bias(params.create(name + ".bias", {out}, Init::kZeros, rng)) {}

template <typename T>
Tensor<T> Linear<T>::operator()(const Tensor<T>& x) const {
  return diff::add(diff::matmul(x, weight), bias);
}

template <typename T>
LayerNorm<T>::LayerNorm(ParameterSet<T>& params, const std::string& name, int dim, Rng& rng)
    : gain(params.create(name + ".gain", {dim}, Init::kOnes, rng)),
      bias(params.create(name + ".bias", {dim}, Init::kZeros, rng)) {}

template <typename T>
Tensor<T> LayerNorm<T>::operator()(const Tensor<T>& x) const {
  return diff::layer_norm(x, gain, bias);
}

template <typename T>
Conv2d<T>::Conv2d(ParameterSet<T>& params, const std::string& name, int in, int out, int kernel, int stride_,
                  Rng& rng)
    : weight(params.create(name + ".weight", {kernel, kernel, in, out}, Init::kXavierUniform, rng,
                           kernel * kernel * in, kernel * kernel * out)),
      bias(params.create(name + ".bias", {out}, Init::kZeros, rng)),
      stride(stride_),
      padding(kernel / 2) {}

template <typename T>
Tensor<T> Conv2d<T>::operator()(const Tensor<T>& x) const {
  return diff::conv2d(x, weight, bias, stride, padding);
}

template <typename T>
MultiHeadAttention<T>::MultiHeadAttention(ParameterSet<T>& params, const std::string& name, int dim, int heads,
                                          Rng& rng)
    : dim_(dim),
      heads_(heads),
      q_(params, name + ".q", dim, dim, rng),
      k_(params, name + ".k", dim, dim, rng),
      v_(params, name + ".v", dim, dim, rng),
      out_(params, name + ".out", dim, dim, rng) {
  if (heads <= 0 || dim % heads != 0) {
    throw std::invalid_argument("attention dim " + std::to_string(dim) + " not divisible by " +
                                std::to_string(heads) + " heads");
  }
}

template <typename T>
Tensor<T> MultiHeadAttention<T>::operator()(const Tensor<T>& queries, const Tensor<T>& keys_values,
                                            const BlockMask* mask) const {
  if (queries.rank() != 3 || keys_values.rank() != 3) {
    throw diff::ShapeError("attention expects [B, L, d] inputs, got " + diff::to_string(queries.shape()) +
                           " and " + diff::to_string(keys_values.shape()));
  }
  const int B = queries.dim(0), Lq = queries.dim(1), Lk = keys_values.dim(1);
  const int dh = dim_ / heads_;
  // [B, L, d] -> [B*h, L, dh]
  auto split = [&](const Tensor<T>& x, int len) {
    return diff::reshape(diff::permute(diff::reshape(x, {B, len, heads_, dh}), {0, 2, 1, 3}),
                         {B * heads_, len, dh});
  };
  const Tensor<T> q = split(q_(queries), Lq);
  const Tensor<T> k = split(k_(keys_values), Lk);
  const Tensor<T> v = split(v_(keys_values), Lk);
  Tensor<T> scores = diff::mul_scalar(diff::matmul(q, diff::transpose(k)), T(1) / std::sqrt(static_cast<T>(dh)));
  if (mask != nullptr) {
    scores = diff::reshape(scores, {B, heads_, Lq, Lk});
    scores = diff::masked_fill(scores, std::span<const std::uint8_t>(mask->blocked), mask->shape);
    scores = diff::reshape(scores, {B * heads_, Lq, Lk});
  }
  const Tensor<T> attn = diff::softmax(scores, -1);
  Tensor<T> ctx = diff::matmul(attn, v);  // [B*h, Lq, dh]
  ctx = diff::reshape(diff::permute(diff::reshape(ctx, {B, heads_, Lq, dh}), {0, 2, 1, 3}), {B, Lq, dim_});
  return out_(ctx);
}

template <typename T>
FeedForward<T>::FeedForward(ParameterSet<T>& params, const std::string& name, int dim, int hidden, Rng& rng)
    : in_(params, name + ".in", dim, hidden, rng), out_(params, name + ".out", hidden, dim, rng) {}

template <typename T>
Tensor<T> FeedForward<T>::operator()(const Tensor<T>& x) const {
  return out_(diff::relu(in_(x)));
}

template class Linear<float>;
template class Linear<double>;
template class LayerNorm<float>;
template class LayerNorm<double>;
template class Conv2d<float>;
template class Conv2d<double>;
template class MultiHeadAttention<float>;
template class MultiHeadAttention<double>;
template class FeedForward<float>;
template class FeedForward<double>;

}  // namespace spotter::nn
