#include "spotter/diff/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace spotter::diff {

namespace {

template <typename T>
using Node = detail::Node<T>;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

int normalize_axis(int axis, int rank) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return a;
}

std::vector<std::size_t> contiguous_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) {
    st[static_cast<std::size_t>(i)] =
        st[static_cast<std::size_t>(i) + 1] * static_cast<std::size_t>(s[static_cast<std::size_t>(i) + 1]);
  }
  return st;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const int ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const int eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError("cannot broadcast " + to_string(a) + " with " + to_string(b));
    }
    out[i] = ea == 1 ? eb : ea;
  }
  return out;
}

// Strides of `s` viewed at rank out.size(), zero on broadcast axes.
std::vector<std::size_t> broadcast_strides(const Shape& s, const Shape& out) {
  if (s.size() > out.size()) {
    throw ShapeError("cannot broadcast " + to_string(s) + " to " + to_string(out));
  }
  const auto own = contiguous_strides(s);
  const std::size_t off = out.size() - s.size();
  std::vector<std::size_t> st(out.size(), 0);
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == out[i + off]) {
      st[i + off] = s[i] == 1 ? 0 : own[i];
    } else if (s[i] != 1) {
      throw ShapeError("cannot broadcast " + to_string(s) + " to " + to_string(out));
    }
  }
  return st;
}

// Visits every flat output index with the matching offsets into two strided
// operands.
template <typename F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t total = numel(out);
  if (total == 0) return;
  const int r = static_cast<int>(out.size());
  if (r == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t inner = static_cast<std::size_t>(out[static_cast<std::size_t>(r - 1)]);
  const std::size_t ia = sa[static_cast<std::size_t>(r - 1)];
  const std::size_t ib = sb[static_cast<std::size_t>(r - 1)];
  std::vector<int> idx(static_cast<std::size_t>(r), 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t o = 0; o < total; o += inner) {
    for (std::size_t k = 0; k < inner; ++k) f(o + k, oa + k * ia, ob + k * ib);
    for (int d = r - 2; d >= 0; --d) {
      const auto du = static_cast<std::size_t>(d);
      ++idx[du];
      oa += sa[du];
      ob += sb[du];
      if (idx[du] < out[du]) break;
      oa -= sa[du] * static_cast<std::size_t>(out[du]);
      ob -= sb[du] * static_cast<std::size_t>(out[du]);
      idx[du] = 0;
    }
  }
}

// Sum of `src` (shape `from`) reduced onto `dst` (shape `to`, broadcastable to `from`).
template <typename T>
void reduce_into(std::span<const T> src, const Shape& from, std::span<T> dst, const Shape& to) {
  if (from == to) {
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
    return;
  }
  const auto st = broadcast_strides(to, from);
  const std::vector<std::size_t> zero(from.size(), 0);
  for_each_broadcast(from, st, zero, [&](std::size_t o, std::size_t t, std::size_t) { dst[t] += src[o]; });
}

template <typename T, typename Fwd, typename Da, typename Db>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, Da da, Db db) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const auto av = a.values();
  const auto bv = b.values();
  Shape out = broadcast_shape(sa, sb);
  std::vector<T> values(numel(out));
  const bool same = sa == sb;
  std::vector<std::size_t> sta, stb;
  if (same) {
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = fwd(av[i], bv[i]);
  } else {
    sta = broadcast_strides(sa, out);
    stb = broadcast_strides(sb, out);
    for_each_broadcast(out, sta, stb,
                       [&](std::size_t o, std::size_t i, std::size_t j) { values[o] = fwd(av[i], bv[j]); });
  }
  return make_result<T>(
      out, std::move(values), {a.node(), b.node()},
      [same, sta, stb, da, db](Node<T>& self) {
        Node<T>& pa = *self.parents[0];
        Node<T>& pb = *self.parents[1];
        const auto& g = self.grad;
        const auto& x = pa.values;
        const auto& y = pb.values;
        const auto& z = self.values;
        T* ga = pa.requires_grad ? pa.ensure_grad().data() : nullptr;
        T* gb = pb.requires_grad ? pb.ensure_grad().data() : nullptr;
        if (same) {
          for (std::size_t i = 0; i < g.size(); ++i) {
            if (ga) ga[i] += g[i] * da(x[i], y[i], z[i]);
            if (gb) gb[i] += g[i] * db(x[i], y[i], z[i]);
          }
        } else {
          for_each_broadcast(self.shape, sta, stb, [&](std::size_t o, std::size_t i, std::size_t j) {
            if (ga) ga[i] += g[o] * da(x[i], y[j], z[o]);
            if (gb) gb[j] += g[o] * db(x[i], y[j], z[o]);
          });
        }
      });
}

// f(x) forward; df(x, y) derivative given input and output.
template <typename T, typename Fwd, typename Df>
Tensor<T> unary_op(const Tensor<T>& a, Fwd fwd, Df df) {
  const auto av = a.values();
  std::vector<T> values(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) values[i] = fwd(av[i]);
  return make_result<T>(a.shape(), std::move(values), {a.node()}, [df](Node<T>& self) {
    Node<T>& p = *self.parents[0];
    auto& gp = p.ensure_grad();
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i] * df(p.values[i], self.values[i]);
  });
}

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, int axis) {
  AxisSplit r;
  for (int i = 0; i < axis; ++i) r.outer *= static_cast<std::size_t>(s[static_cast<std::size_t>(i)]);
  r.n = static_cast<std::size_t>(s[static_cast<std::size_t>(axis)]);
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) {
    r.inner *= static_cast<std::size_t>(s[i]);
  }
  return r;
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; },
      [](T x, T, T) { return x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  for (T v : b.values()) {
    if (!(std::abs(static_cast<double>(v)) >= 1e-12)) {
      throw ShapeError("div: denominator magnitude below 1e-12 (got " +
                       std::to_string(static_cast<double>(v)) + ")");
    }
  }
  return binary_op(
      a, b, [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
      [](T, T y, T z) { return -z / y; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return unary_op(a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  return unary_op(a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return mul_scalar(a, T(-1));
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return unary_op(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  for (T v : a.values()) {
    if (!(v > T(0))) throw ShapeError("log: non-positive input " + std::to_string(static_cast<double>(v)));
  }
  return unary_op(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary_op(
      a,
      [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> pow_scalar(const Tensor<T>& a, T p) {
  for (T v : a.values()) {
    if (!(v > T(0))) throw ShapeError("pow_scalar: non-positive base " + std::to_string(static_cast<double>(v)));
  }
  return unary_op(
      a, [p](T x) { return std::pow(x, p); }, [p](T x, T y) { return p * y / x; });
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  return unary_op(
      a, [lo, hi](T x) { return std::clamp(x, lo, hi); },
      [lo, hi](T x, T) { return (x >= lo && x <= hi) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2) {
    throw ShapeError("matmul needs rank >= 2, got " + to_string(sa) + " x " + to_string(sb));
  }
  const int m = sa[sa.size() - 2];
  const int k = sa[sa.size() - 1];
  const int k2 = sb[sb.size() - 2];
  const int n = sb[sb.size() - 1];
  const Shape batch_a(sa.begin(), sa.end() - 2);
  const Shape batch_b(sb.begin(), sb.end() - 2);
  const bool shared_b = sb.size() == 2;
  if (k != k2 || (!shared_b && batch_a != batch_b)) {
    throw ShapeError("matmul shape mismatch " + to_string(sa) + " x " + to_string(sb));
  }
  const std::size_t batches = numel(batch_a);
  Shape out = batch_a;
  out.push_back(m);
  out.push_back(n);
  std::vector<T> values(batches * static_cast<std::size_t>(m) * static_cast<std::size_t>(n));
  const std::size_t a_step = static_cast<std::size_t>(m) * k;
  const std::size_t b_step = shared_b ? 0 : static_cast<std::size_t>(k) * n;
  const std::size_t c_step = static_cast<std::size_t>(m) * n;

  if (shared_b && batches > 1) {
    // Fold the batch into rows for one large product.
    ConstMatMap<T> A(a.values().data(), static_cast<Eigen::Index>(batches) * m, k);
    ConstMatMap<T> B(b.values().data(), k, n);
    MatMap<T> C(values.data(), static_cast<Eigen::Index>(batches) * m, n);
    C.noalias() = A * B;
  } else {
    for (std::size_t i = 0; i < batches; ++i) {
      ConstMatMap<T> A(a.values().data() + i * a_step, m, k);
      ConstMatMap<T> B(b.values().data() + i * b_step, k, n);
      MatMap<T> C(values.data() + i * c_step, m, n);
      C.noalias() = A * B;
    }
  }

  return make_result<T>(out, std::move(values), {a.node(), b.node()},
                        [=](Node<T>& self) {
                          Node<T>& pa = *self.parents[0];
                          Node<T>& pb = *self.parents[1];
                          if (shared_b) {
                            const auto rows = static_cast<Eigen::Index>(batches) * m;
                            ConstMatMap<T> G(self.grad.data(), rows, n);
                            if (pa.requires_grad) {
                              ConstMatMap<T> B(pb.values.data(), k, n);
                              MatMap<T> GA(pa.ensure_grad().data(), rows, k);
                              GA.noalias() += G * B.transpose();
                            }
                            if (pb.requires_grad) {
                              ConstMatMap<T> A(pa.values.data(), rows, k);
                              MatMap<T> GB(pb.ensure_grad().data(), k, n);
                              GB.noalias() += A.transpose() * G;
                            }
                            return;
                          }
                          for (std::size_t i = 0; i < batches; ++i) {
                            ConstMatMap<T> G(self.grad.data() + i * c_step, m, n);
                            if (pa.requires_grad) {
                              ConstMatMap<T> B(pb.values.data() + i * b_step, k, n);
                              MatMap<T> GA(pa.ensure_grad().data() + i * a_step, m, k);
                              GA.noalias() += G * B.transpose();
                            }
                            if (pb.requires_grad) {
                              ConstMatMap<T> A(pa.values.data() + i * a_step, m, k);
                              MatMap<T> GB(pb.ensure_grad().data() + i * b_step, k, n);
                              GB.noalias() += A.transpose() * G;
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Normalizations

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, int axis) {
  const int ax = normalize_axis(axis, a.rank());
  const AxisSplit sp = split_axis(a.shape(), ax);
  const auto x = a.values();
  std::vector<T> y(x.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < sp.n; ++k) mx = std::max(mx, x[base + k * sp.inner]);
      T total = 0;
      for (std::size_t k = 0; k < sp.n; ++k) {
        const T e = std::exp(x[base + k * sp.inner] - mx);
        y[base + k * sp.inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < sp.n; ++k) y[base + k * sp.inner] /= total;
    }
  }
  return make_result<T>(a.shape(), std::move(y), {a.node()}, [sp](Node<T>& self) {
    Node<T>& p = *self.parents[0];
    auto& gp = p.ensure_grad();
    const auto& g = self.grad;
    const auto& yv = self.values;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.n * sp.inner + i;
        T dot = 0;
        for (std::size_t k = 0; k < sp.n; ++k) dot += g[base + k * sp.inner] * yv[base + k * sp.inner];
        for (std::size_t k = 0; k < sp.n; ++k) {
          const std::size_t j = base + k * sp.inner;
          gp[j] += yv[j] * (g[j] - dot);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& a, int axis) {
  const int ax = normalize_axis(axis, a.rank());
  const AxisSplit sp = split_axis(a.shape(), ax);
  const auto x = a.values();
  std::vector<T> y(x.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < sp.n; ++k) mx = std::max(mx, x[base + k * sp.inner]);
      T total = 0;
      for (std::size_t k = 0; k < sp.n; ++k) total += std::exp(x[base + k * sp.inner] - mx);
      const T lse = mx + std::log(total);
      for (std::size_t k = 0; k < sp.n; ++k) y[base + k * sp.inner] = x[base + k * sp.inner] - lse;
    }
  }
  return make_result<T>(a.shape(), std::move(y), {a.node()}, [sp](Node<T>& self) {
    Node<T>& p = *self.parents[0];
    auto& gp = p.ensure_grad();
    const auto& g = self.grad;
    const auto& yv = self.values;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.n * sp.inner + i;
        T gsum = 0;
        for (std::size_t k = 0; k < sp.n; ++k) gsum += g[base + k * sp.inner];
        for (std::size_t k = 0; k < sp.n; ++k) {
          const std::size_t j = base + k * sp.inner;
          gp[j] += g[j] - std::exp(yv[j]) * gsum;
        }
      }
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, double eps) {
  if (x.rank() < 1) throw ShapeError("layer_norm on rank-0 tensor");
  const std::size_t d = static_cast<std::size_t>(x.shape().back());
  if (gain.shape() != Shape{static_cast<int>(d)} || bias.shape() != Shape{static_cast<int>(d)}) {
    throw ShapeError("layer_norm gain/bias must be [" + std::to_string(d) + "], got " +
                     to_string(gain.shape()) + " / " + to_string(bias.shape()));
  }
  const std::size_t rows = x.size() / d;
  const auto xv = x.values();
  const auto gv = gain.values();
  const auto bv = bias.values();
  std::vector<T> y(xv.size());
  std::vector<T> xhat(xv.size());
  std::vector<T> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * d;
    T mu = 0;
    for (std::size_t c = 0; c < d; ++c) mu += row[c];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<T>(d);
    const T rs = T(1) / std::sqrt(var + static_cast<T>(eps));
    rstd[r] = rs;
    for (std::size_t c = 0; c < d; ++c) {
      const T h = (row[c] - mu) * rs;
      xhat[r * d + c] = h;
      y[r * d + c] = h * gv[c] + bv[c];
    }
  }
  return make_result<T>(
      x.shape(), std::move(y), {x.node(), gain.node(), bias.node()},
      [d, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
        Node<T>& px = *self.parents[0];
        Node<T>& pg = *self.parents[1];
        Node<T>& pb = *self.parents[2];
        const auto& g = self.grad;
        if (pg.requires_grad || pb.requires_grad) {
          T* gg = pg.requires_grad ? pg.ensure_grad().data() : nullptr;
          T* gb = pb.requires_grad ? pb.ensure_grad().data() : nullptr;
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < d; ++c) {
              if (gg) gg[c] += g[r * d + c] * xhat[r * d + c];
              if (gb) gb[c] += g[r * d + c];
            }
          }
        }
        if (px.requires_grad) {
          auto& gx = px.ensure_grad();
          const auto& gain_v = pg.values;
          const T inv_d = T(1) / static_cast<T>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            T s1 = 0, s2 = 0;
            for (std::size_t c = 0; c < d; ++c) {
              const T dh = g[r * d + c] * gain_v[c];
              s1 += dh;
              s2 += dh * xhat[r * d + c];
            }
            for (std::size_t c = 0; c < d; ++c) {
              const T dh = g[r * d + c] * gain_v[c];
              gx[r * d + c] += rstd[r] * inv_d * (static_cast<T>(d) * dh - s1 - xhat[r * d + c] * s2);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Spatial

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride,
                 int padding) {
  const bool batched = x.rank() == 4;
  if (!batched && x.rank() != 3) throw ShapeError("conv2d input must be [B,H,W,C] or [H,W,C], got " + to_string(x.shape()));
  if (weight.rank() != 4) throw ShapeError("conv2d weight must be [kh,kw,Cin,Cout], got " + to_string(weight.shape()));
  if (stride != 1 && stride != 2) throw ShapeError("conv2d stride must be 1 or 2");
  if (padding < 0) throw ShapeError("conv2d padding must be non-negative");
  const int B = batched ? x.dim(0) : 1;
  const int H = x.dim(-3), W = x.dim(-2), Ci = x.dim(-1);
  const int kh = weight.dim(0), kw = weight.dim(1), Co = weight.dim(3);
  if (weight.dim(2) != Ci) {
    throw ShapeError("conv2d channel mismatch: input " + to_string(x.shape()) + " weight " +
                     to_string(weight.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{Co}) {
    throw ShapeError("conv2d bias must be [" + std::to_string(Co) + "], got " + to_string(bias.shape()));
  }
  const int Ho = (H + 2 * padding - kh) / stride + 1;
  const int Wo = (W + 2 * padding - kw) / stride + 1;
  if (Ho <= 0 || Wo <= 0) throw ShapeError("conv2d output would be empty for " + to_string(x.shape()));

  const std::size_t rows = static_cast<std::size_t>(B) * Ho * Wo;
  const std::size_t patch = static_cast<std::size_t>(kh) * kw * Ci;
  const bool pointwise = kh == 1 && kw == 1 && stride == 1 && padding == 0;

  // im2col: one row per output pixel, laid out (ky, kx, ci).
  std::vector<T> cols;
  const auto xv = x.values();
  if (!pointwise) {
    cols.assign(rows * patch, T(0));
    for (int b = 0; b < B; ++b)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          T* dst = cols.data() + ((static_cast<std::size_t>(b) * Ho + oy) * Wo + ox) * patch;
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = oy * stride - padding + ky;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = ox * stride - padding + kx;
              if (ix < 0 || ix >= W) continue;
              const T* src = xv.data() + ((static_cast<std::size_t>(b) * H + iy) * W + ix) * Ci;
              std::copy(src, src + Ci, dst + (static_cast<std::size_t>(ky) * kw + kx) * Ci);
            }
          }
        }
  }

  std::vector<T> out(rows * static_cast<std::size_t>(Co));
  {
    ConstMatMap<T> A(pointwise ? xv.data() : cols.data(), static_cast<Eigen::Index>(rows),
                     static_cast<Eigen::Index>(patch));
    ConstMatMap<T> Wm(weight.values().data(), static_cast<Eigen::Index>(patch), Co);
    MatMap<T> C(out.data(), static_cast<Eigen::Index>(rows), Co);
    C.noalias() = A * Wm;
    if (has_bias) {
      const auto bv = bias.values();
      for (std::size_t r = 0; r < rows; ++r)
        for (int c = 0; c < Co; ++c) out[r * Co + c] += bv[static_cast<std::size_t>(c)];
    }
  }

  Shape oshape = batched ? Shape{B, Ho, Wo, Co} : Shape{Ho, Wo, Co};
  std::vector<typename Tensor<T>::NodePtr> parents{x.node(), weight.node()};
  if (has_bias) parents.push_back(bias.node());
  return make_result<T>(
      oshape, std::move(out), std::move(parents),
      [=, cols = std::move(cols)](Node<T>& self) {
        Node<T>& px = *self.parents[0];
        Node<T>& pw = *self.parents[1];
        const auto R = static_cast<Eigen::Index>(rows);
        const auto P = static_cast<Eigen::Index>(patch);
        ConstMatMap<T> G(self.grad.data(), R, Co);
        if (has_bias) {
          Node<T>& pb = *self.parents[2];
          if (pb.requires_grad) {
            auto& gb = pb.ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
              for (int c = 0; c < Co; ++c) gb[static_cast<std::size_t>(c)] += self.grad[r * Co + c];
          }
        }
        if (pw.requires_grad) {
          ConstMatMap<T> A(pointwise ? px.values.data() : cols.data(), R, P);
          MatMap<T> GW(pw.ensure_grad().data(), P, Co);
          GW.noalias() += A.transpose() * G;
        }
        if (px.requires_grad) {
          ConstMatMap<T> Wm(pw.values.data(), P, Co);
          auto& gx = px.ensure_grad();
          if (pointwise) {
            MatMap<T> GX(gx.data(), R, P);
            GX.noalias() += G * Wm.transpose();
            return;
          }
          std::vector<T> gcols(rows * patch);
          MatMap<T> GC(gcols.data(), R, P);
          GC.noalias() = G * Wm.transpose();
          for (int b = 0; b < B; ++b)
            for (int oy = 0; oy < Ho; ++oy)
              for (int ox = 0; ox < Wo; ++ox) {
                const T* src = gcols.data() + ((static_cast<std::size_t>(b) * Ho + oy) * Wo + ox) * patch;
                for (int ky = 0; ky < kh; ++ky) {
                  const int iy = oy * stride - padding + ky;
                  if (iy < 0 || iy >= H) continue;
                  for (int kx = 0; kx < kw; ++kx) {
                    const int ix = ox * stride - padding + kx;
                    if (ix < 0 || ix >= W) continue;
                    T* dst = gx.data() + ((static_cast<std::size_t>(b) * H + iy) * W + ix) * Ci;
                    const T* s = src + (static_cast<std::size_t>(ky) * kw + kx) * Ci;
                    for (int c = 0; c < Ci; ++c) dst[c] += s[c];
                  }
                }
              }
        }
      });
}

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, int factor) {
  if (x.rank() < 3) throw ShapeError("upsample_nearest needs [.., H, W, C], got " + to_string(x.shape()));
  if (factor < 1) throw ShapeError("upsample factor must be >= 1");
  const int H = x.dim(-3), W = x.dim(-2), C = x.dim(-1);
  const std::size_t lead = x.size() / (static_cast<std::size_t>(H) * W * C);
  Shape oshape = x.shape();
  oshape[oshape.size() - 3] = H * factor;
  oshape[oshape.size() - 2] = W * factor;
  const int Ho = H * factor, Wo = W * factor;
  const auto xv = x.values();
  std::vector<T> out(lead * static_cast<std::size_t>(Ho) * Wo * C);
  for (std::size_t l = 0; l < lead; ++l)
    for (int y = 0; y < Ho; ++y)
      for (int xx = 0; xx < Wo; ++xx) {
        const T* src = xv.data() + ((l * H + static_cast<std::size_t>(y / factor)) * W + xx / factor) * C;
        std::copy(src, src + C, out.data() + ((l * Ho + static_cast<std::size_t>(y)) * Wo + xx) * C);
      }
  return make_result<T>(oshape, std::move(out), {x.node()}, [=](Node<T>& self) {
    auto& gx = self.parents[0]->ensure_grad();
    for (std::size_t l = 0; l < lead; ++l)
      for (int y = 0; y < Ho; ++y)
        for (int xx = 0; xx < Wo; ++xx) {
          const T* src = self.grad.data() + ((l * Ho + static_cast<std::size_t>(y)) * Wo + xx) * C;
          T* dst = gx.data() + ((l * H + static_cast<std::size_t>(y / factor)) * W + xx / factor) * C;
          for (int c = 0; c < C; ++c) dst[c] += src[c];
        }
  });
}

// ---------------------------------------------------------------------------
// Reductions and layout

template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& a, const Shape& shape) {
  const auto st = broadcast_strides(a.shape(), shape);
  const std::vector<std::size_t> zero(shape.size(), 0);
  const auto av = a.values();
  std::vector<T> out(numel(shape));
  for_each_broadcast(shape, st, zero, [&](std::size_t o, std::size_t i, std::size_t) { out[o] = av[i]; });
  return make_result<T>(shape, std::move(out), {a.node()}, [](Node<T>& self) {
    Node<T>& p = *self.parents[0];
    reduce_into<T>(self.grad, self.shape, p.ensure_grad(), p.shape);
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a, std::vector<int> axes, bool keepdim) {
  const int r = a.rank();
  Shape kept = a.shape();
  std::vector<bool> reduced(static_cast<std::size_t>(r), false);
  for (int& ax : axes) {
    ax = normalize_axis(ax, r);
    reduced[static_cast<std::size_t>(ax)] = true;
    kept[static_cast<std::size_t>(ax)] = 1;
  }
  std::vector<T> out(numel(kept), T(0));
  reduce_into<T>(a.values(), a.shape(), out, kept);
  Shape oshape;
  if (keepdim) {
    oshape = kept;
  } else {
    for (int i = 0; i < r; ++i)
      if (!reduced[static_cast<std::size_t>(i)]) oshape.push_back(a.shape()[static_cast<std::size_t>(i)]);
  }
  return make_result<T>(oshape, std::move(out), {a.node()}, [kept](Node<T>& self) {
    Node<T>& p = *self.parents[0];
    auto& gp = p.ensure_grad();
    const auto st = broadcast_strides(kept, p.shape);
    const std::vector<std::size_t> zero(p.shape.size(), 0);
    for_each_broadcast(p.shape, st, zero,
                       [&](std::size_t o, std::size_t k, std::size_t) { gp[o] += self.grad[k]; });
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a, std::vector<int> axes, bool keepdim) {
  std::size_t count = 1;
  for (int ax : axes) count *= static_cast<std::size_t>(a.dim(ax));
  if (count == 0) throw ShapeError("mean over empty extent");
  return mul_scalar(sum(a, std::move(axes), keepdim), T(1) / static_cast<T>(count));
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  std::vector<int> axes(static_cast<std::size_t>(a.rank()));
  std::iota(axes.begin(), axes.end(), 0);
  return sum(a, axes, false);
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  if (a.size() == 0) throw ShapeError("mean of empty tensor");
  return mul_scalar(sum_all(a), T(1) / static_cast<T>(a.size()));
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const int r = parts[0].rank();
  const int ax = normalize_axis(axis, r);
  Shape oshape = parts[0].shape();
  oshape[static_cast<std::size_t>(ax)] = 0;
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (static_cast<int>(s.size()) != r) throw ShapeError("concat rank mismatch");
    for (int i = 0; i < r; ++i) {
      if (i != ax && s[static_cast<std::size_t>(i)] != parts[0].shape()[static_cast<std::size_t>(i)]) {
        throw ShapeError("concat shape mismatch " + to_string(parts[0].shape()) + " vs " + to_string(s));
      }
    }
    oshape[static_cast<std::size_t>(ax)] += s[static_cast<std::size_t>(ax)];
    extents.push_back(static_cast<std::size_t>(s[static_cast<std::size_t>(ax)]));
  }
  const AxisSplit sp = split_axis(oshape, ax);
  std::vector<T> out(numel(oshape));
  std::size_t offset = 0;
  std::vector<typename Tensor<T>::NodePtr> nodes;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const auto pv = parts[pi].values();
    const std::size_t chunk = extents[pi] * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy(pv.data() + o * chunk, pv.data() + (o + 1) * chunk,
                out.data() + o * sp.n * sp.inner + offset * sp.inner);
    }
    offset += extents[pi];
    nodes.push_back(parts[pi].node());
  }
  return make_result<T>(oshape, std::move(out), std::move(nodes), [sp, extents](Node<T>& self) {
    std::size_t off = 0;
    for (std::size_t pi = 0; pi < self.parents.size(); ++pi) {
      Node<T>& p = *self.parents[pi];
      const std::size_t chunk = extents[pi] * sp.inner;
      if (p.requires_grad) {
        auto& gp = p.ensure_grad();
        for (std::size_t o = 0; o < sp.outer; ++o) {
          const T* src = self.grad.data() + o * sp.n * sp.inner + off * sp.inner;
          for (std::size_t i = 0; i < chunk; ++i) gp[o * chunk + i] += src[i];
        }
      }
      off += extents[pi];
    }
  });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& order) {
  const int r = a.rank();
  if (static_cast<int>(order.size()) != r) throw ShapeError("permute order rank mismatch");
  std::vector<bool> seen(static_cast<std::size_t>(r), false);
  for (int o : order) {
    if (o < 0 || o >= r || seen[static_cast<std::size_t>(o)]) throw ShapeError("permute order is not a permutation");
    seen[static_cast<std::size_t>(o)] = true;
  }
  const auto in_st = contiguous_strides(a.shape());
  Shape oshape(static_cast<std::size_t>(r));
  std::vector<std::size_t> st(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    oshape[static_cast<std::size_t>(i)] = a.shape()[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
    st[static_cast<std::size_t>(i)] = in_st[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
  }
  const std::vector<std::size_t> zero(static_cast<std::size_t>(r), 0);
  const auto av = a.values();
  std::vector<T> out(av.size());
  for_each_broadcast(oshape, st, zero, [&](std::size_t o, std::size_t i, std::size_t) { out[o] = av[i]; });
  return make_result<T>(oshape, std::move(out), {a.node()}, [st](Node<T>& self) {
    auto& gp = self.parents[0]->ensure_grad();
    const std::vector<std::size_t> z(st.size(), 0);
    for_each_broadcast(self.shape, st, z, [&](std::size_t o, std::size_t i, std::size_t) { gp[i] += self.grad[o]; });
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  const int r = a.rank();
  if (r < 2) throw ShapeError("transpose needs rank >= 2");
  std::vector<int> order(static_cast<std::size_t>(r));
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[static_cast<std::size_t>(r - 1)], order[static_cast<std::size_t>(r - 2)]);
  return permute(a, order);
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  int infer = -1;
  std::size_t known = 1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape allows one -1 extent");
      infer = static_cast<int>(i);
    } else {
      known *= static_cast<std::size_t>(shape[i]);
    }
  }
  if (infer >= 0 && known > 0) shape[static_cast<std::size_t>(infer)] = static_cast<int>(a.size() / known);
  if (numel(shape) != a.size()) {
    throw ShapeError("cannot reshape " + to_string(a.shape()) + " to " + to_string(shape));
  }
  std::vector<T> out(a.values().begin(), a.values().end());
  return make_result<T>(shape, std::move(out), {a.node()}, [](Node<T>& self) {
    auto& gp = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, int axis, int start, int length) {
  const int ax = normalize_axis(axis, a.rank());
  const int extent = a.shape()[static_cast<std::size_t>(ax)];
  if (start < 0 || length < 0 || start + length > extent) {
    throw ShapeError("slice [" + std::to_string(start) + ", +" + std::to_string(length) + ") out of range for " +
                     to_string(a.shape()));
  }
  std::vector<int> idx(static_cast<std::size_t>(length));
  std::iota(idx.begin(), idx.end(), start);
  return index_select(a, ax, std::span<const int>(idx));
}

template <typename T>
Tensor<T> index_select(const Tensor<T>& a, int axis, std::span<const int> indices) {
  const int ax = normalize_axis(axis, a.rank());
  const AxisSplit sp = split_axis(a.shape(), ax);
  for (int i : indices) {
    if (i < 0 || static_cast<std::size_t>(i) >= sp.n) {
      throw ShapeError("index " + std::to_string(i) + " out of range for axis " + std::to_string(ax) + " of " +
                       to_string(a.shape()));
    }
  }
  Shape oshape = a.shape();
  oshape[static_cast<std::size_t>(ax)] = static_cast<int>(indices.size());
  const std::size_t m = indices.size();
  const auto av = a.values();
  std::vector<T> out(sp.outer * m * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < m; ++k) {
      const T* src = av.data() + (o * sp.n + static_cast<std::size_t>(indices[k])) * sp.inner;
      std::copy(src, src + sp.inner, out.data() + (o * m + k) * sp.inner);
    }
  std::vector<int> idx(indices.begin(), indices.end());
  return make_result<T>(oshape, std::move(out), {a.node()}, [sp, idx = std::move(idx)](Node<T>& self) {
    auto& gp = self.parents[0]->ensure_grad();
    const std::size_t mm = idx.size();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t k = 0; k < mm; ++k) {
        const T* src = self.grad.data() + (o * mm + k) * sp.inner;
        T* dst = gp.data() + (o * sp.n + static_cast<std::size_t>(idx[k])) * sp.inner;
        for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
      }
  });
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids) {
  if (table.rank() != 2) throw ShapeError("embedding table must be [V, D], got " + to_string(table.shape()));
  return index_select(table, 0, ids);
}

template <typename T>
Tensor<T> masked_fill(const Tensor<T>& a, std::span<const std::uint8_t> mask, const Shape& mask_shape, T value) {
  if (numel(mask_shape) != mask.size()) throw ShapeError("masked_fill mask size does not match its shape");
  const auto st = broadcast_strides(mask_shape, a.shape());
  const std::vector<std::size_t> zero(a.shape().size(), 0);
  const auto av = a.values();
  std::vector<T> out(av.size());
  std::vector<std::uint8_t> hit(av.size(), 0);
  for_each_broadcast(a.shape(), st, zero, [&](std::size_t o, std::size_t m, std::size_t) {
    hit[o] = mask[m] != 0;
    out[o] = hit[o] ? value : av[o];
  });
  return make_result<T>(a.shape(), std::move(out), {a.node()}, [hit = std::move(hit)](Node<T>& self) {
    auto& gp = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < gp.size(); ++i)
      if (!hit[i]) gp[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Dispatch

const char* op_name(Op op) {
  switch (op) {
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kDiv: return "div";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSigmoid: return "sigmoid";
    case Op::kRelu: return "relu";
    case Op::kMatmul: return "matmul";
    case Op::kSoftmax: return "softmax";
    case Op::kLayerNorm: return "layer_norm";
    case Op::kConv2d: return "conv2d";
    case Op::kUpsampleNearest: return "upsample_nearest";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
    case Op::kConcat: return "concat";
    case Op::kTranspose: return "transpose";
    case Op::kReshape: return "reshape";
    case Op::kEmbedding: return "embedding";
    case Op::kMaskedFill: return "masked_fill";
  }
  return "unknown";
}

template <typename T>
Tensor<T> evaluate(Op op, const std::vector<Tensor<T>>& in, const OpAttrs& at) {
  auto need = [&](std::size_t lo, std::size_t hi) {
    if (in.size() < lo || in.size() > hi) {
      throw ShapeError(std::string(op_name(op)) + ": wrong number of inputs (" + std::to_string(in.size()) + ")");
    }
  };
  switch (op) {
    case Op::kAdd: need(2, 2); return add(in[0], in[1]);
    case Op::kSub: need(2, 2); return sub(in[0], in[1]);
    case Op::kMul: need(2, 2); return mul(in[0], in[1]);
    case Op::kDiv: need(2, 2); return div(in[0], in[1]);
    case Op::kExp: need(1, 1); return exp(in[0]);
    case Op::kLog: need(1, 1); return log(in[0]);
    case Op::kSigmoid: need(1, 1); return sigmoid(in[0]);
    case Op::kRelu: need(1, 1); return relu(in[0]);
    case Op::kMatmul: need(2, 2); return matmul(in[0], in[1]);
    case Op::kSoftmax: need(1, 1); return softmax(in[0], at.axis);
    case Op::kLayerNorm: need(3, 3); return layer_norm(in[0], in[1], in[2]);
    case Op::kConv2d: need(2, 3); return conv2d(in[0], in[1], in.size() == 3 ? in[2] : Tensor<T>{}, at.stride, at.padding);
    case Op::kUpsampleNearest: need(1, 1); return upsample_nearest(in[0], at.factor);
    case Op::kSum: need(1, 1); return sum(in[0], at.axes, at.keepdim);
    case Op::kMean: need(1, 1); return mean(in[0], at.axes, at.keepdim);
    case Op::kConcat: need(1, in.size() == 0 ? 1 : in.size()); return concat(in, at.axis);
    case Op::kTranspose: need(1, 1); return at.order.empty() ? transpose(in[0]) : permute(in[0], at.order);
    case Op::kReshape: need(1, 1); return reshape(in[0], at.shape);
    case Op::kEmbedding: need(1, 1); return embedding(in[0], std::span<const int>(at.indices));
    case Op::kMaskedFill:
      need(1, 1);
      return masked_fill(in[0], std::span<const std::uint8_t>(at.mask), at.mask_shape, static_cast<T>(at.fill));
  }
  throw ShapeError("unknown op");
}

#define SPOTTER_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                               \
  template Tensor<T> mul_scalar(const Tensor<T>&, T);                                               \
  template Tensor<T> neg(const Tensor<T>&);                                                         \
  template Tensor<T> exp(const Tensor<T>&);                                                         \
  template Tensor<T> log(const Tensor<T>&);                                                         \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                     \
  template Tensor<T> relu(const Tensor<T>&);                                                        \
  template Tensor<T> pow_scalar(const Tensor<T>&, T);                                               \
  template Tensor<T> clamp(const Tensor<T>&, T, T);                                                 \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> softmax(const Tensor<T>&, int);                                                \
  template Tensor<T> log_softmax(const Tensor<T>&, int);                                            \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);      \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);        \
  template Tensor<T> upsample_nearest(const Tensor<T>&, int);                                       \
  template Tensor<T> sum(const Tensor<T>&, std::vector<int>, bool);                                 \
  template Tensor<T> mean(const Tensor<T>&, std::vector<int>, bool);                                \
  template Tensor<T> sum_all(const Tensor<T>&);                                                     \
  template Tensor<T> mean_all(const Tensor<T>&);                                                    \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                                    \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<int>&);                            \
  template Tensor<T> transpose(const Tensor<T>&);                                                   \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                              \
  template Tensor<T> broadcast_to(const Tensor<T>&, const Shape&);                                  \
  template Tensor<T> slice(const Tensor<T>&, int, int, int);                                        \
  template Tensor<T> index_select(const Tensor<T>&, int, std::span<const int>);                     \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const int>);                             \
  template Tensor<T> masked_fill(const Tensor<T>&, std::span<const std::uint8_t>, const Shape&, T); \
  template Tensor<T> evaluate(Op, const std::vector<Tensor<T>>&, const OpAttrs&);

SPOTTER_INSTANTIATE_OPS(float)
SPOTTER_INSTANTIATE_OPS(double)

}  // namespace spotter::diff
