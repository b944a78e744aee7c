#pragma once

#include "laf/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace laf {

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.ndim() == 2 && b.ndim() == 2, "matmul: operands must be matrices");
  check(a.cols() == b.rows(), "matmul: inner dimensions disagree " + shape_str(a.shape()) +
                                  " x " + shape_str(b.shape()));
  Tensor<T> c({a.rows(), b.cols()});
  c.matrix().noalias() = a.matrix() * b.matrix();
  return c;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  check(a.ndim() == 2, "transpose: not a matrix");
  Tensor<T> t({a.cols(), a.rows()});
  t.matrix() = a.matrix().transpose();
  return t;
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.same_shape(b), "add: shape mismatch");
  Tensor<T> c(a.shape());
  c.flat() = a.flat() + b.flat();
  return c;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.same_shape(b), "sub: shape mismatch");
  Tensor<T> c(a.shape());
  c.flat() = a.flat() - b.flat();
  return c;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.same_shape(b), "mul: shape mismatch");
  Tensor<T> c(a.shape());
  c.flat() = a.flat() * b.flat();
  return c;
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.same_shape(b), "div: shape mismatch");
  Tensor<T> c(a.shape());
  c.flat() = a.flat() / b.flat();
  return c;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> c(a.shape());
  c.flat() = a.flat() * s;
  return c;
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  Tensor<T> c(a.shape());
  c.flat() = a.flat() + s;
  return c;
}

template <class T>
Tensor<T> clamp_min(const Tensor<T>& a, T lo) {
  Tensor<T> c(a.shape());
  c.flat() = a.flat().max(lo);
  return c;
}

template <class T>
Tensor<T> abs(const Tensor<T>& a) {
  Tensor<T> c(a.shape());
  c.flat() = a.flat().abs();
  return c;
}

// ---------------------------------------------------------------------------
// Row-vector broadcasts over token matrices [N×C]
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
  check(x.ndim() == 2 && v.size() == x.cols(), "add_rowvec: vector length != C");
  Tensor<T> c(x.shape());
  c.matrix() = x.matrix().rowwise() + v.as_matrix(1, v.size()).row(0);
  return c;
}

template <class T>
Tensor<T> mul_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
  check(x.ndim() == 2 && v.size() == x.cols(), "mul_rowvec: vector length != C");
  Tensor<T> c(x.shape());
  c.matrix() = x.matrix().array().rowwise() * v.as_matrix(1, v.size()).row(0).array();
  return c;
}

// Divide each row i of x by d[i].
template <class T>
Tensor<T> div_colvec(const Tensor<T>& x, const Tensor<T>& d) {
  check(x.ndim() == 2 && d.size() == x.rows(), "div_colvec: vector length != N");
  Tensor<T> c(x.shape());
  c.matrix() = x.matrix().array().colwise() / d.as_matrix(d.size(), 1).col(0).array();
  return c;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  Tensor<T> s({1});
  s[0] = x.flat().sum();
  return s;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  Tensor<T> s({1});
  s[0] = x.flat().sum() / static_cast<T>(x.size());
  return s;
}

template <class T>
Tensor<T> col_sum(const Tensor<T>& x) {
  check(x.ndim() == 2, "col_sum: not a matrix");
  Tensor<T> s({x.cols()});
  Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(s.data(), x.cols()) = x.matrix().colwise().sum();
  return s;
}

template <class T>
Tensor<T> row_sum(const Tensor<T>& x) {
  check(x.ndim() == 2, "row_sum: not a matrix");
  Tensor<T> s({x.rows()});
  Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(s.data(), x.rows()) = x.matrix().rowwise().sum();
  return s;
}

// ---------------------------------------------------------------------------
// Activations (elementwise)
// ---------------------------------------------------------------------------

template <class T>
T gelu_scalar(T x) {
  // Exact erf form.
  return T(0.5) * x * (T(1) + static_cast<T>(std::erf(static_cast<double>(x) / std::sqrt(2.0))));
}

template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> c(x.shape());
  for (Index i = 0; i < x.size(); ++i) c[i] = gelu_scalar(x[i]);
  return c;
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> c(x.shape());
  c.flat() = x.flat().max(T(0));
  return c;
}

template <class T>
Tensor<T> elu(const Tensor<T>& x) {
  Tensor<T> c(x.shape());
  for (Index i = 0; i < x.size(); ++i) {
    const T v = x[i];
    c[i] = v > T(0) ? v : static_cast<T>(std::expm1(static_cast<double>(v)));
  }
  return c;
}

// ψ of the rank-enhanced attention: strictly positive for finite inputs.
template <class T>
Tensor<T> one_plus_elu(const Tensor<T>& x) {
  Tensor<T> c = elu(x);
  c.flat() += T(1);
  return c;
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> c(x.shape());
  for (Index i = 0; i < x.size(); ++i)
    c[i] = static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(x[i]))));
  return c;
}

template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  check(x.ndim() == 2, "softmax_rows: not a matrix");
  Tensor<T> c(x.shape());
  for (Index i = 0; i < x.rows(); ++i) {
    const T m = x.matrix().row(i).maxCoeff();
    T z = T(0);
    for (Index j = 0; j < x.cols(); ++j) {
      const T e = static_cast<T>(std::exp(static_cast<double>(x(i, j) - m)));
      c(i, j) = e;
      z += e;
    }
    for (Index j = 0; j < x.cols(); ++j) c(i, j) /= z;
  }
  return c;
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

// Per-token normalization over channels (biased variance).
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-6)) {
  check(x.ndim() == 2, "layer_norm: not a token matrix");
  const Index c = x.cols();
  check(gamma.size() == c && beta.size() == c, "layer_norm: affine params length != C");
  Tensor<T> y(x.shape());
  for (Index i = 0; i < x.rows(); ++i) {
    T mu = T(0);
    for (Index j = 0; j < c; ++j) mu += x(i, j);
    mu /= static_cast<T>(c);
    T var = T(0);
    for (Index j = 0; j < c; ++j) {
      const T d = x(i, j) - mu;
      var += d * d;
    }
    var /= static_cast<T>(c);
    const T inv = T(1) / static_cast<T>(std::sqrt(static_cast<double>(var + eps)));
    for (Index j = 0; j < c; ++j) y(i, j) = (x(i, j) - mu) * inv * gamma[j] + beta[j];
  }
  return y;
}

// ---------------------------------------------------------------------------
// Spatial ops on raster token matrices (N = H·W)
// ---------------------------------------------------------------------------

inline void check_spatial(Index n, Index h, Index w, const char* who) {
  check(n == h * w, std::string(who) + ": token count != H*W");
}

// 1×1 convolution: a per-pixel linear map, identical to matmul on the token view.
template <class T>
Tensor<T> conv_pointwise(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  Tensor<T> y = matmul(x, w);
  if (bias.size() > 0) y = add_rowvec(y, bias);
  return y;
}

// Depthwise K×K correlation with zero ("same") padding; no cross-channel mixing.
// k has shape [K, K, C]; bias may be empty.
template <class T>
Tensor<T> conv_depthwise(const Tensor<T>& x, Index h, Index w, const Tensor<T>& k,
                         const Tensor<T>& bias) {
  check(x.ndim() == 2, "conv_depthwise: not a token matrix");
  check_spatial(x.rows(), h, w, "conv_depthwise");
  check(k.ndim() == 3 && k.dim(0) == k.dim(1), "conv_depthwise: kernel must be [K,K,C]");
  const Index kk = k.dim(0);
  const Index c = x.cols();
  check(kk % 2 == 1, "conv_depthwise: kernel size must be odd");
  check(k.dim(2) == c, "conv_depthwise: kernel channels != C");
  if (bias.size() > 0) check(bias.size() == c, "conv_depthwise: bias length != C");
  const Index p = kk / 2;
  Tensor<T> y({h * w, c});
  for (Index yy = 0; yy < h; ++yy) {
    for (Index xx = 0; xx < w; ++xx) {
      T* out = &y(yy * w + xx, 0);
      for (Index ky = 0; ky < kk; ++ky) {
        const Index sy = yy + ky - p;
        if (sy < 0 || sy >= h) continue;
        for (Index kx = 0; kx < kk; ++kx) {
          const Index sx = xx + kx - p;
          if (sx < 0 || sx >= w) continue;
          const T* in = &x(sy * w + sx, 0);
          const T* kp = k.data() + (ky * kk + kx) * c;
          for (Index ch = 0; ch < c; ++ch) out[ch] += in[ch] * kp[ch];
        }
      }
      if (bias.size() > 0)
        for (Index ch = 0; ch < c; ++ch) out[ch] += bias[ch];
    }
  }
  return y;
}

// Zero-padded patch extraction: output [N × K·K·C], column (ky·K+kx)·C + c.
// conv with a dense [K,K,Cin,Cout] kernel is matmul(im2col(x), kernel-as-matrix).
template <class T>
Tensor<T> im2col(const Tensor<T>& x, Index h, Index w, Index kk) {
  check(x.ndim() == 2, "im2col: not a token matrix");
  check_spatial(x.rows(), h, w, "im2col");
  check(kk % 2 == 1, "im2col: kernel size must be odd");
  const Index c = x.cols();
  const Index p = kk / 2;
  Tensor<T> out({h * w, kk * kk * c});
  for (Index yy = 0; yy < h; ++yy) {
    for (Index xx = 0; xx < w; ++xx) {
      T* dst = &out(yy * w + xx, 0);
      for (Index ky = 0; ky < kk; ++ky) {
        const Index sy = yy + ky - p;
        for (Index kx = 0; kx < kk; ++kx) {
          const Index sx = xx + kx - p;
          T* cell = dst + (ky * kk + kx) * c;
          if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;  // stays zero
          const T* src = &x(sy * w + sx, 0);
          std::copy(src, src + c, cell);
        }
      }
    }
  }
  return out;
}

// Dense K×K convolution (patch embedding and output heads). w is [K,K,Cin,Cout].
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, Index h, Index w, const Tensor<T>& kernel,
                 const Tensor<T>& bias) {
  check(kernel.ndim() == 4 && kernel.dim(0) == kernel.dim(1), "conv2d: kernel must be [K,K,Cin,Cout]");
  check(kernel.dim(2) == x.cols(), "conv2d: kernel Cin != C");
  const Index kk = kernel.dim(0);
  const Index cout = kernel.dim(3);
  Tensor<T> cols = im2col(x, h, w, kk);
  Tensor<T> wmat = kernel.reshape({kk * kk * kernel.dim(2), cout});
  Tensor<T> y = matmul(cols, wmat);
  if (bias.size() > 0) y = add_rowvec(y, bias);
  return y;
}

// Space-to-channel rearrangement. Output token matrix [(H/r)(W/r) × C·r²];
// output channel index = c·r² + dy·r + dx (row-major block order).
template <class T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, Index h, Index w, Index r) {
  check(x.ndim() == 2, "pixel_unshuffle: not a token matrix");
  check_spatial(x.rows(), h, w, "pixel_unshuffle");
  check(r >= 1 && h % r == 0 && w % r == 0, "pixel_unshuffle: r must divide H and W");
  const Index c = x.cols();
  const Index ho = h / r, wo = w / r;
  Tensor<T> y({ho * wo, c * r * r});
  for (Index yy = 0; yy < ho; ++yy)
    for (Index xx = 0; xx < wo; ++xx)
      for (Index dy = 0; dy < r; ++dy)
        for (Index dx = 0; dx < r; ++dx) {
          const T* src = &x((yy * r + dy) * w + (xx * r + dx), 0);
          T* dst = &y(yy * wo + xx, 0);
          for (Index ch = 0; ch < c; ++ch) dst[ch * r * r + dy * r + dx] = src[ch];
        }
  return y;
}

// Exact inverse of pixel_unshuffle. x is [(H·W) × C] with C divisible by r²;
// h, w are the *input* spatial dims; output is [(H·r)(W·r) × C/r²].
template <class T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, Index h, Index w, Index r) {
  check(x.ndim() == 2, "pixel_shuffle: not a token matrix");
  check_spatial(x.rows(), h, w, "pixel_shuffle");
  check(r >= 1 && x.cols() % (r * r) == 0, "pixel_shuffle: C must be divisible by r^2");
  const Index co = x.cols() / (r * r);
  const Index ho = h * r, wo = w * r;
  Tensor<T> y({ho * wo, co});
  for (Index yy = 0; yy < h; ++yy)
    for (Index xx = 0; xx < w; ++xx)
      for (Index dy = 0; dy < r; ++dy)
        for (Index dx = 0; dx < r; ++dx) {
          const T* src = &x(yy * w + xx, 0);
          T* dst = &y((yy * r + dy) * wo + (xx * r + dx), 0);
          for (Index ch = 0; ch < co; ++ch) dst[ch] = src[ch * r * r + dy * r + dx];
        }
  return y;
}

// Per-channel mean over all pixels; returns [C].
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  check(x.ndim() == 2 && x.rows() >= 1, "global_avg_pool: not a token matrix");
  Tensor<T> s = col_sum(x);
  s.flat() /= static_cast<T>(x.rows());
  return s;
}

// ---------------------------------------------------------------------------
// Channel concat / slice (skip fusion, gated split)
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.ndim() == 2 && b.ndim() == 2 && a.rows() == b.rows(), "concat_cols: row mismatch");
  Tensor<T> c({a.rows(), a.cols() + b.cols()});
  c.matrix().leftCols(a.cols()) = a.matrix();
  c.matrix().rightCols(b.cols()) = b.matrix();
  return c;
}

template <class T>
Tensor<T> slice_cols(const Tensor<T>& x, Index begin, Index len) {
  check(x.ndim() == 2 && begin >= 0 && len > 0 && begin + len <= x.cols(),
        "slice_cols: range out of bounds");
  Tensor<T> c({x.rows(), len});
  c.matrix() = x.matrix().middleCols(begin, len);
  return c;
}

}  // namespace laf
