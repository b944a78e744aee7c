#pragma once

#include "laf/ops.hpp"
#include "laf/tensor.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <deque>
#include <functional>
#include <random>
#include <utility>
#include <vector>

namespace laf {

// Tape-based reverse mode over the tensor primitives. A tape is single-threaded
// during record and backward; independent tapes may run concurrently. Ops on
// Var mirror the free functions in ops.hpp, so block/model forward code can be
// written once, generic over Tensor<double> or Var.

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;
  const Tensor<double>& value() const;
};

class Tape {
 public:
  struct Node {
    Tensor<double> value;
    Tensor<double> grad;
    std::function<void()> backprop;  // adds into parents' grads; null for leaves
  };

  Var leaf(Tensor<double> v) {
    nodes_.push_back(Node{std::move(v), {}, nullptr});
    Node& n = nodes_.back();
    n.grad = Tensor<double>::zeros(n.value.shape());
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  Var make(Tensor<double> v, std::function<void()> backprop) {
    nodes_.push_back(Node{std::move(v), {}, std::move(backprop)});
    Node& n = nodes_.back();
    n.grad = Tensor<double>::zeros(n.value.shape());
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  const Tensor<double>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  Tensor<double>& grad(int id) { return nodes_[static_cast<std::size_t>(id)].grad; }
  const Tensor<double>& grad(const Var& v) { return grad(v.id); }

  // Reverse sweep from a scalar loss. Creation order is a topological order,
  // so visiting nodes once in reverse id order implements the chain rule with
  // additive fan-out accumulation.
  void backward(const Var& loss) {
    check(loss.tape == this, "backward: loss lives on a different tape");
    Node& top = nodes_[static_cast<std::size_t>(loss.id)];
    check(top.value.size() == 1, "backward: loss must be scalar");
    top.grad[0] = 1.0;
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.backprop) n.backprop();
    }
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  std::deque<Node> nodes_;
};

inline const Tensor<double>& Var::value() const { return tape->value(id); }

namespace detail {
inline void acc(Tape& t, int id, const Tensor<double>& g) {
  Tensor<double>& dst = t.grad(id);
  dst.flat() += g.flat();
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Differentiable mirrors of the ops.hpp primitives
// ---------------------------------------------------------------------------

inline Var matmul(Var a, Var b) {
  Tape& t = *a.tape;
  Tensor<double> y = matmul(a.value(), b.value());
  return t.make(std::move(y), [&t, ai = a.id, bi = b.id, yi = (int)t.node_count()]() {
    const Tensor<double>& g = t.grad(yi);
    detail::acc(t, ai, matmul(g, transpose(t.value(bi))));
    detail::acc(t, bi, matmul(transpose(t.value(ai)), g));
  });
}

inline Var transpose(Var a) {
  Tape& t = *a.tape;
  return t.make(transpose(a.value()), [&t, ai = a.id, yi = (int)t.node_count()]() {
    detail::acc(t, ai, transpose(t.grad(yi)));
  });
}

inline Var add(Var a, Var b) {
  Tape& t = *a.tape;
  return t.make(add(a.value(), b.value()), [&t, ai = a.id, bi = b.id, yi = (int)t.node_count()]() {
    detail::acc(t, ai, t.grad(yi));
    detail::acc(t, bi, t.grad(yi));
  });
}

inline Var sub(Var a, Var b) {
  Tape& t = *a.tape;
  return t.make(sub(a.value(), b.value()), [&t, ai = a.id, bi = b.id, yi = (int)t.node_count()]() {
    const Tensor<double>& g = t.grad(yi);
    detail::acc(t, ai, g);
    t.grad(bi).flat() -= g.flat();
  });
}

inline Var mul(Var a, Var b) {
  Tape& t = *a.tape;
  return t.make(mul(a.value(), b.value()), [&t, ai = a.id, bi = b.id, yi = (int)t.node_count()]() {
    const Tensor<double>& g = t.grad(yi);
    detail::acc(t, ai, mul(g, t.value(bi)));
    detail::acc(t, bi, mul(g, t.value(ai)));
  });
}

inline Var div(Var a, Var b) {
  Tape& t = *a.tape;
  return t.make(div(a.value(), b.value()), [&t, ai = a.id, bi = b.id, yi = (int)t.node_count()]() {
    const Tensor<double>& g = t.grad(yi);
    const Tensor<double>& bv = t.value(bi);
    detail::acc(t, ai, div(g, bv));
    Tensor<double> gb = mul(g, t.value(yi));  // g * (a/b)
    gb.flat() /= bv.flat();
    t.grad(bi).flat() -= gb.flat();
  });
}

inline Var scale(Var a, double s) {
  Tape& t = *a.tape;
  return t.make(scale(a.value(), s), [&t, ai = a.id, s, yi = (int)t.node_count()]() {
    detail::acc(t, ai, scale(t.grad(yi), s));
  });
}

inline Var add_scalar(Var a, double s) {
  Tape& t = *a.tape;
  return t.make(add_scalar(a.value(), s), [&t, ai = a.id, yi = (int)t.node_count()]() {
    detail::acc(t, ai, t.grad(yi));
  });
}

// Clamp passes gradient through where unclamped, zero where clamped.
inline Var clamp_min(Var a, double lo) {
  Tape& t = *a.tape;
  return t.make(clamp_min(a.value(), lo), [&t, ai = a.id, lo, yi = (int)t.node_count()]() {
    const Tensor<double>& g = t.grad(yi);
    const Tensor<double>& av = t.value(ai);
    Tensor<double>& dst = t.grad(ai);
    for (Index i = 0; i < g.size(); ++i)
      if (av[i] > lo) dst[i] += g[i];
  });
}

// Subgradient at 0 is 0.
inline Var abs(Var a) {
  Tape& t = *a.tape;
  return t.make(abs(a.value()), [&t, ai = a.id, yi = (int)t.node_count()]() {
    const Tensor<double>& g = t.grad(yi);
    const Tensor<double>& av = t.value(ai);
    Tensor<double>& dst = t.grad(ai);
    for (Index i = 0; i < g.size(); ++i) {
      if (av[i] > 0) dst[i] += g[i];
      else if (av[i] < 0) dst[i] -= g[i];
    }
  });
}

inline Var add_rowvec(Var x, Var v) {
  Tape& t = *x.tape;
  return t.make(add_rowvec(x.value(), v.value()),
                [&t, xi = x.id, vi = v.id, yi = (int)t.node_count()]() {
    detail::acc(t, xi, t.grad(yi));
    detail::acc(t, vi, col_sum(t.grad(yi)));
  });
}

inline Var mul_rowvec(Var x, Var v) {
  Tape& t = *x.tape;
  return t.make(mul_rowvec(x.value(), v.value()),
                [&t, xi = x.id, vi = v.id, yi = (int)t.node_count()]() {
    const Tensor<double>& g = t.grad(yi);
    detail::acc(t, xi, mul_rowvec(g, t.value(vi)));
    detail::acc(t, vi, col_sum(mul(g, t.value(xi))));
  });
}

inline Var div_colvec(Var x, Var d) {
  Tape& t = *x.tape;
  return t.make(div_colvec(x.value(), d.value()),
                [&t, xi = x.id, di = d.id, yi = (int)t.node_count()]() {
    const Tensor<double>& g = t.grad(yi);
    const Tensor<double>& dv = t.value(di);
    detail::acc(t, xi, div_colvec(g, dv));
    Tensor<double> gd = row_sum(mul(g, t.value(yi)));  // Σ_j g·(x/d) per row
    gd.flat() /= dv.flat();
    t.grad(di).flat() -= gd.flat();
  });
}

inline Var sum(Var x) {
  Tape& t = *x.tape;
  return t.make(sum(x.value()), [&t, xi = x.id, yi = (int)t.node_count()]() {
    t.grad(xi).flat() += t.grad(yi)[0];
  });
}

inline Var mean(Var x) {
  Tape& t = *x.tape;
  const double n = static_cast<double>(x.value().size());
  return t.make(mean(x.value()), [&t, xi = x.id, n, yi = (int)t.node_count()]() {
    t.grad(xi).flat() += t.grad(yi)[0] / n;
  });
}

inline Var col_sum(Var x) {
  Tape& t = *x.tape;
  return t.make(col_sum(x.value()), [&t, xi = x.id, yi = (int)t.node_count()]() {
    const Tensor<double>& g = t.grad(yi);
    t.grad(xi).matrix().rowwise() += g.as_matrix(1, g.size()).row(0);
  });
}

inline Var row_sum(Var x) {
  Tape& t = *x.tape;
  return t.make(row_sum(x.value()), [&t, xi = x.id, yi = (int)t.node_count()]() {
    const Tensor<double>& g = t.grad(yi);
    t.grad(xi).matrix().colwise() += g.as_matrix(g.size(), 1).col(0);
  });
}

inline Var gelu(Var x) {
  Tape& t = *x.tape;
  return t.make(gelu(x.value()), [&t, xi = x.id, yi = (int)t.node_count()]() {
    const Tensor<double>& g = t.grad(yi);
    const Tensor<double>& xv = t.value(xi);
    Tensor<double>& dst = t.grad(xi);
    constexpr double inv_sqrt2pi = 0.3989422804014327;
    for (Index i = 0; i < g.size(); ++i) {
      const double v = xv[i];
      const double phi = 0.5 * (1.0 + std::erf(v / std::sqrt(2.0)));
      const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
      dst[i] += g[i] * (phi + v * pdf);
    }
  });
}

inline Var relu(Var x) {
  Tape& t = *x.tape;
  return t.make(relu(x.value()), [&t, xi = x.id, yi = (int)t.node_count()]() {
    const Tensor<double>& g = t.grad(yi);
    const Tensor<double>& xv = t.value(xi);
    Tensor<double>& dst = t.grad(xi);
    for (Index i = 0; i < g.size(); ++i)
      if (xv[i] > 0) dst[i] += g[i];
  });
}

namespace detail {
inline std::function<void()> elu_backprop(Tape& t, int xi, int yi) {
  return [&t, xi, yi]() {
    const Tensor<double>& g = t.grad(yi);
    const Tensor<double>& xv = t.value(xi);
    Tensor<double>& dst = t.grad(xi);
    for (Index i = 0; i < g.size(); ++i)
      dst[i] += g[i] * (xv[i] > 0 ? 1.0 : std::exp(xv[i]));
  };
}
}  // namespace detail

inline Var elu(Var x) {
  Tape& t = *x.tape;
  return t.make(elu(x.value()), detail::elu_backprop(t, x.id, (int)t.node_count()));
}

inline Var one_plus_elu(Var x) {
  Tape& t = *x.tape;
  return t.make(one_plus_elu(x.value()), detail::elu_backprop(t, x.id, (int)t.node_count()));
}

inline Var sigmoid(Var x) {
  Tape& t = *x.tape;
  return t.make(sigmoid(x.value()), [&t, xi = x.id, yi = (int)t.node_count()]() {
    const Tensor<double>& g = t.grad(yi);
    const Tensor<double>& s = t.value(yi);
    Tensor<double>& dst = t.grad(xi);
    for (Index i = 0; i < g.size(); ++i) dst[i] += g[i] * s[i] * (1.0 - s[i]);
  });
}

inline Var softmax_rows(Var x) {
  Tape& t = *x.tape;
  return t.make(softmax_rows(x.value()), [&t, xi = x.id, yi = (int)t.node_count()]() {
    const Tensor<double>& g = t.grad(yi);
    const Tensor<double>& y = t.value(yi);
    Tensor<double>& dst = t.grad(xi);
    for (Index i = 0; i < g.rows(); ++i) {
      double dot = 0;
      for (Index j = 0; j < g.cols(); ++j) dot += g(i, j) * y(i, j);
      for (Index j = 0; j < g.cols(); ++j) dst(i, j) += y(i, j) * (g(i, j) - dot);
    }
  });
}

inline Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-6) {
  Tape& t = *x.tape;
  const Tensor<double>& xv = x.value();
  const Index n = xv.rows(), c = xv.cols();
  // Cache normalized values and inverse stds for the backward pass.
  auto xhat = std::make_shared<Tensor<double>>(xv.shape());
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n));
  Tensor<double> y(xv.shape());
  for (Index i = 0; i < n; ++i) {
    double mu = 0;
    for (Index j = 0; j < c; ++j) mu += xv(i, j);
    mu /= static_cast<double>(c);
    double var = 0;
    for (Index j = 0; j < c; ++j) {
      const double d = xv(i, j) - mu;
      var += d * d;
    }
    var /= static_cast<double>(c);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<std::size_t>(i)] = inv;
    for (Index j = 0; j < c; ++j) {
      const double xh = (xv(i, j) - mu) * inv;
      (*xhat)(i, j) = xh;
      y(i, j) = xh * gamma.value()[j] + beta.value()[j];
    }
  }
  return t.make(std::move(y), [&t, xi = x.id, gi = gamma.id, bi = beta.id, xhat, inv_std,
                               yi = (int)t.node_count()]() {
    const Tensor<double>& g = t.grad(yi);
    const Tensor<double>& gam = t.value(gi);
    const Index n2 = g.rows(), c2 = g.cols();
    Tensor<double>& dx = t.grad(xi);
    Tensor<double>& dgamma = t.grad(gi);
    Tensor<double>& dbeta = t.grad(bi);
    for (Index i = 0; i < n2; ++i) {
      double m1 = 0, m2 = 0;  // mean(gy), mean(gy*xhat) over channels
      for (Index j = 0; j < c2; ++j) {
        const double gy = g(i, j) * gam[j];
        m1 += gy;
        m2 += gy * (*xhat)(i, j);
        dgamma[j] += g(i, j) * (*xhat)(i, j);
        dbeta[j] += g(i, j);
      }
      m1 /= static_cast<double>(c2);
      m2 /= static_cast<double>(c2);
      const double inv = (*inv_std)[static_cast<std::size_t>(i)];
      for (Index j = 0; j < c2; ++j) {
        const double gy = g(i, j) * gam[j];
        dx(i, j) += inv * (gy - m1 - (*xhat)(i, j) * m2);
      }
    }
  });
}

inline Var conv_depthwise(Var x, Index h, Index w, Var k, Var bias) {
  Tape& t = *x.tape;
  Tensor<double> y = conv_depthwise(x.value(), h, w, k.value(),
                                    bias.id >= 0 ? bias.value() : Tensor<double>{});
  const bool has_bias = bias.id >= 0;
  return t.make(std::move(y), [&t, xi = x.id, ki = k.id, bi = bias.id, h, w, has_bias,
                               yi = (int)t.node_count()]() {
    const Tensor<double>& g = t.grad(yi);
    const Tensor<double>& xv = t.value(xi);
    const Tensor<double>& kv = t.value(ki);
    const Index kk = kv.dim(0), c = xv.cols(), p = kk / 2;
    Tensor<double>& dx = t.grad(xi);
    Tensor<double>& dk = t.grad(ki);
    for (Index yy = 0; yy < h; ++yy)
      for (Index xx = 0; xx < w; ++xx) {
        const double* go = &g(yy * w + xx, 0);
        for (Index ky = 0; ky < kk; ++ky) {
          const Index sy = yy + ky - p;
          if (sy < 0 || sy >= h) continue;
          for (Index kx = 0; kx < kk; ++kx) {
            const Index sx = xx + kx - p;
            if (sx < 0 || sx >= w) continue;
            const double* in = &xv(sy * w + sx, 0);
            double* dxp = &dx(sy * w + sx, 0);
            const double* kp = kv.data() + (ky * kk + kx) * c;
            double* dkp = dk.data() + (ky * kk + kx) * c;
            for (Index ch = 0; ch < c; ++ch) {
              dxp[ch] += go[ch] * kp[ch];
              dkp[ch] += go[ch] * in[ch];
            }
          }
        }
      }
    if (has_bias) detail::acc(t, bi, col_sum(g));
  });
}

inline Var im2col(Var x, Index h, Index w, Index kk) {
  Tape& t = *x.tape;
  return t.make(im2col(x.value(), h, w, kk), [&t, xi = x.id, h, w, kk,
                                              yi = (int)t.node_count()]() {
    const Tensor<double>& g = t.grad(yi);
    Tensor<double>& dx = t.grad(xi);
    const Index c = dx.cols(), p = kk / 2;
    for (Index yy = 0; yy < h; ++yy)
      for (Index xx = 0; xx < w; ++xx) {
        const double* go = &g(yy * w + xx, 0);
        for (Index ky = 0; ky < kk; ++ky) {
          const Index sy = yy + ky - p;
          if (sy < 0 || sy >= h) continue;
          for (Index kx = 0; kx < kk; ++kx) {
            const Index sx = xx + kx - p;
            if (sx < 0 || sx >= w) continue;
            double* dxp = &dx(sy * w + sx, 0);
            const double* cell = go + (ky * kk + kx) * c;
            for (Index ch = 0; ch < c; ++ch) dxp[ch] += cell[ch];
          }
        }
      }
  });
}

inline Var pixel_unshuffle(Var x, Index h, Index w, Index r) {
  Tape& t = *x.tape;
  return t.make(pixel_unshuffle(x.value(), h, w, r), [&t, xi = x.id, h, w, r,
                                                      yi = (int)t.node_count()]() {
    detail::acc(t, xi, pixel_shuffle(t.grad(yi), h / r, w / r, r));
  });
}

inline Var pixel_shuffle(Var x, Index h, Index w, Index r) {
  Tape& t = *x.tape;
  return t.make(pixel_shuffle(x.value(), h, w, r), [&t, xi = x.id, h, w, r,
                                                    yi = (int)t.node_count()]() {
    detail::acc(t, xi, pixel_unshuffle(t.grad(yi), h * r, w * r, r));
  });
}

inline Var global_avg_pool(Var x) {
  Tape& t = *x.tape;
  const double n = static_cast<double>(x.value().rows());
  return t.make(global_avg_pool(x.value()), [&t, xi = x.id, n, yi = (int)t.node_count()]() {
    const Tensor<double>& g = t.grad(yi);
    t.grad(xi).matrix().rowwise() += (g.as_matrix(1, g.size()) / n).row(0);
  });
}

inline Var concat_cols(Var a, Var b) {
  Tape& t = *a.tape;
  const Index ca = a.value().cols();
  return t.make(concat_cols(a.value(), b.value()),
                [&t, ai = a.id, bi = b.id, ca, yi = (int)t.node_count()]() {
    const Tensor<double>& g = t.grad(yi);
    detail::acc(t, ai, slice_cols(g, 0, ca));
    detail::acc(t, bi, slice_cols(g, ca, g.cols() - ca));
  });
}

inline Var slice_cols(Var x, Index begin, Index len) {
  Tape& t = *x.tape;
  return t.make(slice_cols(x.value(), begin, len), [&t, xi = x.id, begin, len,
                                                    yi = (int)t.node_count()]() {
    t.grad(xi).matrix().middleCols(begin, len) += t.grad(yi).matrix();
  });
}

// Composites shared with the Tensor overloads by name.
inline Var conv_pointwise(Var x, Var w, Var bias) {
  Var y = matmul(x, w);
  if (bias.id >= 0) y = add_rowvec(y, bias);
  return y;
}

inline Var conv2d(Var x, Index h, Index w, Var kernel, Var bias) {
  const Tensor<double>& kv = kernel.value();
  check(kv.ndim() == 4 && kv.dim(0) == kv.dim(1), "conv2d: kernel must be [K,K,Cin,Cout]");
  const Index kk = kv.dim(0), cin = kv.dim(2), cout = kv.dim(3);
  Tape& t = *x.tape;
  // Reshape node so the kernel gradient lands back in [K,K,Cin,Cout].
  Var wmat = t.make(kv.reshape({kk * kk * cin, cout}), [&t, ki = kernel.id, yi = (int)t.node_count()]() {
    t.grad(ki).flat() += t.grad(yi).flat();
  });
  Var y = matmul(im2col(x, h, w, kk), wmat);
  if (bias.id >= 0) y = add_rowvec(y, bias);
  return y;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

struct GradReport {
  double max_rel_err = 0.0;
  double h = 1e-5;
  Index samples = 0;
  Index worst_input = -1;    // which input tensor
  Index worst_element = -1;  // flat element index within it
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;

  nlohmann::json to_json() const {
    return {{"max_rel_err", max_rel_err}, {"h", h},      {"samples", samples},
            {"worst_input", worst_input}, {"worst_element", worst_element},
            {"analytic", worst_analytic}, {"numeric", worst_numeric}};
  }
};

inline double rel_err(double a, double f) {
  return std::abs(a - f) / std::max({std::abs(a), std::abs(f), 1e-8});
}

// f maps (tape, leaf vars) to a scalar Var. Central differences on up to
// max_samples_per_input elements per input (0 = all). Callers are responsible
// for keeping sampled inputs away from activation kinks.
template <class F>
GradReport gradcheck_multi(F&& f, std::vector<Tensor<double>> inputs, double h = 1e-5,
                           Index max_samples_per_input = 0, std::uint64_t seed = 0) {
  GradReport report;
  report.h = h;

  Tape tape;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const auto& x : inputs) vars.push_back(tape.leaf(x));
  Var loss = f(tape, vars);
  check(loss.value().size() == 1, "gradcheck: f must be scalar-valued");
  check(loss.value().all_finite(), "gradcheck: non-finite loss");
  tape.backward(loss);
  std::vector<Tensor<double>> analytic;
  for (const auto& v : vars) analytic.push_back(tape.grad(v));

  auto eval = [&](const std::vector<Tensor<double>>& xs) {
    Tape t2;
    std::vector<Var> vs;
    for (const auto& x : xs) vs.push_back(t2.leaf(x));
    const double v = f(t2, vs).value().scalar();
    check(std::isfinite(v), "gradcheck: non-finite value during perturbation");
    return v;
  };

  std::mt19937_64 rng(seed);
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    const Index n = inputs[ti].size();
    std::vector<Index> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), Index(0));
    if (max_samples_per_input > 0 && n > max_samples_per_input) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(static_cast<std::size_t>(max_samples_per_input));
    }
    for (Index e : idx) {
      const double orig = inputs[ti][e];
      inputs[ti][e] = orig + h;
      const double fp = eval(inputs);
      inputs[ti][e] = orig - h;
      const double fm = eval(inputs);
      inputs[ti][e] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[ti][e];
      const double err = rel_err(a, numeric);
      ++report.samples;
      if (err > report.max_rel_err) {
        report.max_rel_err = err;
        report.worst_input = static_cast<Index>(ti);
        report.worst_element = e;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

template <class F>
GradReport gradcheck(F&& f, const Tensor<double>& x, double h = 1e-5,
                     Index max_samples = 0, std::uint64_t seed = 0) {
  return gradcheck_multi(
      [&f](Tape& t, std::vector<Var>& vs) { return f(t, vs[0]); },
      {x}, h, max_samples, seed);
}

// Resample entries of x that sit within `margin` of any kink location.
inline Tensor<double> away_from_kinks(Tensor<double> x, double margin,
                                      std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(2 * margin, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (Index i = 0; i < x.size(); ++i) {
    if (std::abs(x[i]) < margin) x[i] = (sign(rng) ? 1.0 : -1.0) * dist(rng);
  }
  return x;
}

}  // namespace laf
