#include "mrw/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace mrw {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

void require_rank(const Tensor& t, int rank, const char* who) {
  require(t.defined() && t.rank() == rank,
          std::string(who) + ": expected rank " + std::to_string(rank) + " tensor");
}

int64_t prod(const std::vector<int>& dims, size_t from, size_t to) {
  int64_t p = 1;
  for (size_t i = from; i < to; ++i) p *= dims[i];
  return p;
}

}  // namespace

// ---------------------------------------------------------------------------
// Convolution family
// ---------------------------------------------------------------------------

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
              int dilation, Padding padding, int groups) {
  require_rank(x, 3, "conv1d(x)");
  require_rank(w, 3, "conv1d(w)");
  require(stride >= 1 && dilation >= 1, "conv1d: stride and dilation must be >= 1");
  require(groups >= 1, "conv1d: groups must be >= 1");
  const int batch = x.dim(0), cin = x.dim(1), len = x.dim(2);
  const int cout = w.dim(0), cin_g = w.dim(1), kernel = w.dim(2);
  require(cin % groups == 0 && cout % groups == 0,
          "conv1d: channel counts must be divisible by groups");
  require(cin / groups == cin_g,
          "conv1d: weight shape " + shape_str(w.shape()) + " does not match input " +
              shape_str(x.shape()) + " with groups=" + std::to_string(groups));
  if (bias.defined()) {
    require_rank(bias, 1, "conv1d(bias)");
    require(bias.dim(0) == cout, "conv1d: bias length must equal output channels");
  }

  const int span = dilation * (kernel - 1) + 1;
  int lout = 0, pad_left = 0;
  if (padding == Padding::kValid) {
    require(span <= len, "conv1d: kernel span " + std::to_string(span) +
                             " exceeds input length " + std::to_string(len));
    lout = (len - span) / stride + 1;
  } else {
    lout = (len + stride - 1) / stride;
    const int total = std::max(0, (lout - 1) * stride + span - len);
    pad_left = (total + 1) / 2;
  }

  Tensor y({batch, cout, lout});
  const int cout_g = cout / groups;
  const double* xd = x.data();
  const double* wd = w.data();
  double* yd = y.data();

  for (int b = 0; b < batch; ++b) {
    for (int g = 0; g < groups; ++g) {
      for (int ocl = 0; ocl < cout_g; ++ocl) {
        const int oc = g * cout_g + ocl;
        double* yrow = yd + (static_cast<int64_t>(b) * cout + oc) * lout;
        if (bias.defined()) {
          const double bv = bias.data()[oc];
          for (int t = 0; t < lout; ++t) yrow[t] = bv;
        }
        for (int icl = 0; icl < cin_g; ++icl) {
          const int ic = g * cin_g + icl;
          const double* xrow = xd + (static_cast<int64_t>(b) * cin + ic) * len;
          const double* wrow = wd + (static_cast<int64_t>(oc) * cin_g + icl) * kernel;
          for (int k = 0; k < kernel; ++k) {
            const double wv = wrow[k];
            if (wv == 0.0) continue;
            const int off = k * dilation - pad_left;
            // restrict t so that t*stride + off lies inside [0, len)
            int t0 = 0;
            if (off < 0) t0 = (-off + stride - 1) / stride;
            int t1 = lout;
            if (off < len) {
              const int tmax = (len - 1 - off) / stride;
              t1 = std::min(lout, tmax + 1);
            } else {
              t1 = 0;
            }
            const double* xs = xrow + off;
            for (int t = t0; t < t1; ++t) yrow[t] += wv * xs[t * stride];
          }
        }
      }
    }
  }

  record_op({x, w, bias.defined() ? bias : Tensor()}, {y},
            [xi = x.impl(), wi = w.impl(), bi = bias.defined() ? bias.impl() : nullptr,
             yi = y.impl(), stride, dilation, pad_left, groups, batch, cin, len, cout,
             cin_g, cout_g, kernel, lout]() {
              const double* gy = yi->grad.data();
              const double* xd = xi->data.data();
              const double* wd = wi->data.data();
              const bool need_x = xi->requires_grad;
              const bool need_w = wi->requires_grad;
              if (need_x) xi->ensure_grad();
              if (need_w) wi->ensure_grad();
              if (bi && bi->requires_grad) {
                bi->ensure_grad();
                for (int b = 0; b < batch; ++b)
                  for (int oc = 0; oc < cout; ++oc) {
                    const double* gyr = gy + (static_cast<int64_t>(b) * cout + oc) * lout;
                    double s = 0.0;
                    for (int t = 0; t < lout; ++t) s += gyr[t];
                    bi->grad[oc] += s;
                  }
              }
              if (!need_x && !need_w) return;
              for (int b = 0; b < batch; ++b)
                for (int g = 0; g < groups; ++g)
                  for (int ocl = 0; ocl < cout_g; ++ocl) {
                    const int oc = g * cout_g + ocl;
                    const double* gyr = gy + (static_cast<int64_t>(b) * cout + oc) * lout;
                    for (int icl = 0; icl < cin_g; ++icl) {
                      const int ic = g * cin_g + icl;
                      const double* xrow = xd + (static_cast<int64_t>(b) * cin + ic) * len;
                      const double* wrow =
                          wd + (static_cast<int64_t>(oc) * cin_g + icl) * kernel;
                      double* gxrow = need_x
                                          ? xi->grad.data() +
                                                (static_cast<int64_t>(b) * cin + ic) * len
                                          : nullptr;
                      double* gwrow = need_w
                                          ? wi->grad.data() +
                                                (static_cast<int64_t>(oc) * cin_g + icl) *
                                                    kernel
                                          : nullptr;
                      for (int k = 0; k < kernel; ++k) {
                        const int off = k * dilation - pad_left;
                        int t0 = 0;
                        if (off < 0) t0 = (-off + stride - 1) / stride;
                        int t1 = lout;
                        if (off < len)
                          t1 = std::min(lout, (len - 1 - off) / stride + 1);
                        else
                          t1 = 0;
                        if (need_x) {
                          const double wv = wrow[k];
                          if (wv != 0.0) {
                            double* gxs = gxrow + off;
                            for (int t = t0; t < t1; ++t)
                              gxs[t * stride] += wv * gyr[t];
                          }
                        }
                        if (need_w) {
                          const double* xs = xrow + off;
                          double s = 0.0;
                          for (int t = t0; t < t1; ++t) s += gyr[t] * xs[t * stride];
                          gwrow[k] += s;
                        }
                      }
                    }
                  }
            });
  return y;
}

Tensor conv_transpose1d(const Tensor& x, const Tensor& w, int stride) {
  require_rank(x, 3, "conv_transpose1d(x)");
  require_rank(w, 3, "conv_transpose1d(w)");
  require(stride >= 1, "conv_transpose1d: stride must be >= 1");
  const int batch = x.dim(0), cin = x.dim(1), len = x.dim(2);
  require(len >= 1, "conv_transpose1d: empty input");
  require(w.dim(0) == cin, "conv_transpose1d: weight shape " + shape_str(w.shape()) +
                               " does not match input channels " + std::to_string(cin));
  const int cout = w.dim(1), kernel = w.dim(2);
  const int lout = (len - 1) * stride + kernel;

  Tensor y({batch, cout, lout});
  const double* xd = x.data();
  const double* wd = w.data();
  double* yd = y.data();
  for (int b = 0; b < batch; ++b)
    for (int c = 0; c < cin; ++c) {
      const double* xrow = xd + (static_cast<int64_t>(b) * cin + c) * len;
      for (int oc = 0; oc < cout; ++oc) {
        const double* wrow = wd + (static_cast<int64_t>(c) * cout + oc) * kernel;
        double* yrow = yd + (static_cast<int64_t>(b) * cout + oc) * lout;
        for (int l = 0; l < len; ++l) {
          const double xv = xrow[l];
          if (xv == 0.0) continue;
          double* ys = yrow + l * stride;
          for (int k = 0; k < kernel; ++k) ys[k] += xv * wrow[k];
        }
      }
    }

  record_op({x, w}, {y},
            [xi = x.impl(), wi = w.impl(), yi = y.impl(), stride, batch, cin, len, cout,
             kernel, lout]() {
              const double* gy = yi->grad.data();
              const double* xd = xi->data.data();
              const double* wd = wi->data.data();
              const bool need_x = xi->requires_grad;
              const bool need_w = wi->requires_grad;
              if (need_x) xi->ensure_grad();
              if (need_w) wi->ensure_grad();
              for (int b = 0; b < batch; ++b)
                for (int c = 0; c < cin; ++c) {
                  const double* xrow = xd + (static_cast<int64_t>(b) * cin + c) * len;
                  double* gxrow =
                      need_x ? xi->grad.data() + (static_cast<int64_t>(b) * cin + c) * len
                             : nullptr;
                  for (int oc = 0; oc < cout; ++oc) {
                    const double* wrow =
                        wd + (static_cast<int64_t>(c) * cout + oc) * kernel;
                    double* gwrow = need_w ? wi->grad.data() +
                                                 (static_cast<int64_t>(c) * cout + oc) *
                                                     kernel
                                           : nullptr;
                    const double* gyr =
                        gy + (static_cast<int64_t>(b) * cout + oc) * lout;
                    for (int l = 0; l < len; ++l) {
                      const double* gys = gyr + l * stride;
                      if (need_x) {
                        double s = 0.0;
                        for (int k = 0; k < kernel; ++k) s += wrow[k] * gys[k];
                        gxrow[l] += s;
                      }
                      if (need_w) {
                        const double xv = xrow[l];
                        if (xv != 0.0)
                          for (int k = 0; k < kernel; ++k) gwrow[k] += xv * gys[k];
                      }
                    }
                  }
                }
              (void)lout;
            });
  return y;
}

Tensor pool1d(const Tensor& x, PoolKind kind, int k, int s) {
  require_rank(x, 3, "pool1d");
  require(k >= 1 && s >= 1, "pool1d: kernel and stride must be >= 1");
  const int batch = x.dim(0), ch = x.dim(1), len = x.dim(2);
  require(k <= len, "pool1d: window " + std::to_string(k) + " exceeds input length " +
                        std::to_string(len));
  const int lout = (len - k) / s + 1;
  Tensor y({batch, ch, lout});
  std::vector<int> argmax;
  if (kind == PoolKind::kMax) argmax.resize(static_cast<size_t>(batch) * ch * lout);

  const double* xd = x.data();
  double* yd = y.data();
  for (int b = 0; b < batch; ++b)
    for (int c = 0; c < ch; ++c) {
      const double* xrow = xd + (static_cast<int64_t>(b) * ch + c) * len;
      double* yrow = yd + (static_cast<int64_t>(b) * ch + c) * lout;
      for (int t = 0; t < lout; ++t) {
        const int base = t * s;
        if (kind == PoolKind::kAvg) {
          double acc = 0.0;
          for (int j = 0; j < k; ++j) acc += xrow[base + j];
          yrow[t] = acc / k;
        } else {
          int best = base;
          double bv = xrow[base];
          for (int j = 1; j < k; ++j)
            if (xrow[base + j] > bv) {
              bv = xrow[base + j];
              best = base + j;
            }
          yrow[t] = bv;
          argmax[(static_cast<int64_t>(b) * ch + c) * lout + t] = best;
        }
      }
    }

  record_op({x}, {y},
            [xi = x.impl(), yi = y.impl(), kind, k, s, batch, ch, len, lout,
             argmax = std::move(argmax)]() {
              if (!xi->requires_grad) return;
              xi->ensure_grad();
              const double* gy = yi->grad.data();
              for (int b = 0; b < batch; ++b)
                for (int c = 0; c < ch; ++c) {
                  double* gxrow =
                      xi->grad.data() + (static_cast<int64_t>(b) * ch + c) * len;
                  const double* gyr = gy + (static_cast<int64_t>(b) * ch + c) * lout;
                  for (int t = 0; t < lout; ++t) {
                    if (kind == PoolKind::kAvg) {
                      const double g = gyr[t] / k;
                      const int base = t * s;
                      for (int j = 0; j < k; ++j) gxrow[base + j] += g;
                    } else {
                      gxrow[argmax[(static_cast<int64_t>(b) * ch + c) * lout + t]] +=
                          gyr[t];
                    }
                  }
                }
            });
  return y;
}

Tensor adaptive_avg_pool(const Tensor& x) {
  require_rank(x, 3, "adaptive_avg_pool");
  return reduce_time(x, /*mean=*/true);
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

namespace {

// Shared scaffolding for unary elementwise ops: y[i] = f(x[i]),
// gx[i] += df(x[i], y[i]) * gy[i].
template <typename F, typename DF>
Tensor unary_op(const Tensor& x, const char* name, F f, DF df) {
  require(x.defined(), std::string(name) + ": undefined input");
  Tensor y(x.shape());
  const double* xd = x.data();
  double* yd = y.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) yd[i] = f(xd[i]);
  record_op({x}, {y}, [xi = x.impl(), yi = y.impl(), df, n]() {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    const double* gy = yi->grad.data();
    const double* xd = xi->data.data();
    const double* yd = yi->data.data();
    for (int64_t i = 0; i < n; ++i) xi->grad[i] += df(xd[i], yd[i]) * gy[i];
  });
  return y;
}

}  // namespace

Tensor relu(const Tensor& x) {
  return unary_op(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      x, "sigmoid", [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh_op(const Tensor& x) {
  return unary_op(
      x, "tanh", [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor abs_op(const Tensor& x) {
  return unary_op(
      x, "abs", [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor log1p_op(const Tensor& x) {
  return unary_op(
      x, "log1p", [](double v) { return std::log1p(v); },
      [](double v, double) { return 1.0 / (1.0 + v); });
}

Tensor sqrt_op(const Tensor& x) {
  return unary_op(
      x, "sqrt", [](double v) { return std::sqrt(v); },
      [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Tensor square(const Tensor& x) {
  return unary_op(
      x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor add_scalar(const Tensor& x, double v) {
  return unary_op(
      x, "add_scalar", [v](double a) { return a + v; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& x, double v) {
  return unary_op(
      x, "mul_scalar", [v](double a) { return a * v; }, [v](double, double) { return v; });
}

Tensor prelu(const Tensor& x, const Tensor& slope) {
  require(x.defined() && (x.rank() == 2 || x.rank() == 3), "prelu: rank 2 or 3 input");
  require_rank(slope, 1, "prelu(slope)");
  const int ch = x.dim(1);
  require(slope.dim(0) == ch || slope.dim(0) == 1,
          "prelu: slope must have one entry per channel (or a single shared entry)");
  const int batch = x.dim(0);
  const int len = x.rank() == 3 ? x.dim(2) : 1;
  const bool shared = slope.dim(0) == 1;

  Tensor y(x.shape());
  const double* xd = x.data();
  const double* ad = slope.data();
  double* yd = y.data();
  for (int b = 0; b < batch; ++b)
    for (int c = 0; c < ch; ++c) {
      const double a = ad[shared ? 0 : c];
      const int64_t base = (static_cast<int64_t>(b) * ch + c) * len;
      for (int t = 0; t < len; ++t) {
        const double v = xd[base + t];
        yd[base + t] = v >= 0.0 ? v : a * v;
      }
    }

  record_op({x, slope}, {y},
            [xi = x.impl(), ai = slope.impl(), yi = y.impl(), batch, ch, len, shared]() {
              const double* gy = yi->grad.data();
              const double* xd = xi->data.data();
              const double* ad = ai->data.data();
              const bool need_x = xi->requires_grad;
              const bool need_a = ai->requires_grad;
              if (need_x) xi->ensure_grad();
              if (need_a) ai->ensure_grad();
              for (int b = 0; b < batch; ++b)
                for (int c = 0; c < ch; ++c) {
                  const double a = ad[shared ? 0 : c];
                  const int64_t base = (static_cast<int64_t>(b) * ch + c) * len;
                  double ga = 0.0;
                  for (int t = 0; t < len; ++t) {
                    const double v = xd[base + t];
                    const double g = gy[base + t];
                    if (need_x) xi->grad[base + t] += (v >= 0.0 ? 1.0 : a) * g;
                    if (v < 0.0) ga += v * g;
                  }
                  if (need_a) ai->grad[shared ? 0 : c] += ga;
                }
            });
  return y;
}

Tensor activation(const Tensor& x, Act kind, const Tensor& slope) {
  switch (kind) {
    case Act::kRelu:
      return relu(x);
    case Act::kSigmoid:
      return sigmoid(x);
    case Act::kTanh:
      return tanh_op(x);
    case Act::kPrelu:
      require(slope.defined(), "activation: prelu needs a slope tensor");
      return prelu(x, slope);
  }
  throw std::invalid_argument("activation: unknown kind");
}

namespace {

template <typename F, typename DFA, typename DFB>
Tensor binary_same_shape(const Tensor& a, const Tensor& b, const char* name, F f, DFA dfa,
                         DFB dfb) {
  require(a.defined() && b.defined(), std::string(name) + ": undefined input");
  require(a.same_shape(b), std::string(name) + ": shape mismatch " +
                               shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor y(a.shape());
  const double* ad = a.data();
  const double* bd = b.data();
  double* yd = y.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) yd[i] = f(ad[i], bd[i]);
  record_op({a, b}, {y}, [ai = a.impl(), bi = b.impl(), yi = y.impl(), dfa, dfb, n]() {
    const double* gy = yi->grad.data();
    const double* ad = ai->data.data();
    const double* bd = bi->data.data();
    if (ai->requires_grad) {
      ai->ensure_grad();
      for (int64_t i = 0; i < n; ++i) ai->grad[i] += dfa(ad[i], bd[i]) * gy[i];
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (int64_t i = 0; i < n; ++i) bi->grad[i] += dfb(ad[i], bd[i]) * gy[i];
    }
  });
  return y;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_same_shape(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_same_shape(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_same_shape(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

// ---------------------------------------------------------------------------
// Reductions, shape ops, broadcasts
// ---------------------------------------------------------------------------

Tensor softmax(const Tensor& x, int axis) {
  require(x.defined(), "softmax: undefined input");
  const int rank = x.rank();
  require(axis >= 0 && axis < rank, "softmax: axis out of range");
  const auto& dims = x.shape();
  const int64_t outer = prod(dims, 0, static_cast<size_t>(axis));
  const int64_t mid = dims[static_cast<size_t>(axis)];
  const int64_t inner = prod(dims, static_cast<size_t>(axis) + 1, dims.size());

  Tensor y(x.shape());
  const double* xd = x.data();
  double* yd = y.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < inner; ++i) {
      const int64_t base = o * mid * inner + i;
      double mx = xd[base];
      for (int64_t m = 1; m < mid; ++m) mx = std::max(mx, xd[base + m * inner]);
      double denom = 0.0;
      for (int64_t m = 0; m < mid; ++m) {
        const double e = std::exp(xd[base + m * inner] - mx);
        yd[base + m * inner] = e;
        denom += e;
      }
      for (int64_t m = 0; m < mid; ++m) yd[base + m * inner] /= denom;
    }

  record_op({x}, {y}, [xi = x.impl(), yi = y.impl(), outer, mid, inner]() {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    const double* gy = yi->grad.data();
    const double* yd = yi->data.data();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t i = 0; i < inner; ++i) {
        const int64_t base = o * mid * inner + i;
        double dot = 0.0;
        for (int64_t m = 0; m < mid; ++m)
          dot += gy[base + m * inner] * yd[base + m * inner];
        for (int64_t m = 0; m < mid; ++m) {
          const int64_t idx = base + m * inner;
          xi->grad[idx] += yd[idx] * (gy[idx] - dot);
        }
      }
  });
  return y;
}

Tensor global_layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps) {
  require_rank(x, 3, "global_layer_norm");
  require_rank(gamma, 1, "global_layer_norm(gamma)");
  require_rank(beta, 1, "global_layer_norm(beta)");
  const int batch = x.dim(0), ch = x.dim(1), len = x.dim(2);
  require(gamma.dim(0) == ch && beta.dim(0) == ch,
          "global_layer_norm: affine parameters must have one entry per channel");

  Tensor y(x.shape());
  std::vector<double> inv_std(batch), means(batch);
  const double* xd = x.data();
  const double* gd = gamma.data();
  const double* bd = beta.data();
  double* yd = y.data();
  const int64_t n = static_cast<int64_t>(ch) * len;
  for (int b = 0; b < batch; ++b) {
    const double* xb = xd + static_cast<int64_t>(b) * n;
    double mean = 0.0;
    for (int64_t i = 0; i < n; ++i) mean += xb[i];
    mean /= n;
    double var = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      const double d = xb[i] - mean;
      var += d * d;
    }
    var /= n;
    const double is = 1.0 / std::sqrt(var + eps);
    means[b] = mean;
    inv_std[b] = is;
    double* yb = yd + static_cast<int64_t>(b) * n;
    for (int c = 0; c < ch; ++c)
      for (int t = 0; t < len; ++t) {
        const int64_t i = static_cast<int64_t>(c) * len + t;
        yb[i] = gd[c] * (xb[i] - mean) * is + bd[c];
      }
  }

  record_op({x, gamma, beta}, {y},
            [xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), yi = y.impl(), batch,
             ch, len, means = std::move(means), inv_std = std::move(inv_std)]() {
              const int64_t n = static_cast<int64_t>(ch) * len;
              const double* gy = yi->grad.data();
              const double* xd = xi->data.data();
              const double* gd = gi->data.data();
              if (gi->requires_grad || bi->requires_grad) {
                gi->ensure_grad();
                bi->ensure_grad();
                for (int b = 0; b < batch; ++b) {
                  const double* xb = xd + static_cast<int64_t>(b) * n;
                  const double* gyb = gy + static_cast<int64_t>(b) * n;
                  for (int c = 0; c < ch; ++c) {
                    double gg = 0.0, gb = 0.0;
                    for (int t = 0; t < len; ++t) {
                      const int64_t i = static_cast<int64_t>(c) * len + t;
                      gg += gyb[i] * (xb[i] - means[b]) * inv_std[b];
                      gb += gyb[i];
                    }
                    if (gi->requires_grad) gi->grad[c] += gg;
                    if (bi->requires_grad) bi->grad[c] += gb;
                  }
                }
              }
              if (!xi->requires_grad) return;
              xi->ensure_grad();
              // Let xh = (x - mean)*inv_std and gxh = gy*gamma; then
              // gx = inv_std * (gxh - mean(gxh) - xh * mean(gxh*xh)).
              std::vector<double> gxh(static_cast<size_t>(n));
              for (int b = 0; b < batch; ++b) {
                const double* xb = xd + static_cast<int64_t>(b) * n;
                const double* gyb = gy + static_cast<int64_t>(b) * n;
                double m1 = 0.0, m2 = 0.0;
                for (int c = 0; c < ch; ++c)
                  for (int t = 0; t < len; ++t) {
                    const int64_t i = static_cast<int64_t>(c) * len + t;
                    const double xh = (xb[i] - means[b]) * inv_std[b];
                    const double g = gyb[i] * gd[c];
                    gxh[static_cast<size_t>(i)] = g;
                    m1 += g;
                    m2 += g * xh;
                  }
                m1 /= n;
                m2 /= n;
                double* gxb = xi->grad.data() + static_cast<int64_t>(b) * n;
                for (int64_t i = 0; i < n; ++i) {
                  const double xh = (xb[i] - means[b]) * inv_std[b];
                  gxb[i] += inv_std[b] * (gxh[static_cast<size_t>(i)] - m1 - xh * m2);
                }
              }
            });
  return y;
}

Tensor batch_norm1d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var, Mode mode,
                    double momentum, double eps) {
  require(x.defined() && (x.rank() == 2 || x.rank() == 3), "batch_norm1d: rank 2 or 3");
  const int batch = x.dim(0), ch = x.dim(1);
  const int len = x.rank() == 3 ? x.dim(2) : 1;
  require(gamma.dim(0) == ch && beta.dim(0) == ch && running_mean.dim(0) == ch &&
              running_var.dim(0) == ch,
          "batch_norm1d: per-channel parameter length mismatch");

  const int64_t n = static_cast<int64_t>(batch) * len;
  std::vector<double> mean(ch), var(ch);
  if (mode == Mode::kTrain) {
    for (int c = 0; c < ch; ++c) {
      double m = 0.0;
      for (int b = 0; b < batch; ++b) {
        const double* row = x.data() + (static_cast<int64_t>(b) * ch + c) * len;
        for (int t = 0; t < len; ++t) m += row[t];
      }
      m /= n;
      double v = 0.0;
      for (int b = 0; b < batch; ++b) {
        const double* row = x.data() + (static_cast<int64_t>(b) * ch + c) * len;
        for (int t = 0; t < len; ++t) {
          const double d = row[t] - m;
          v += d * d;
        }
      }
      v /= n;
      mean[c] = m;
      var[c] = v;
      // Running buffers track the unbiased variance when possible.
      const double vu = n > 1 ? v * n / (n - 1.0) : v;
      running_mean.data()[c] = (1.0 - momentum) * running_mean.data()[c] + momentum * m;
      running_var.data()[c] = (1.0 - momentum) * running_var.data()[c] + momentum * vu;
    }
  } else {
    for (int c = 0; c < ch; ++c) {
      mean[c] = running_mean.data()[c];
      var[c] = running_var.data()[c];
    }
  }

  Tensor y(x.shape());
  std::vector<double> inv_std(ch);
  for (int c = 0; c < ch; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
  for (int b = 0; b < batch; ++b)
    for (int c = 0; c < ch; ++c) {
      const double* row = x.data() + (static_cast<int64_t>(b) * ch + c) * len;
      double* yrow = y.data() + (static_cast<int64_t>(b) * ch + c) * len;
      const double g = gamma.data()[c], bb = beta.data()[c];
      for (int t = 0; t < len; ++t) yrow[t] = g * (row[t] - mean[c]) * inv_std[c] + bb;
    }

  record_op(
      {x, gamma, beta}, {y},
      [xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), yi = y.impl(), batch, ch, len,
       mode, mean = std::move(mean), inv_std = std::move(inv_std)]() {
        const int64_t n = static_cast<int64_t>(batch) * len;
        const double* gy = yi->grad.data();
        const double* xd = xi->data.data();
        const double* gd = gi->data.data();
        for (int c = 0; c < ch; ++c) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (int b = 0; b < batch; ++b) {
            const double* row = xd + (static_cast<int64_t>(b) * ch + c) * len;
            const double* gyr = gy + (static_cast<int64_t>(b) * ch + c) * len;
            for (int t = 0; t < len; ++t) {
              const double xh = (row[t] - mean[c]) * inv_std[c];
              sum_g += gyr[t];
              sum_gx += gyr[t] * xh;
            }
          }
          if (gi->requires_grad) {
            gi->ensure_grad();
            gi->grad[c] += sum_gx;
          }
          if (bi->requires_grad) {
            bi->ensure_grad();
            bi->grad[c] += sum_g;
          }
          if (xi->requires_grad) {
            xi->ensure_grad();
            const double gscale = gd[c] * inv_std[c];
            for (int b = 0; b < batch; ++b) {
              const double* row = xd + (static_cast<int64_t>(b) * ch + c) * len;
              const double* gyr = gy + (static_cast<int64_t>(b) * ch + c) * len;
              double* gxr = xi->grad.data() + (static_cast<int64_t>(b) * ch + c) * len;
              for (int t = 0; t < len; ++t) {
                if (mode == Mode::kTrain) {
                  const double xh = (row[t] - mean[c]) * inv_std[c];
                  gxr[t] += gscale * (gyr[t] - sum_g / n - xh * sum_gx / n);
                } else {
                  gxr[t] += gscale * gyr[t];
                }
              }
            }
          }
        }
      });
  return y;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_rank(x, 2, "linear(x)");
  require_rank(w, 2, "linear(w)");
  const int batch = x.dim(0), din = x.dim(1);
  const int dout = w.dim(0);
  require(w.dim(1) == din, "linear: weight shape " + shape_str(w.shape()) +
                               " does not match input " + shape_str(x.shape()));
  if (bias.defined())
    require(bias.rank() == 1 && bias.dim(0) == dout,
            "linear: bias length must equal output features");

  Tensor y({batch, dout});
  const double* xd = x.data();
  const double* wd = w.data();
  double* yd = y.data();
  for (int b = 0; b < batch; ++b) {
    const double* xr = xd + static_cast<int64_t>(b) * din;
    double* yr = yd + static_cast<int64_t>(b) * dout;
    for (int o = 0; o < dout; ++o) {
      const double* wr = wd + static_cast<int64_t>(o) * din;
      double acc = bias.defined() ? bias.data()[o] : 0.0;
      for (int i = 0; i < din; ++i) acc += xr[i] * wr[i];
      yr[o] = acc;
    }
  }

  record_op({x, w, bias.defined() ? bias : Tensor()}, {y},
            [xi = x.impl(), wi = w.impl(), bi = bias.defined() ? bias.impl() : nullptr,
             yi = y.impl(), batch, din, dout]() {
              const double* gy = yi->grad.data();
              const double* xd = xi->data.data();
              const double* wd = wi->data.data();
              if (bi && bi->requires_grad) {
                bi->ensure_grad();
                for (int b = 0; b < batch; ++b)
                  for (int o = 0; o < dout; ++o)
                    bi->grad[o] += gy[static_cast<int64_t>(b) * dout + o];
              }
              if (xi->requires_grad) {
                xi->ensure_grad();
                for (int b = 0; b < batch; ++b) {
                  const double* gyr = gy + static_cast<int64_t>(b) * dout;
                  double* gxr = xi->grad.data() + static_cast<int64_t>(b) * din;
                  for (int o = 0; o < dout; ++o) {
                    const double g = gyr[o];
                    if (g == 0.0) continue;
                    const double* wr = wd + static_cast<int64_t>(o) * din;
                    for (int i = 0; i < din; ++i) gxr[i] += g * wr[i];
                  }
                }
              }
              if (wi->requires_grad) {
                wi->ensure_grad();
                for (int b = 0; b < batch; ++b) {
                  const double* gyr = gy + static_cast<int64_t>(b) * dout;
                  const double* xr = xd + static_cast<int64_t>(b) * din;
                  for (int o = 0; o < dout; ++o) {
                    const double g = gyr[o];
                    if (g == 0.0) continue;
                    double* gwr = wi->grad.data() + static_cast<int64_t>(o) * din;
                    for (int i = 0; i < din; ++i) gwr[i] += g * xr[i];
                  }
                }
              }
            });
  return y;
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  require(!xs.empty(), "concat: no inputs");
  const int rank = xs[0].rank();
  require(axis >= 0 && axis < rank, "concat: axis out of range");
  int total = 0;
  for (const auto& t : xs) {
    require(t.rank() == rank, "concat: rank mismatch");
    for (int a = 0; a < rank; ++a)
      if (a != axis)
        require(t.dim(a) == xs[0].dim(a), "concat: shape mismatch off the concat axis");
    total += t.dim(axis);
  }
  std::vector<int> out_shape = xs[0].shape();
  out_shape[static_cast<size_t>(axis)] = total;
  Tensor y(out_shape);

  const int64_t outer = prod(out_shape, 0, static_cast<size_t>(axis));
  const int64_t inner = prod(out_shape, static_cast<size_t>(axis) + 1, out_shape.size());
  int64_t offset = 0;
  for (const auto& t : xs) {
    const int64_t block = t.dim(axis) * inner;
    const double* src = t.data();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(y.data() + o * total * inner + offset, src + o * block,
                  static_cast<size_t>(block) * sizeof(double));
    offset += block;
  }

  std::vector<std::shared_ptr<TensorImpl>> impls;
  std::vector<int64_t> blocks;
  for (const auto& t : xs) {
    impls.push_back(t.impl());
    blocks.push_back(t.dim(axis) * inner);
  }
  record_op(xs, {y},
            [impls = std::move(impls), blocks = std::move(blocks), yi = y.impl(), outer,
             inner, total]() {
              const double* gy = yi->grad.data();
              int64_t offset = 0;
              for (size_t p = 0; p < impls.size(); ++p) {
                if (impls[p]->requires_grad) {
                  impls[p]->ensure_grad();
                  for (int64_t o = 0; o < outer; ++o) {
                    const double* src = gy + o * total * inner + offset;
                    double* dst = impls[p]->grad.data() + o * blocks[p];
                    for (int64_t i = 0; i < blocks[p]; ++i) dst[i] += src[i];
                  }
                }
                offset += blocks[p];
              }
            });
  return y;
}

Tensor slice(const Tensor& x, int axis, int start, int length) {
  require(x.defined(), "slice: undefined input");
  const int rank = x.rank();
  require(axis >= 0 && axis < rank, "slice: axis out of range");
  require(start >= 0 && length >= 1 && start + length <= x.dim(axis),
          "slice: range out of bounds");
  std::vector<int> out_shape = x.shape();
  out_shape[static_cast<size_t>(axis)] = length;
  Tensor y(out_shape);

  const auto& dims = x.shape();
  const int64_t outer = prod(dims, 0, static_cast<size_t>(axis));
  const int64_t inner = prod(dims, static_cast<size_t>(axis) + 1, dims.size());
  const int64_t in_block = dims[static_cast<size_t>(axis)] * inner;
  const int64_t out_block = static_cast<int64_t>(length) * inner;
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(y.data() + o * out_block, x.data() + o * in_block + start * inner,
                static_cast<size_t>(out_block) * sizeof(double));

  record_op({x}, {y},
            [xi = x.impl(), yi = y.impl(), outer, inner, in_block, out_block, start]() {
              if (!xi->requires_grad) return;
              xi->ensure_grad();
              const double* gy = yi->grad.data();
              for (int64_t o = 0; o < outer; ++o) {
                double* dst = xi->grad.data() + o * in_block + start * inner;
                const double* src = gy + o * out_block;
                for (int64_t i = 0; i < out_block; ++i) dst[i] += src[i];
              }
            });
  return y;
}

Tensor reshape(const Tensor& x, std::vector<int> shape) {
  require(x.defined(), "reshape: undefined input");
  Tensor y(std::move(shape), x.values());
  record_op({x}, {y}, [xi = x.impl(), yi = y.impl()]() {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    const int64_t n = xi->numel();
    for (int64_t i = 0; i < n; ++i) xi->grad[i] += yi->grad[i];
  });
  return y;
}

Tensor broadcast_time(const Tensor& x, int length) {
  require_rank(x, 3, "broadcast_time");
  require(x.dim(2) == 1, "broadcast_time: input must have a single frame");
  const int batch = x.dim(0), ch = x.dim(1);
  Tensor y({batch, ch, length});
  const double* xd = x.data();
  double* yd = y.data();
  for (int64_t r = 0; r < static_cast<int64_t>(batch) * ch; ++r) {
    const double v = xd[r];
    double* row = yd + r * length;
    for (int t = 0; t < length; ++t) row[t] = v;
  }
  record_op({x}, {y}, [xi = x.impl(), yi = y.impl(), batch, ch, length]() {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    const double* gy = yi->grad.data();
    for (int64_t r = 0; r < static_cast<int64_t>(batch) * ch; ++r) {
      double s = 0.0;
      const double* row = gy + r * length;
      for (int t = 0; t < length; ++t) s += row[t];
      xi->grad[r] += s;
    }
  });
  return y;
}

Tensor reduce_time(const Tensor& x, bool mean) {
  require_rank(x, 3, "reduce_time");
  const int batch = x.dim(0), ch = x.dim(1), len = x.dim(2);
  Tensor y({batch, ch, 1});
  const double* xd = x.data();
  double* yd = y.data();
  for (int64_t r = 0; r < static_cast<int64_t>(batch) * ch; ++r) {
    const double* row = xd + r * len;
    double s = 0.0;
    for (int t = 0; t < len; ++t) s += row[t];
    yd[r] = mean ? s / len : s;
  }
  record_op({x}, {y}, [xi = x.impl(), yi = y.impl(), batch, ch, len, mean]() {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    const double* gy = yi->grad.data();
    for (int64_t r = 0; r < static_cast<int64_t>(batch) * ch; ++r) {
      const double g = mean ? gy[r] / len : gy[r];
      double* row = xi->grad.data() + r * len;
      for (int t = 0; t < len; ++t) row[t] += g;
    }
  });
  return y;
}

Tensor reduce_sum_all(const Tensor& x) {
  require(x.defined(), "reduce_sum_all: undefined input");
  const int64_t n = x.numel();
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) s += x.data()[i];
  Tensor y = Tensor::scalar(s);
  record_op({x}, {y}, [xi = x.impl(), yi = y.impl(), n]() {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    const double g = yi->grad[0];
    for (int64_t i = 0; i < n; ++i) xi->grad[i] += g;
  });
  return y;
}

Tensor reduce_mean_all(const Tensor& x) {
  require(x.defined(), "reduce_mean_all: undefined input");
  const int64_t n = x.numel();
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) s += x.data()[i];
  Tensor y = Tensor::scalar(s / n);
  record_op({x}, {y}, [xi = x.impl(), yi = y.impl(), n]() {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    const double g = yi->grad[0] / n;
    for (int64_t i = 0; i < n; ++i) xi->grad[i] += g;
  });
  return y;
}

Tensor scale_channels(const Tensor& x, const Tensor& s) {
  require_rank(x, 3, "scale_channels(x)");
  require_rank(s, 3, "scale_channels(s)");
  const int batch = x.dim(0), ch = x.dim(1), len = x.dim(2);
  require(s.dim(0) == batch && s.dim(1) == ch && s.dim(2) == 1,
          "scale_channels: scale must be [B,C,1] matching " + shape_str(x.shape()));
  Tensor y(x.shape());
  const double* xd = x.data();
  const double* sd = s.data();
  double* yd = y.data();
  for (int64_t r = 0; r < static_cast<int64_t>(batch) * ch; ++r) {
    const double sv = sd[r];
    const double* xr = xd + r * len;
    double* yr = yd + r * len;
    for (int t = 0; t < len; ++t) yr[t] = xr[t] * sv;
  }
  record_op({x, s}, {y}, [xi = x.impl(), si = s.impl(), yi = y.impl(), batch, ch, len]() {
    const double* gy = yi->grad.data();
    const double* xd = xi->data.data();
    const double* sd = si->data.data();
    if (xi->requires_grad) {
      xi->ensure_grad();
      for (int64_t r = 0; r < static_cast<int64_t>(batch) * ch; ++r) {
        const double sv = sd[r];
        const double* gyr = gy + r * len;
        double* gxr = xi->grad.data() + r * len;
        for (int t = 0; t < len; ++t) gxr[t] += sv * gyr[t];
      }
    }
    if (si->requires_grad) {
      si->ensure_grad();
      for (int64_t r = 0; r < static_cast<int64_t>(batch) * ch; ++r) {
        const double* gyr = gy + r * len;
        const double* xr = xd + r * len;
        double acc = 0.0;
        for (int t = 0; t < len; ++t) acc += gyr[t] * xr[t];
        si->grad[r] += acc;
      }
    }
  });
  return y;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
  require_rank(x, 3, "add_channel_bias(x)");
  require_rank(b, 1, "add_channel_bias(b)");
  const int batch = x.dim(0), ch = x.dim(1), len = x.dim(2);
  require(b.dim(0) == ch, "add_channel_bias: bias length must equal channels");
  Tensor y(x.shape());
  const double* xd = x.data();
  const double* bd = b.data();
  double* yd = y.data();
  for (int bb = 0; bb < batch; ++bb)
    for (int c = 0; c < ch; ++c) {
      const int64_t base = (static_cast<int64_t>(bb) * ch + c) * len;
      const double bv = bd[c];
      for (int t = 0; t < len; ++t) yd[base + t] = xd[base + t] + bv;
    }
  record_op({x, b}, {y}, [xi = x.impl(), bi = b.impl(), yi = y.impl(), batch, ch, len]() {
    const double* gy = yi->grad.data();
    if (xi->requires_grad) {
      xi->ensure_grad();
      const int64_t n = xi->numel();
      for (int64_t i = 0; i < n; ++i) xi->grad[i] += gy[i];
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (int bb = 0; bb < batch; ++bb)
        for (int c = 0; c < ch; ++c) {
          const double* gyr = gy + (static_cast<int64_t>(bb) * ch + c) * len;
          double s = 0.0;
          for (int t = 0; t < len; ++t) s += gyr[t];
          bi->grad[c] += s;
        }
    }
  });
  return y;
}

Tensor l2_normalize_rows(const Tensor& x, double eps) {
  require_rank(x, 2, "l2_normalize_rows");
  const int batch = x.dim(0), dim = x.dim(1);
  Tensor y(x.shape());
  // divide by max(norm, eps): unit rows stay bit-exact, zero rows stay finite
  std::vector<double> norms(batch);
  std::vector<uint8_t> clipped(static_cast<size_t>(batch));
  for (int b = 0; b < batch; ++b) {
    const double* xr = x.data() + static_cast<int64_t>(b) * dim;
    double s = 0.0;
    for (int i = 0; i < dim; ++i) s += xr[i] * xr[i];
    const double raw = std::sqrt(s);
    clipped[static_cast<size_t>(b)] = raw < eps;
    const double nrm = std::max(raw, eps);
    norms[b] = nrm;
    double* yr = y.data() + static_cast<int64_t>(b) * dim;
    for (int i = 0; i < dim; ++i) yr[i] = xr[i] / nrm;
  }
  record_op({x}, {y},
            [xi = x.impl(), yi = y.impl(), batch, dim, norms = std::move(norms),
             clipped = std::move(clipped)]() {
              if (!xi->requires_grad) return;
              xi->ensure_grad();
              const double* gy = yi->grad.data();
              const double* yd = yi->data.data();
              for (int b = 0; b < batch; ++b) {
                const double* gyr = gy + static_cast<int64_t>(b) * dim;
                const double* yr = yd + static_cast<int64_t>(b) * dim;
                double* gxr = xi->grad.data() + static_cast<int64_t>(b) * dim;
                if (clipped[static_cast<size_t>(b)]) {
                  // linear regime x/eps
                  for (int i = 0; i < dim; ++i) gxr[i] += gyr[i] / norms[b];
                  continue;
                }
                double dot = 0.0;
                for (int i = 0; i < dim; ++i) dot += gyr[i] * yr[i];
                for (int i = 0; i < dim; ++i)
                  gxr[i] += (gyr[i] - yr[i] * dot) / norms[b];
              }
            });
  return y;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  require_rank(logits, 2, "cross_entropy");
  const int batch = logits.dim(0), classes = logits.dim(1);
  require(static_cast<int>(labels.size()) == batch,
          "cross_entropy: one label per row required");
  for (int lb : labels)
    require(lb >= 0 && lb < classes, "cross_entropy: label out of range");

  double total = 0.0;
  std::vector<double> probs(static_cast<size_t>(batch) * classes);
  for (int b = 0; b < batch; ++b) {
    const double* zr = logits.data() + static_cast<int64_t>(b) * classes;
    double mx = zr[0];
    for (int j = 1; j < classes; ++j) mx = std::max(mx, zr[j]);
    double denom = 0.0;
    for (int j = 0; j < classes; ++j) {
      const double e = std::exp(zr[j] - mx);
      probs[static_cast<size_t>(b) * classes + j] = e;
      denom += e;
    }
    for (int j = 0; j < classes; ++j) probs[static_cast<size_t>(b) * classes + j] /= denom;
    total += mx + std::log(denom) - zr[labels[static_cast<size_t>(b)]];
  }
  Tensor y = Tensor::scalar(total / batch);
  record_op({logits}, {y},
            [xi = logits.impl(), yi = y.impl(), batch, classes, labels,
             probs = std::move(probs)]() {
              if (!xi->requires_grad) return;
              xi->ensure_grad();
              const double g = yi->grad[0] / batch;
              for (int b = 0; b < batch; ++b) {
                double* gxr = xi->grad.data() + static_cast<int64_t>(b) * classes;
                const double* pr = probs.data() + static_cast<size_t>(b) * classes;
                for (int j = 0; j < classes; ++j) gxr[j] += g * pr[j];
                gxr[labels[static_cast<size_t>(b)]] -= g;
              }
            });
  return y;
}

Tensor aam_adjust(const Tensor& cosines, const std::vector<int>& labels, double margin) {
  require_rank(cosines, 2, "aam_adjust");
  const int batch = cosines.dim(0), classes = cosines.dim(1);
  require(static_cast<int>(labels.size()) == batch, "aam_adjust: one label per row");
  const double cos_m = std::cos(margin), sin_m = std::sin(margin);
  const double guard = std::cos(M_PI - margin);
  const double fallback_shift = margin * std::sin(margin);

  Tensor y(cosines.shape(), cosines.values());
  std::vector<uint8_t> on_principal(static_cast<size_t>(batch));
  for (int b = 0; b < batch; ++b) {
    const int lb = labels[static_cast<size_t>(b)];
    require(lb >= 0 && lb < classes, "aam_adjust: label out of range");
    double c = std::clamp(cosines.data()[static_cast<int64_t>(b) * classes + lb], -1.0, 1.0);
    double* out = y.data() + static_cast<int64_t>(b) * classes + lb;
    if (c > guard) {
      const double s = std::sqrt(std::max(0.0, 1.0 - c * c));
      *out = c * cos_m - s * sin_m;
      on_principal[static_cast<size_t>(b)] = 1;
    } else {
      *out = c - fallback_shift;
      on_principal[static_cast<size_t>(b)] = 0;
    }
  }
  record_op({cosines}, {y},
            [xi = cosines.impl(), yi = y.impl(), batch, classes, labels, cos_m, sin_m,
             on_principal = std::move(on_principal)]() {
              if (!xi->requires_grad) return;
              xi->ensure_grad();
              const double* gy = yi->grad.data();
              const int64_t n = xi->numel();
              for (int64_t i = 0; i < n; ++i) xi->grad[i] += gy[i];
              // Replace the pass-through adjoint on each target entry.
              for (int b = 0; b < batch; ++b) {
                const int64_t idx =
                    static_cast<int64_t>(b) * classes + labels[static_cast<size_t>(b)];
                const double c = std::clamp(xi->data[idx], -1.0, 1.0);
                double slope = 1.0;
                if (on_principal[static_cast<size_t>(b)]) {
                  const double s = std::sqrt(std::max(1e-12, 1.0 - c * c));
                  slope = cos_m + sin_m * c / s;
                }
                xi->grad[idx] += (slope - 1.0) * gy[idx];
              }
            });
  return y;
}

Tensor param_fbank_kernel(const Tensor& f_lo, const Tensor& f_bw, const Tensor& gain,
                          int kernel, double min_band) {
  require_rank(f_lo, 1, "param_fbank_kernel(f_lo)");
  require_rank(f_bw, 1, "param_fbank_kernel(f_bw)");
  require_rank(gain, 1, "param_fbank_kernel(gain)");
  const int filters = f_lo.dim(0);
  require(f_bw.dim(0) == filters && gain.dim(0) == filters,
          "param_fbank_kernel: per-filter parameter length mismatch");
  require(kernel >= 2, "param_fbank_kernel: kernel must be >= 2");

  std::vector<double> window(static_cast<size_t>(kernel));
  for (int n = 0; n < kernel; ++n)
    window[static_cast<size_t>(n)] =
        0.54 - 0.46 * std::cos(2.0 * M_PI * n / (kernel - 1));
  const double center = (kernel - 1) / 2.0;

  // Windowed ideal low-pass tap at normalized cutoff f: sin(2*pi*f*nc)/(pi*nc),
  // with the nc -> 0 limit 2f. Its derivative in f is 2*cos(2*pi*f*nc).
  auto lowpass = [](double f, double nc) {
    if (nc == 0.0) return 2.0 * f;
    return std::sin(2.0 * M_PI * f * nc) / (M_PI * nc);
  };

  Tensor y({filters, 1, kernel});
  // Per filter: effective lo/hi after clamping, plus clamp activity flags for
  // the adjoint.
  std::vector<double> lo_eff(filters), hi_eff(filters);
  std::vector<uint8_t> lo_active(filters), bw_active(filters), hi_active(filters);
  for (int f = 0; f < filters; ++f) {
    const double lo_raw = std::fabs(f_lo.data()[f]);
    const double bw_raw = std::fabs(f_bw.data()[f]);
    const double lo = std::min(lo_raw, 0.5);
    const double bw = std::max(bw_raw, min_band);
    const double hi = std::min(lo + bw, 0.5);
    lo_eff[f] = lo;
    hi_eff[f] = hi;
    lo_active[f] = lo_raw < 0.5 ? 1 : 0;
    bw_active[f] = bw_raw > min_band ? 1 : 0;
    hi_active[f] = lo + bw < 0.5 ? 1 : 0;
    double* row = y.data() + static_cast<int64_t>(f) * kernel;
    if (hi - lo <= 0.0) continue;  // collapsed band -> zero filter
    const double g = gain.data()[f];
    for (int n = 0; n < kernel; ++n) {
      const double nc = n - center;
      row[n] = g * (lowpass(hi, nc) - lowpass(lo, nc)) * window[static_cast<size_t>(n)];
    }
  }

  record_op(
      {f_lo, f_bw, gain}, {y},
      [li = f_lo.impl(), bi = f_bw.impl(), gi = gain.impl(), yi = y.impl(), filters,
       kernel, center, window = std::move(window), lo_eff = std::move(lo_eff),
       hi_eff = std::move(hi_eff), lo_active = std::move(lo_active),
       bw_active = std::move(bw_active), hi_active = std::move(hi_active), lowpass]() {
        const double* gy = yi->grad.data();
        if (li->requires_grad) li->ensure_grad();
        if (bi->requires_grad) bi->ensure_grad();
        if (gi->requires_grad) gi->ensure_grad();
        for (int f = 0; f < filters; ++f) {
          const double lo = lo_eff[f], hi = hi_eff[f];
          if (hi - lo <= 0.0) continue;
          const double g = gi->data[f];
          const double* gyr = gy + static_cast<int64_t>(f) * kernel;
          double acc_lo = 0.0, acc_hi = 0.0, acc_gain = 0.0;
          for (int n = 0; n < kernel; ++n) {
            const double nc = n - center;
            const double wv = window[static_cast<size_t>(n)];
            const double d_hi = 2.0 * std::cos(2.0 * M_PI * hi * nc);
            const double d_lo = 2.0 * std::cos(2.0 * M_PI * lo * nc);
            acc_hi += gyr[n] * g * wv * d_hi;
            acc_lo += gyr[n] * g * wv * (-d_lo);
            acc_gain += gyr[n] * (lowpass(hi, nc) - lowpass(lo, nc)) * wv;
          }
          const double sign_lo = li->data[f] >= 0.0 ? 1.0 : -1.0;
          const double sign_bw = bi->data[f] >= 0.0 ? 1.0 : -1.0;
          // hi depends on lo through hi = clamp(lo + bw).
          if (li->requires_grad && lo_active[f]) {
            double d = acc_lo;
            if (hi_active[f]) d += acc_hi;
            li->grad[f] += sign_lo * d;
          }
          if (bi->requires_grad && hi_active[f] && bw_active[f])
            bi->grad[f] += sign_bw * acc_hi;
          if (gi->requires_grad) gi->grad[f] += acc_gain;
        }
      });
  return y;
}

}  // namespace mrw
