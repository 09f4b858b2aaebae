#include "mrw/layers.hpp"

#include <cmath>

namespace mrw {

void init_uniform_fanin(Tensor t, int fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(-bound, bound);
}

Conv1dLayer::Conv1dLayer(int cin, int cout, int k, Rng& rng, int stride, int dilation,
                         Padding padding, int groups, bool bias)
    : w({cout, cin / groups, k}),
      stride(stride),
      dilation(dilation),
      groups(groups),
      padding(padding) {
  init_uniform_fanin(w, (cin / groups) * k, rng);
  if (bias) b = Tensor::zeros({cout});
}

Tensor Conv1dLayer::forward(const Tensor& x) const {
  return conv1d(x, w, b, stride, dilation, padding, groups);
}

void Conv1dLayer::collect(const std::string& prefix, ParamList& out) const {
  add_param(out, prefix + ".w", w);
  if (b.defined()) add_param(out, prefix + ".b", b);
}

ConvT1dLayer::ConvT1dLayer(int cin, int cout, int k, Rng& rng, int stride, bool bias)
    : w({cin, cout, k}), stride(stride) {
  init_uniform_fanin(w, cin * k, rng);
  if (bias) b = Tensor::zeros({cout});
}

Tensor ConvT1dLayer::forward(const Tensor& x) const {
  Tensor y = conv_transpose1d(x, w, stride);
  if (b.defined()) y = add_channel_bias(y, b);
  return y;
}

void ConvT1dLayer::collect(const std::string& prefix, ParamList& out) const {
  add_param(out, prefix + ".w", w);
  if (b.defined()) add_param(out, prefix + ".b", b);
}

LinearLayer::LinearLayer(int din, int dout, Rng& rng, bool bias) : w({dout, din}) {
  init_uniform_fanin(w, din, rng);
  if (bias) b = Tensor::zeros({dout});
}

Tensor LinearLayer::forward(const Tensor& x) const { return linear(x, w, b); }

void LinearLayer::collect(const std::string& prefix, ParamList& out) const {
  add_param(out, prefix + ".w", w);
  if (b.defined()) add_param(out, prefix + ".b", b);
}

BatchNormLayer::BatchNormLayer(int channels)
    : gamma(Tensor::full({channels}, 1.0)),
      beta(Tensor::zeros({channels})),
      running_mean(Tensor::zeros({channels})),
      running_var(Tensor::full({channels}, 1.0)) {}

Tensor BatchNormLayer::forward(const Tensor& x, Mode mode) const {
  Tensor rm = running_mean, rv = running_var;
  return batch_norm1d(x, gamma, beta, rm, rv, mode, momentum, eps);
}

void BatchNormLayer::collect(const std::string& prefix, ParamList& out) const {
  add_param(out, prefix + ".gamma", gamma);
  add_param(out, prefix + ".beta", beta);
  add_param(out, prefix + ".running_mean", running_mean, /*trainable=*/false);
  add_param(out, prefix + ".running_var", running_var, /*trainable=*/false);
}

GLNLayer::GLNLayer(int channels)
    : gamma(Tensor::full({channels}, 1.0)), beta(Tensor::zeros({channels})) {}

Tensor GLNLayer::forward(const Tensor& x) const {
  return global_layer_norm(x, gamma, beta, eps);
}

void GLNLayer::collect(const std::string& prefix, ParamList& out) const {
  add_param(out, prefix + ".gamma", gamma);
  add_param(out, prefix + ".beta", beta);
}

PReLULayer::PReLULayer(int channels, double init)
    : slope(Tensor::full({channels}, init)) {}

Tensor PReLULayer::forward(const Tensor& x) const { return prelu(x, slope); }

void PReLULayer::collect(const std::string& prefix, ParamList& out) const {
  add_param(out, prefix + ".slope", slope);
}

}  // namespace mrw
