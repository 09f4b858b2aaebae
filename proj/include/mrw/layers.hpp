#pragma once

#include <string>
#include <vector>

#include "mrw/ops.hpp"
#include "mrw/rng.hpp"
#include "mrw/tensor.hpp"

namespace mrw {

// Named handle to one learnable tensor (or persistent buffer) inside a model.
struct ParamRef {
  std::string path;
  Tensor tensor;
  bool trainable = true;
};

using ParamList = std::vector<ParamRef>;

inline void add_param(ParamList& out, const std::string& path, const Tensor& t,
                      bool trainable = true) {
  out.push_back({path, t, trainable});
}

// Uniform fan-in initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
void init_uniform_fanin(Tensor t, int fan_in, Rng& rng);

struct Conv1dLayer {
  Tensor w;  // [Cout, Cin/groups, K]
  Tensor b;  // [Cout] or undefined
  int stride = 1, dilation = 1, groups = 1;
  Padding padding = Padding::kSame;

  Conv1dLayer() = default;
  Conv1dLayer(int cin, int cout, int k, Rng& rng, int stride = 1, int dilation = 1,
              Padding padding = Padding::kSame, int groups = 1, bool bias = true);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct ConvT1dLayer {
  Tensor w;  // [Cin, Cout, K]
  Tensor b;  // [Cout] or undefined
  int stride = 1;

  ConvT1dLayer() = default;
  ConvT1dLayer(int cin, int cout, int k, Rng& rng, int stride, bool bias = true);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct LinearLayer {
  Tensor w;  // [Dout, Din]
  Tensor b;  // [Dout] or undefined

  LinearLayer() = default;
  LinearLayer(int din, int dout, Rng& rng, bool bias = true);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct BatchNormLayer {
  Tensor gamma, beta, running_mean, running_var;
  double momentum = 0.1, eps = 1e-5;

  BatchNormLayer() = default;
  explicit BatchNormLayer(int channels);
  Tensor forward(const Tensor& x, Mode mode) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct GLNLayer {
  Tensor gamma, beta;
  double eps = 1e-5;

  GLNLayer() = default;
  explicit GLNLayer(int channels);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct PReLULayer {
  Tensor slope;  // per channel

  PReLULayer() = default;
  explicit PReLULayer(int channels, double init = 0.25);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

}  // namespace mrw
