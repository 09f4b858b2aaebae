#pragma once

#include <utility>
#include <vector>

#include "mrw/layers.hpp"

namespace mrw {

// Per-extractor kernel/stride schedule. Kernel sizes double and last-conv
// kernels halve from one extractor to the next so every branch lands on the
// same output frame rate.
struct FEGeometry {
  int index = 1;        // 1-based extractor index
  int kernel_pf = 0;    // filterbank kernel size in samples (K_i)
  int stride_pf = 0;    // filterbank stride in samples (2*K_i/5)
  int kernel_last = 0;  // final conv kernel in frames (M_i)
  int stride_last = 0;  // final conv stride in frames (M_i/2)
};

// Validates divisibility at every level and returns the N geometries.
// Throws std::invalid_argument when any kernel or stride is non-integer.
std::vector<FEGeometry> derive_geometry(int k1, int m1, int n);

// Samples per output frame, shared by all extractors: K_1*M_1/5.
int frame_stride(int k1, int m1);

struct MRFEConfig {
  int extractors = 4;      // N
  int kernel1 = 50;        // K_1
  int last1 = 16;          // M_1
  int fbank_filters = 128;  // F_1
  int channels = 64;       // F_2
  int hidden = 128;        // H (depthwise expansion width)
  int blocks = 5;          // X (conv blocks per repeat)
  int repeats = 2;         // R
  bool compress = true;    // log(1+|.|) after the filterbank
  bool use_bias = true;    // conv biases throughout the front-end
};

// Learnable band-pass filterbank applied as a strided convolution over the
// raw waveform. Band edges and gains are trainable; the window is fixed.
struct ParamFbankLayer {
  Tensor f_lo, f_bw, gain;  // normalized frequencies (0..0.5), per filter
  int kernel = 0, stride = 1;
  double min_band = 50.0 / 16000.0;

  ParamFbankLayer() = default;
  ParamFbankLayer(int filters, int kernel, int stride, Rng& rng);
  Tensor forward(const Tensor& x, bool compress) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

// Residual dilated conv block: pointwise expand, PReLU, gLN, depthwise k=3
// dilated, PReLU, gLN, pointwise project, plus identity.
struct TCNBlock {
  Conv1dLayer expand, depthwise, project;
  PReLULayer act1, act2;
  GLNLayer norm1, norm2;

  TCNBlock() = default;
  TCNBlock(int channels, int hidden, int dilation, Rng& rng, bool bias);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct TCN {
  std::vector<TCNBlock> blocks_;  // repeats x blocks, dilation 1..2^(X-1)

  TCN() = default;
  TCN(int channels, int hidden, int blocks, int repeats, Rng& rng, bool bias);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

// One feature extractor: filterbank -> 1x1 conv -> (+skip) -> TCN -> strided
// last conv. Also emits the half-rate skip for the next extractor.
struct FeatureExtractor {
  FEGeometry geo;
  bool compress = true;
  ParamFbankLayer fbank;
  Conv1dLayer conv1x1, last;
  TCN tcn;

  FeatureExtractor() = default;
  FeatureExtractor(const MRFEConfig& cfg, const FEGeometry& geo, Rng& rng);
  // skip_in must be undefined for the first extractor.
  std::pair<Tensor, Tensor> forward(const Tensor& x, const Tensor& skip_in) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

// Full multi-resolution front-end: N chained extractors, outputs concatenated
// along channels into [B, F_2*N, T/S].
struct MRFE {
  MRFEConfig cfg;
  std::vector<FEGeometry> geos;
  std::vector<FeatureExtractor> fes;

  MRFE() = default;
  MRFE(const MRFEConfig& cfg, Rng& rng);
  int out_channels() const { return cfg.channels * cfg.extractors; }
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

}  // namespace mrw
