#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mrw/layers.hpp"

namespace mrw {

// Collects labeled intermediate shapes during a forward pass, plus flags for
// edge-case handling (odd-length down-sampling).
struct ForwardTrace {
  std::vector<std::pair<std::string, std::vector<int>>> entries;
  bool odd_down_pad = false;

  void note(const std::string& label, const std::vector<int>& shape) {
    entries.emplace_back(label, shape);
  }
};

// Additive feature-map scaling: out = (x + alpha) * sigmoid(W_f*pool(x) + b_f),
// per channel, gate broadcast over time.
struct AFMS {
  Tensor alpha;      // [C], zero-initialized
  LinearLayer gate;  // C -> C

  AFMS() = default;
  AFMS(int channels, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

// Hierarchical-residual dilated conv over 4 channel groups: the first group
// passes through, each later group is convolved after adding the previous
// group's output.
struct Res2Dilated {
  std::vector<Conv1dLayer> convs;  // 3 convs, C/4 -> C/4, k=3, dilated
  int group = 0;

  Res2Dilated() = default;
  Res2Dilated(int channels, int dilation, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

// conv1x1 -> relu -> bn -> res2 -> relu -> bn -> conv1x1 -> relu -> bn -> afms.
// No internal residual; the enclosing block adds it.
struct AFMSRes2Block {
  Conv1dLayer conv_in, conv_out;
  BatchNormLayer bn1, bn2, bn3;
  Res2Dilated res2;
  AFMS afms;

  AFMSRes2Block() = default;
  AFMSRes2Block(int channels, int dilation, Rng& rng);
  Tensor forward(const Tensor& x, Mode mode) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

// Branch-attention gate: per-branch channel scores from pooled features
// through a shared bottleneck, softmax across the three branches, then a
// convex per-channel combination.
struct Gate {
  LinearLayer reduce;   // C -> d
  BatchNormLayer norm;  // over d
  LinearLayer restore;  // d -> C

  Gate() = default;
  Gate(int channels, int bottleneck, Rng& rng);
  // Branch scores stacked as [B,3,C], softmax over the branch axis.
  Tensor alphas(const Tensor& h1, const Tensor& h2, const Tensor& h3, Mode mode) const;
  // Convex combination using externally supplied alphas (seam for tests).
  static Tensor combine(const Tensor& alphas, const Tensor& h1, const Tensor& h2,
                        const Tensor& h3);
  Tensor forward(const Tensor& h1, const Tensor& h2, const Tensor& h3, Mode mode) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

// Average-pool halving; odd lengths are right-padded by replicating the final
// frame (flagged on the trace).
Tensor downsample_half(const Tensor& x, ForwardTrace* trace);

// One multi-resolution attention block: low/original/high resolution branches
// re-aligned to the input rate, gated per channel, plus the outer residual.
struct MRABlock {
  AFMSRes2Block low, orig, high;
  ConvT1dLayer up_low, up_high;  // k=2, s=2, nearest-duplication init
  Gate gate;

  MRABlock() = default;
  MRABlock(int channels, int dilation, Rng& rng);
  Tensor forward(const Tensor& x, Mode mode, ForwardTrace* trace) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct BackboneConfig {
  int channels = 256;              // C
  int blocks_per_stage = 3;        // B
  std::vector<int> stage_dilations = {2, 3, 4};
  int head_channels = 1536;        // width of o_7
};

// Three stages of B blocks each; stage outputs are concatenated and projected
// to the head width. No temporal pooling anywhere.
struct Backbone {
  BackboneConfig cfg;
  std::vector<std::vector<MRABlock>> stages;
  Conv1dLayer head;  // 3C -> head_channels, k=1

  struct Outputs {
    Tensor o3, o4, o5, o6, o7;
  };

  Backbone() = default;
  Backbone(const BackboneConfig& cfg, Rng& rng);
  Outputs forward(const Tensor& o2, Mode mode, ForwardTrace* trace) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

}  // namespace mrw
