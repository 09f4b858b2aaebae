#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "mrw/backbone.hpp"
#include "mrw/frontend.hpp"
#include "mrw/layers.hpp"

namespace mrw {

// Attentive statistics pooling with channel- and context-dependent weights:
// softmax-over-time scores drive a weighted mean and weighted std, stacked
// into a fixed-size utterance vector regardless of input length.
struct ASP {
  Conv1dLayer bottleneck;  // 3*H -> d_att, k=1
  Conv1dLayer proj;        // d_att -> H, k=1
  int head_channels = 0;

  ASP() = default;
  ASP(int head_channels, int d_att, Rng& rng);
  // Per-channel softmax-over-time attention weights, [B,H,L].
  Tensor weights(const Tensor& o7) const;
  Tensor forward(const Tensor& o7) const;  // [B, 2*H]
  void collect(const std::string& prefix, ParamList& out) const;
};

enum class Variant { kMRRawNet, kRawNet3Baseline };

struct ModelConfig {
  Variant variant = Variant::kMRRawNet;
  MRFEConfig mrfe;
  BackboneConfig backbone;
  int d_att = 128;
  int embed_dim = 256;
  double preemphasis = 0.97;

  // Baseline-only settings: a single filterbank followed by three
  // block+max-pool stages.
  int baseline_filters = 256;
  int baseline_channels = 1024;
  int baseline_kernel = 251;
  int baseline_stride = 50;
  std::vector<int> baseline_pools = {5, 3, 2};

  // Samples per output frame of the front-end.
  int frame_stride() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j, const std::string& path);
};

struct Model {
  ModelConfig cfg;

  // Multi-resolution path.
  MRFE mrfe;
  Conv1dLayer o2conv;  // F -> C, k=1
  Backbone backbone;

  // Baseline path.
  ParamFbankLayer b_fbank;
  Conv1dLayer b_conv1x1;
  std::vector<AFMSRes2Block> b_blocks;
  Conv1dLayer b_head;

  // Shared head.
  ASP asp;
  LinearLayer embed;

  Tensor forward(const Tensor& wave, Mode mode, ForwardTrace* trace = nullptr) const;
  ParamList params() const;
  int64_t count_params(bool trainable_only = true) const;
  // Trainable counts grouped by top-level module name.
  std::map<std::string, int64_t> count_by_module() const;
};

Model assemble(const ModelConfig& cfg, uint64_t seed);

// Checkpoint: "MRRW1" magic, config JSON, then named float32 little-endian
// entries for every parameter and buffer.
void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace mrw
