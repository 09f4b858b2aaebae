#include "mrw/model.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

#include "mrw/config.hpp"

namespace mrw {

// ---------------------------------------------------------------------------
// ASP
// ---------------------------------------------------------------------------

ASP::ASP(int head_channels, int d_att, Rng& rng)
    : bottleneck(3 * head_channels, d_att, 1, rng),
      proj(d_att, head_channels, 1, rng),
      head_channels(head_channels) {}

Tensor ASP::weights(const Tensor& o7) const {
  const int len = o7.dim(2);
  Tensor mean = reduce_time(o7, /*mean=*/true);
  Tensor var = sub(reduce_time(square(o7), true), square(mean));
  Tensor stddev = sqrt_op(relu(var));
  Tensor context =
      concat({o7, broadcast_time(mean, len), broadcast_time(stddev, len)}, 1);
  Tensor e = proj.forward(tanh_op(bottleneck.forward(context)));
  return softmax(e, 2);
}

Tensor ASP::forward(const Tensor& o7) const {
  Tensor w = weights(o7);
  Tensor mu = reduce_time(mul(w, o7), /*mean=*/false);
  Tensor ex2 = reduce_time(mul(w, square(o7)), /*mean=*/false);
  Tensor sig = sqrt_op(relu(sub(ex2, square(mu))));
  return reshape(concat({mu, sig}, 1), {o7.dim(0), 2 * head_channels});
}

void ASP::collect(const std::string& prefix, ParamList& out) const {
  bottleneck.collect(prefix + ".bottleneck", out);
  proj.collect(prefix + ".proj", out);
}

// ---------------------------------------------------------------------------
// ModelConfig
// ---------------------------------------------------------------------------

int ModelConfig::frame_stride() const {
  if (variant == Variant::kMRRawNet) return mrw::frame_stride(mrfe.kernel1, mrfe.last1);
  int s = baseline_stride;
  for (int p : baseline_pools) s *= p;
  return s;
}

nlohmann::json ModelConfig::to_json() const {
  nlohmann::json j;
  j["variant"] = variant == Variant::kMRRawNet ? "mr-rawnet" : "rawnet3-baseline";
  j["mrfe"] = {{"extractors", mrfe.extractors},
               {"kernel1", mrfe.kernel1},
               {"last1", mrfe.last1},
               {"fbank_filters", mrfe.fbank_filters},
               {"channels", mrfe.channels},
               {"hidden", mrfe.hidden},
               {"blocks", mrfe.blocks},
               {"repeats", mrfe.repeats},
               {"compress", mrfe.compress},
               {"use_bias", mrfe.use_bias}};
  j["backbone"] = {{"channels", backbone.channels},
                   {"blocks_per_stage", backbone.blocks_per_stage},
                   {"stage_dilations", backbone.stage_dilations},
                   {"head_channels", backbone.head_channels}};
  j["d_att"] = d_att;
  j["embed_dim"] = embed_dim;
  j["preemphasis"] = preemphasis;
  j["baseline"] = {{"filters", baseline_filters},
                   {"channels", baseline_channels},
                   {"kernel", baseline_kernel},
                   {"stride", baseline_stride},
                   {"pools", baseline_pools}};
  return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j, const std::string& path) {
  cfg::require_object(j, path);
  cfg::require_known_keys(
      j, {"variant", "mrfe", "backbone", "d_att", "embed_dim", "preemphasis", "baseline"},
      path);
  ModelConfig c;
  const std::string variant = cfg::get_string(j, "variant", "mr-rawnet", path);
  if (variant == "mr-rawnet")
    c.variant = Variant::kMRRawNet;
  else if (variant == "rawnet3-baseline")
    c.variant = Variant::kRawNet3Baseline;
  else
    throw ConfigError(path + ".variant: unknown variant '" + variant +
                      "' (expected mr-rawnet or rawnet3-baseline)");
  if (j.contains("mrfe")) {
    const auto& m = cfg::require_object(j.at("mrfe"), path + ".mrfe");
    cfg::require_known_keys(m,
                            {"extractors", "kernel1", "last1", "fbank_filters",
                             "channels", "hidden", "blocks", "repeats", "compress",
                             "use_bias"},
                            path + ".mrfe");
    c.mrfe.extractors = cfg::get_int(m, "extractors", c.mrfe.extractors, path + ".mrfe");
    c.mrfe.kernel1 = cfg::get_int(m, "kernel1", c.mrfe.kernel1, path + ".mrfe");
    c.mrfe.last1 = cfg::get_int(m, "last1", c.mrfe.last1, path + ".mrfe");
    c.mrfe.fbank_filters =
        cfg::get_int(m, "fbank_filters", c.mrfe.fbank_filters, path + ".mrfe");
    c.mrfe.channels = cfg::get_int(m, "channels", c.mrfe.channels, path + ".mrfe");
    c.mrfe.hidden = cfg::get_int(m, "hidden", c.mrfe.hidden, path + ".mrfe");
    c.mrfe.blocks = cfg::get_int(m, "blocks", c.mrfe.blocks, path + ".mrfe");
    c.mrfe.repeats = cfg::get_int(m, "repeats", c.mrfe.repeats, path + ".mrfe");
    c.mrfe.compress = cfg::get_bool(m, "compress", c.mrfe.compress, path + ".mrfe");
    c.mrfe.use_bias = cfg::get_bool(m, "use_bias", c.mrfe.use_bias, path + ".mrfe");
  }
  if (j.contains("backbone")) {
    const auto& b = cfg::require_object(j.at("backbone"), path + ".backbone");
    cfg::require_known_keys(
        b, {"channels", "blocks_per_stage", "stage_dilations", "head_channels"},
        path + ".backbone");
    c.backbone.channels =
        cfg::get_int(b, "channels", c.backbone.channels, path + ".backbone");
    c.backbone.blocks_per_stage = cfg::get_int(b, "blocks_per_stage",
                                               c.backbone.blocks_per_stage,
                                               path + ".backbone");
    c.backbone.head_channels =
        cfg::get_int(b, "head_channels", c.backbone.head_channels, path + ".backbone");
    if (b.contains("stage_dilations")) {
      if (!b.at("stage_dilations").is_array())
        throw ConfigError(path + ".backbone.stage_dilations: expected an array");
      c.backbone.stage_dilations.clear();
      for (const auto& d : b.at("stage_dilations"))
        c.backbone.stage_dilations.push_back(d.get<int>());
    }
  }
  c.d_att = cfg::get_int(j, "d_att", c.d_att, path);
  c.embed_dim = cfg::get_int(j, "embed_dim", c.embed_dim, path);
  c.preemphasis = cfg::get_number(j, "preemphasis", c.preemphasis, path);
  if (j.contains("baseline")) {
    const auto& b = cfg::require_object(j.at("baseline"), path + ".baseline");
    cfg::require_known_keys(b, {"filters", "channels", "kernel", "stride", "pools"},
                            path + ".baseline");
    c.baseline_filters = cfg::get_int(b, "filters", c.baseline_filters, path + ".baseline");
    c.baseline_channels =
        cfg::get_int(b, "channels", c.baseline_channels, path + ".baseline");
    c.baseline_kernel = cfg::get_int(b, "kernel", c.baseline_kernel, path + ".baseline");
    c.baseline_stride = cfg::get_int(b, "stride", c.baseline_stride, path + ".baseline");
    if (b.contains("pools")) {
      if (!b.at("pools").is_array() || b.at("pools").size() != 3)
        throw ConfigError(path + ".baseline.pools: expected an array of three ints");
      c.baseline_pools.clear();
      for (const auto& p : b.at("pools")) c.baseline_pools.push_back(p.get<int>());
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

Tensor Model::forward(const Tensor& wave, Mode mode, ForwardTrace* trace) const {
  if (wave.rank() != 3 || wave.dim(1) != 1)
    throw std::invalid_argument("model: input must be [B,1,T]");
  const int stride = cfg.frame_stride();
  if (wave.dim(2) % stride != 0)
    throw std::invalid_argument("model: waveform length " + std::to_string(wave.dim(2)) +
                                " is not a multiple of the frame stride " +
                                std::to_string(stride) + "; crop before calling");
  Tensor o7;
  if (cfg.variant == Variant::kMRRawNet) {
    Tensor o1 = mrfe.forward(wave);
    if (trace) trace->note("o1", o1.shape());
    Tensor o2 = o2conv.forward(o1);
    if (trace) trace->note("o2", o2.shape());
    o7 = backbone.forward(o2, mode, trace).o7;
  } else {
    Tensor f = b_fbank.forward(wave, /*compress=*/true);
    Tensor h = b_conv1x1.forward(f);
    if (trace) trace->note("o2", h.shape());
    std::vector<Tensor> stage_outs;
    for (size_t s = 0; s < b_blocks.size(); ++s) {
      h = add(h, b_blocks[s].forward(h, mode));
      const int p = cfg.baseline_pools[s];
      h = pool1d(h, PoolKind::kMax, p, p);
      stage_outs.push_back(h);
      if (trace) trace->note("o" + std::to_string(3 + s), h.shape());
    }
    // Bring all stage outputs to the final frame rate, trimming any
    // floor-division mismatch before the concat.
    std::vector<Tensor> aligned;
    for (size_t s = 0; s < stage_outs.size(); ++s) {
      int factor = 1;
      for (size_t r = s + 1; r < cfg.baseline_pools.size(); ++r)
        factor *= cfg.baseline_pools[r];
      aligned.push_back(factor == 1 ? stage_outs[s]
                                    : pool1d(stage_outs[s], PoolKind::kMax, factor,
                                             factor));
    }
    int min_len = aligned[0].dim(2);
    for (const auto& a : aligned) min_len = std::min(min_len, a.dim(2));
    for (auto& a : aligned)
      if (a.dim(2) != min_len) a = slice(a, 2, 0, min_len);
    Tensor o6 = concat(aligned, 1);
    if (trace) trace->note("o6", o6.shape());
    o7 = relu(b_head.forward(o6));
    if (trace) trace->note("o7", o7.shape());
  }
  Tensor o8 = asp.forward(o7);
  if (trace) trace->note("o8", o8.shape());
  Tensor e = embed.forward(o8);
  if (trace) trace->note("embedding", e.shape());
  return e;
}

ParamList Model::params() const {
  ParamList out;
  if (cfg.variant == Variant::kMRRawNet) {
    mrfe.collect("frontend", out);
    o2conv.collect("projection", out);
    backbone.collect("backbone", out);
  } else {
    b_fbank.collect("fbank", out);
    b_conv1x1.collect("projection", out);
    for (size_t s = 0; s < b_blocks.size(); ++s)
      b_blocks[s].collect("stages.stage" + std::to_string(s + 1), out);
    b_head.collect("stages.head", out);
  }
  asp.collect("pooling", out);
  embed.collect("embedding", out);
  return out;
}

int64_t Model::count_params(bool trainable_only) const {
  int64_t total = 0;
  for (const auto& p : params())
    if (!trainable_only || p.trainable) total += p.tensor.numel();
  return total;
}

std::map<std::string, int64_t> Model::count_by_module() const {
  std::map<std::string, int64_t> out;
  for (const auto& p : params()) {
    if (!p.trainable) continue;
    const auto dot = p.path.find('.');
    out[p.path.substr(0, dot)] += p.tensor.numel();
  }
  return out;
}

Model assemble(const ModelConfig& cfg, uint64_t seed) {
  Rng rng(seed);
  Model m;
  m.cfg = cfg;
  if (cfg.variant == Variant::kMRRawNet) {
    m.mrfe = MRFE(cfg.mrfe, rng);
    m.o2conv = Conv1dLayer(m.mrfe.out_channels(), cfg.backbone.channels, 1, rng);
    m.backbone = Backbone(cfg.backbone, rng);
  } else {
    if (cfg.baseline_pools.size() != 3)
      throw ConfigError("baseline: exactly three pooling sizes required");
    m.b_fbank = ParamFbankLayer(cfg.baseline_filters, cfg.baseline_kernel,
                                cfg.baseline_stride, rng);
    m.b_conv1x1 = Conv1dLayer(cfg.baseline_filters, cfg.baseline_channels, 1, rng);
    for (size_t s = 0; s < 3; ++s)
      m.b_blocks.emplace_back(cfg.baseline_channels,
                              cfg.backbone.stage_dilations[s], rng);
    m.b_head = Conv1dLayer(3 * cfg.baseline_channels, cfg.backbone.head_channels, 1,
                           rng);
  }
  m.asp = ASP(cfg.backbone.head_channels, cfg.d_att, rng);
  m.embed = LinearLayer(2 * cfg.backbone.head_channels, cfg.embed_dim, rng);
  return m;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[5] = {'M', 'R', 'R', 'W', '1'};

void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void write_f32(std::ostream& os, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  write_u32(os, bits);
}

float read_f32(std::istream& is) {
  const uint32_t bits = read_u32(is);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace

void save_checkpoint(const Model& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
  os.write(kMagic, 5);
  const std::string cfg_json = model.cfg.to_json().dump();
  write_u32(os, static_cast<uint32_t>(cfg_json.size()));
  os.write(cfg_json.data(), static_cast<std::streamsize>(cfg_json.size()));
  const ParamList ps = model.params();
  write_u32(os, static_cast<uint32_t>(ps.size()));
  for (const auto& p : ps) {
    write_u32(os, static_cast<uint32_t>(p.path.size()));
    os.write(p.path.data(), static_cast<std::streamsize>(p.path.size()));
    const unsigned char trainable = p.trainable ? 1 : 0;
    os.write(reinterpret_cast<const char*>(&trainable), 1);
    write_u32(os, static_cast<uint32_t>(p.tensor.rank()));
    for (int d : p.tensor.shape()) write_u32(os, static_cast<uint32_t>(d));
    for (int64_t i = 0; i < p.tensor.numel(); ++i)
      write_f32(os, static_cast<float>(p.tensor.data()[i]));
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

Model load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  char magic[5];
  is.read(magic, 5);
  if (!is || std::memcmp(magic, kMagic, 5) != 0)
    throw std::runtime_error("checkpoint: '" + path + "' is not a MRRW1 checkpoint");
  const uint32_t cfg_len = read_u32(is);
  std::string cfg_json(cfg_len, '\0');
  is.read(cfg_json.data(), cfg_len);
  if (!is) throw std::runtime_error("checkpoint: truncated config block");
  nlohmann::json j = nlohmann::json::parse(cfg_json, nullptr, false);
  if (j.is_discarded())
    throw std::runtime_error("checkpoint: embedded config is not valid JSON");
  Model m = assemble(ModelConfig::from_json(j, "checkpoint.config"), 0);

  ParamList ps = m.params();
  std::map<std::string, Tensor> by_path;
  for (const auto& p : ps) by_path[p.path] = p.tensor;

  const uint32_t n_entries = read_u32(is);
  if (n_entries != ps.size())
    throw std::runtime_error("checkpoint: entry count " + std::to_string(n_entries) +
                             " does not match model parameter count " +
                             std::to_string(ps.size()));
  for (uint32_t e = 0; e < n_entries; ++e) {
    const uint32_t name_len = read_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    char trainable;
    is.read(&trainable, 1);
    const uint32_t rank = read_u32(is);
    std::vector<int> shape;
    for (uint32_t r = 0; r < rank; ++r) shape.push_back(static_cast<int>(read_u32(is)));
    auto it = by_path.find(name);
    if (it == by_path.end())
      throw std::runtime_error("checkpoint: unknown parameter path '" + name + "'");
    Tensor t = it->second;
    if (t.shape() != shape)
      throw std::runtime_error("checkpoint: shape mismatch for '" + name + "': file " +
                               shape_str(shape) + ", model " + shape_str(t.shape()));
    for (int64_t i = 0; i < t.numel(); ++i)
      t.data()[i] = static_cast<double>(read_f32(is));
  }
  if (!is) throw std::runtime_error("checkpoint: truncated parameter data");
  return m;
}

}  // namespace mrw
