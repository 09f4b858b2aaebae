#include "mrw/backbone.hpp"

#include <stdexcept>

namespace mrw {

// ---------------------------------------------------------------------------
// AFMS
// ---------------------------------------------------------------------------

AFMS::AFMS(int channels, Rng& rng)
    : alpha(Tensor::zeros({channels})), gate(channels, channels, rng) {}

Tensor AFMS::forward(const Tensor& x) const {
  const int batch = x.dim(0), ch = x.dim(1);
  Tensor pooled = reshape(adaptive_avg_pool(x), {batch, ch});
  Tensor s = reshape(sigmoid(gate.forward(pooled)), {batch, ch, 1});
  return scale_channels(add_channel_bias(x, alpha), s);
}

void AFMS::collect(const std::string& prefix, ParamList& out) const {
  add_param(out, prefix + ".alpha", alpha);
  gate.collect(prefix + ".gate", out);
}

// ---------------------------------------------------------------------------
// Res2Dilated
// ---------------------------------------------------------------------------

Res2Dilated::Res2Dilated(int channels, int dilation, Rng& rng) {
  if (channels % 4 != 0)
    throw std::invalid_argument("res2: channel width " + std::to_string(channels) +
                                " must be divisible by the scale 4");
  group = channels / 4;
  for (int i = 0; i < 3; ++i)
    convs.emplace_back(group, group, 3, rng, 1, dilation, Padding::kSame, 1, true);
}

Tensor Res2Dilated::forward(const Tensor& x) const {
  std::vector<Tensor> ys;
  Tensor prev = slice(x, 1, 0, group);
  ys.push_back(prev);
  for (int j = 1; j < 4; ++j) {
    Tensor xj = slice(x, 1, j * group, group);
    Tensor in = j == 1 ? xj : add(xj, prev);
    prev = convs[static_cast<size_t>(j - 1)].forward(in);
    ys.push_back(prev);
  }
  return concat(ys, 1);
}

void Res2Dilated::collect(const std::string& prefix, ParamList& out) const {
  for (size_t i = 0; i < convs.size(); ++i)
    convs[i].collect(prefix + ".conv" + std::to_string(i + 1), out);
}

// ---------------------------------------------------------------------------
// AFMS-Res2 block
// ---------------------------------------------------------------------------

AFMSRes2Block::AFMSRes2Block(int channels, int dilation, Rng& rng)
    : conv_in(channels, channels, 1, rng),
      conv_out(channels, channels, 1, rng),
      bn1(channels),
      bn2(channels),
      bn3(channels),
      res2(channels, dilation, rng),
      afms(channels, rng) {}

Tensor AFMSRes2Block::forward(const Tensor& x, Mode mode) const {
  Tensor h = bn1.forward(relu(conv_in.forward(x)), mode);
  h = bn2.forward(relu(res2.forward(h)), mode);
  h = bn3.forward(relu(conv_out.forward(h)), mode);
  return afms.forward(h);
}

void AFMSRes2Block::collect(const std::string& prefix, ParamList& out) const {
  conv_in.collect(prefix + ".conv_in", out);
  bn1.collect(prefix + ".bn1", out);
  res2.collect(prefix + ".res2", out);
  bn2.collect(prefix + ".bn2", out);
  conv_out.collect(prefix + ".conv_out", out);
  bn3.collect(prefix + ".bn3", out);
  afms.collect(prefix + ".afms", out);
}

// ---------------------------------------------------------------------------
// Gate
// ---------------------------------------------------------------------------

Gate::Gate(int channels, int bottleneck, Rng& rng)
    : reduce(channels, bottleneck, rng), norm(bottleneck),
      restore(bottleneck, channels, rng) {}

Tensor Gate::alphas(const Tensor& h1, const Tensor& h2, const Tensor& h3,
                    Mode mode) const {
  if (!h1.same_shape(h2) || !h1.same_shape(h3))
    throw std::invalid_argument("gate: branch shapes differ: " + shape_str(h1.shape()) +
                                ", " + shape_str(h2.shape()) + ", " +
                                shape_str(h3.shape()));
  const int batch = h1.dim(0), ch = h1.dim(1);
  auto score = [&](const Tensor& h) {
    Tensor pooled = reshape(adaptive_avg_pool(h), {batch, ch});
    Tensor z = restore.forward(norm.forward(relu(reduce.forward(pooled)), mode));
    return reshape(z, {batch, 1, ch});
  };
  Tensor z = concat({score(h1), score(h2), score(h3)}, 1);  // [B,3,C]
  return softmax(z, 1);
}

Tensor Gate::combine(const Tensor& alphas, const Tensor& h1, const Tensor& h2,
                     const Tensor& h3) {
  const int batch = h1.dim(0), ch = h1.dim(1);
  auto pick = [&](int t) { return reshape(slice(alphas, 1, t, 1), {batch, ch, 1}); };
  Tensor o = scale_channels(h1, pick(0));
  o = add(o, scale_channels(h2, pick(1)));
  return add(o, scale_channels(h3, pick(2)));
}

Tensor Gate::forward(const Tensor& h1, const Tensor& h2, const Tensor& h3,
                     Mode mode) const {
  return combine(alphas(h1, h2, h3, mode), h1, h2, h3);
}

void Gate::collect(const std::string& prefix, ParamList& out) const {
  reduce.collect(prefix + ".reduce", out);
  norm.collect(prefix + ".norm", out);
  restore.collect(prefix + ".restore", out);
}

// ---------------------------------------------------------------------------
// Resampling and MRA block
// ---------------------------------------------------------------------------

Tensor downsample_half(const Tensor& x, ForwardTrace* trace) {
  Tensor h = x;
  const int len = x.dim(2);
  if (len % 2 != 0) {
    h = concat({h, slice(h, 2, len - 1, 1)}, 2);
    if (trace) trace->odd_down_pad = true;
  }
  return pool1d(h, PoolKind::kAvg, 2, 2);
}

namespace {

// Overwrite an up-sampler's kernel with nearest-neighbor duplication:
// each output pair repeats its source frame.
void init_duplication(ConvT1dLayer& up, int channels) {
  for (int64_t i = 0; i < up.w.numel(); ++i) up.w.data()[i] = 0.0;
  for (int c = 0; c < channels; ++c)
    for (int k = 0; k < 2; ++k)
      up.w.data()[(static_cast<int64_t>(c) * channels + c) * 2 + k] = 1.0;
}

}  // namespace

MRABlock::MRABlock(int channels, int dilation, Rng& rng)
    : low(channels, dilation, rng),
      orig(channels, dilation, rng),
      high(channels, dilation, rng),
      up_low(channels, channels, 2, rng, 2),
      up_high(channels, channels, 2, rng, 2),
      gate(channels, std::max(1, channels / 2), rng) {
  init_duplication(up_low, channels);
  init_duplication(up_high, channels);
}

Tensor MRABlock::forward(const Tensor& x, Mode mode, ForwardTrace* trace) const {
  const int len = x.dim(2);
  if (len < 2)
    throw std::invalid_argument("attention block: need at least 2 frames, got " +
                                std::to_string(len));
  Tensor h_low = up_low.forward(low.forward(downsample_half(x, trace), mode));
  if (h_low.dim(2) != len) h_low = slice(h_low, 2, 0, len);
  Tensor h_orig = orig.forward(x, mode);
  Tensor h_high = downsample_half(high.forward(up_high.forward(x), mode), trace);
  Tensor o = gate.forward(h_low, h_orig, h_high, mode);
  return add(o, x);
}

void MRABlock::collect(const std::string& prefix, ParamList& out) const {
  low.collect(prefix + ".low", out);
  orig.collect(prefix + ".orig", out);
  high.collect(prefix + ".high", out);
  up_low.collect(prefix + ".up_low", out);
  up_high.collect(prefix + ".up_high", out);
  gate.collect(prefix + ".gate", out);
}

// ---------------------------------------------------------------------------
// Backbone
// ---------------------------------------------------------------------------

Backbone::Backbone(const BackboneConfig& cfg, Rng& rng) : cfg(cfg) {
  if (cfg.stage_dilations.size() != 3)
    throw std::invalid_argument("backbone: exactly three stage dilations required");
  if (cfg.blocks_per_stage < 1)
    throw std::invalid_argument("backbone: need at least one block per stage");
  for (int s = 0; s < 3; ++s) {
    std::vector<MRABlock> stage;
    for (int b = 0; b < cfg.blocks_per_stage; ++b)
      stage.emplace_back(cfg.channels, cfg.stage_dilations[static_cast<size_t>(s)], rng);
    stages.push_back(std::move(stage));
  }
  head = Conv1dLayer(3 * cfg.channels, cfg.head_channels, 1, rng);
}

Backbone::Outputs Backbone::forward(const Tensor& o2, Mode mode,
                                    ForwardTrace* trace) const {
  if (o2.dim(1) != cfg.channels)
    throw std::invalid_argument("backbone: expected " + std::to_string(cfg.channels) +
                                " input channels, got " + std::to_string(o2.dim(1)));
  Outputs out;
  Tensor h = o2;
  Tensor* outs[3] = {&out.o3, &out.o4, &out.o5};
  for (int s = 0; s < 3; ++s) {
    for (const auto& block : stages[static_cast<size_t>(s)])
      h = block.forward(h, mode, trace);
    *outs[s] = h;
  }
  out.o6 = concat({out.o3, out.o4, out.o5}, 1);
  out.o7 = relu(head.forward(out.o6));
  if (trace) {
    trace->note("o3", out.o3.shape());
    trace->note("o4", out.o4.shape());
    trace->note("o5", out.o5.shape());
    trace->note("o6", out.o6.shape());
    trace->note("o7", out.o7.shape());
  }
  return out;
}

void Backbone::collect(const std::string& prefix, ParamList& out) const {
  for (int s = 0; s < 3; ++s)
    for (int b = 0; b < cfg.blocks_per_stage; ++b)
      stages[static_cast<size_t>(s)][static_cast<size_t>(b)].collect(
          prefix + ".stage" + std::to_string(s + 1) + ".block" + std::to_string(b + 1),
          out);
  head.collect(prefix + ".head", out);
}

}  // namespace mrw
