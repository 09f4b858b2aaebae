#include "mrw/frontend.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace mrw {

std::vector<FEGeometry> derive_geometry(int k1, int m1, int n) {
  if (n < 1) throw std::invalid_argument("geometry: need at least one extractor");
  if (k1 < 5 || m1 < 2)
    throw std::invalid_argument("geometry: base kernels too small (K>=5, M>=2)");
  std::vector<FEGeometry> out;
  int k = k1, m = m1;
  for (int i = 1; i <= n; ++i) {
    if (k % 5 != 0)
      throw std::invalid_argument("geometry: kernel K_" + std::to_string(i) + "=" +
                                  std::to_string(k) +
                                  " is not divisible by 5 (stride 2K/5 must be integer)");
    if (m % 2 != 0)
      throw std::invalid_argument("geometry: last-conv kernel M_" + std::to_string(i) +
                                  "=" + std::to_string(m) +
                                  " is not even (stride M/2 must be integer)");
    FEGeometry g;
    g.index = i;
    g.kernel_pf = k;
    g.stride_pf = 2 * k / 5;
    g.kernel_last = m;
    g.stride_last = m / 2;
    out.push_back(g);
    if (i < n) {
      if (m / 2 < 2 || m % 2 != 0)
        throw std::invalid_argument("geometry: M_" + std::to_string(i + 1) +
                                    " would fall below 2; reduce the extractor count");
      k *= 2;
      m /= 2;
    }
  }
  return out;
}

int frame_stride(int k1, int m1) {
  if ((k1 * m1) % 5 != 0)
    throw std::invalid_argument("geometry: K_1*M_1 must be divisible by 5");
  return k1 * m1 / 5;
}

// ---------------------------------------------------------------------------
// ParamFbank
// ---------------------------------------------------------------------------

namespace {

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

}  // namespace

ParamFbankLayer::ParamFbankLayer(int filters, int kernel, int stride, Rng& rng)
    : f_lo({filters}), f_bw({filters}), gain(Tensor::full({filters}, 1.0)),
      kernel(kernel), stride(stride) {
  (void)rng;  // band-edge init is deterministic; kept for signature uniformity
  // Band edges on the mel scale spanning 30 Hz .. 8 kHz at 16 kHz sampling.
  const double sr = 16000.0;
  const double mel_lo = hz_to_mel(30.0), mel_hi = hz_to_mel(sr / 2.0);
  for (int f = 0; f < filters; ++f) {
    const double e0 = mel_to_hz(mel_lo + (mel_hi - mel_lo) * f / filters);
    const double e1 = mel_to_hz(mel_lo + (mel_hi - mel_lo) * (f + 1) / filters);
    f_lo.data()[f] = e0 / sr;
    f_bw.data()[f] = (e1 - e0) / sr;
  }
}

Tensor ParamFbankLayer::forward(const Tensor& x, bool compress) const {
  Tensor k = param_fbank_kernel(f_lo, f_bw, gain, kernel, min_band);
  Tensor y = conv1d(x, k, {}, stride, 1, Padding::kSame, 1);
  if (compress) y = log1p_op(abs_op(y));
  return y;
}

void ParamFbankLayer::collect(const std::string& prefix, ParamList& out) const {
  add_param(out, prefix + ".f_lo", f_lo);
  add_param(out, prefix + ".f_bw", f_bw);
  add_param(out, prefix + ".gain", gain);
}

// ---------------------------------------------------------------------------
// TCN
// ---------------------------------------------------------------------------

TCNBlock::TCNBlock(int channels, int hidden, int dilation, Rng& rng, bool bias)
    : expand(channels, hidden, 1, rng, 1, 1, Padding::kSame, 1, bias),
      depthwise(hidden, hidden, 3, rng, 1, dilation, Padding::kSame, hidden, bias),
      project(hidden, channels, 1, rng, 1, 1, Padding::kSame, 1, bias),
      act1(hidden),
      act2(hidden),
      norm1(hidden),
      norm2(hidden) {}

Tensor TCNBlock::forward(const Tensor& x) const {
  Tensor h = norm1.forward(act1.forward(expand.forward(x)));
  h = norm2.forward(act2.forward(depthwise.forward(h)));
  return add(x, project.forward(h));
}

void TCNBlock::collect(const std::string& prefix, ParamList& out) const {
  expand.collect(prefix + ".expand", out);
  act1.collect(prefix + ".act1", out);
  norm1.collect(prefix + ".norm1", out);
  depthwise.collect(prefix + ".depthwise", out);
  act2.collect(prefix + ".act2", out);
  norm2.collect(prefix + ".norm2", out);
  project.collect(prefix + ".project", out);
}

TCN::TCN(int channels, int hidden, int blocks, int repeats, Rng& rng, bool bias) {
  for (int r = 0; r < repeats; ++r)
    for (int x = 0; x < blocks; ++x)
      blocks_.emplace_back(channels, hidden, 1 << x, rng, bias);
}

Tensor TCN::forward(const Tensor& x) const {
  Tensor h = x;
  for (const auto& b : blocks_) h = b.forward(h);
  return h;
}

void TCN::collect(const std::string& prefix, ParamList& out) const {
  for (size_t i = 0; i < blocks_.size(); ++i)
    blocks_[i].collect(prefix + ".block" + std::to_string(i), out);
}

// ---------------------------------------------------------------------------
// Feature extractor and MRFE
// ---------------------------------------------------------------------------

FeatureExtractor::FeatureExtractor(const MRFEConfig& cfg, const FEGeometry& geo,
                                   Rng& rng)
    : geo(geo),
      compress(cfg.compress),
      fbank(cfg.fbank_filters, geo.kernel_pf, geo.stride_pf, rng),
      conv1x1(cfg.fbank_filters, cfg.channels, 1, rng, 1, 1, Padding::kSame, 1,
              cfg.use_bias),
      last(cfg.channels, cfg.channels, geo.kernel_last, rng, geo.stride_last, 1,
           Padding::kSame, 1, cfg.use_bias),
      tcn(cfg.channels, cfg.hidden, cfg.blocks, cfg.repeats, rng, cfg.use_bias) {}

std::pair<Tensor, Tensor> FeatureExtractor::forward(const Tensor& x,
                                                    const Tensor& skip_in) const {
  Tensor h = conv1x1.forward(fbank.forward(x, compress));
  if (skip_in.defined()) {
    if (!skip_in.same_shape(h))
      throw std::invalid_argument(
          "feature extractor " + std::to_string(geo.index) + ": skip input shape " +
          shape_str(skip_in.shape()) + " does not match branch shape " +
          shape_str(h.shape()));
    h = add(h, skip_in);
  }
  Tensor t = tcn.forward(h);
  Tensor y = last.forward(t);
  Tensor skip_out = pool1d(t, PoolKind::kMax, 2, 2);
  return {y, skip_out};
}

void FeatureExtractor::collect(const std::string& prefix, ParamList& out) const {
  fbank.collect(prefix + ".fbank", out);
  conv1x1.collect(prefix + ".conv1x1", out);
  tcn.collect(prefix + ".tcn", out);
  last.collect(prefix + ".last", out);
}

MRFE::MRFE(const MRFEConfig& cfg, Rng& rng) : cfg(cfg) {
  geos = derive_geometry(cfg.kernel1, cfg.last1, cfg.extractors);
  fes.reserve(geos.size());
  for (const auto& g : geos) fes.emplace_back(cfg, g, rng);
}

Tensor MRFE::forward(const Tensor& x) const {
  const int stride = frame_stride(cfg.kernel1, cfg.last1);
  if (x.rank() != 3 || x.dim(1) != 1)
    throw std::invalid_argument("front-end: input must be [B,1,T]");
  if (x.dim(2) % stride != 0)
    throw std::invalid_argument("front-end: waveform length " +
                                std::to_string(x.dim(2)) +
                                " must be a multiple of the frame stride " +
                                std::to_string(stride));
  std::vector<Tensor> ys;
  Tensor skip;
  for (const auto& fe : fes) {
    auto [y, skip_out] = fe.forward(x, skip);
    ys.push_back(y);
    skip = skip_out;
  }
  return ys.size() == 1 ? ys[0] : concat(ys, 1);
}

void MRFE::collect(const std::string& prefix, ParamList& out) const {
  for (size_t i = 0; i < fes.size(); ++i)
    fes[i].collect(prefix + ".fe" + std::to_string(i + 1), out);
}

}  // namespace mrw
