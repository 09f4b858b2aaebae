#include "mrw/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "mrw/textio.hpp"

namespace mrw {
namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr int kSampleRate = 16000;

// Two-pole resonator with zeros at z = +-1; peak gain is near unity at the
// center frequency regardless of bandwidth.
struct Resonator {
  double b0, a1, a2;
  double x1 = 0, x2 = 0, y1 = 0, y2 = 0;

  Resonator(double freq, double bw, double sr) {
    const double r = std::exp(-kPi * bw / sr);
    b0 = (1.0 - r * r) / 2.0;
    a1 = 2.0 * r * std::cos(2.0 * kPi * freq / sr);
    a2 = -(r * r);
  }

  double tick(double x) {
    const double y = b0 * (x - x2) + a1 * y1 + a2 * y2;
    x2 = x1;
    x1 = x;
    y2 = y1;
    y1 = y;
    return y;
  }
};

struct SpeakerRecipe {
  double f0 = 0, f1 = 0, f2 = 0, f3 = 0;
};

// Fixed per-speaker voice: fundamentals 24 Hz apart, resonator centers walked
// over coprime grids so no two speakers share a full formant triple.
SpeakerRecipe recipe_for(int k) {
  SpeakerRecipe r;
  r.f0 = 85.0 + 24.0 * k;
  r.f1 = 350.0 + 55.0 * ((3 * k) % 8);
  r.f2 = 1000.0 + 130.0 * ((5 * k) % 9);
  r.f3 = 2400.0 + 110.0 * ((7 * k) % 8);
  return r;
}

std::vector<double> render_utterance(const SpeakerRecipe& sp, Rng& rng) {
  const double dur = rng.uniform(2.0, 6.0);
  const int n = static_cast<int>(std::lround(dur * kSampleRate));
  const double f0 = sp.f0 + rng.uniform(-3.0, 3.0);
  const double vib_rate = rng.uniform(4.5, 5.5);
  const double vib_phase = rng.uniform(0.0, 2.0 * kPi);
  const double f1 = sp.f1 * (1.0 + rng.uniform(-0.02, 0.02));
  const double f2 = sp.f2 * (1.0 + rng.uniform(-0.02, 0.02));
  const double f3 = sp.f3 * (1.0 + rng.uniform(-0.02, 0.02));
  const double env_rate = rng.uniform(1.5, 3.5);
  const double env_phase = rng.uniform(0.0, 2.0 * kPi);

  Resonator r1(f1, 90.0, kSampleRate);
  Resonator r2(f2, 110.0, kSampleRate);
  Resonator r3(f3, 140.0, kSampleRate);

  std::vector<double> out(static_cast<size_t>(n));
  double phase = 0.0, tilt = 0.0;
  const int fade = kSampleRate / 20;  // 50 ms raised-cosine edges
  for (int i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / kSampleRate;
    const double inst =
        f0 * (1.0 + 0.01 * std::sin(2.0 * kPi * vib_rate * t + vib_phase));
    phase += inst / kSampleRate;
    phase -= std::floor(phase);
    const double saw = 2.0 * phase - 1.0;
    const double src = saw + 0.25 * rng.normal(0.0, 1.0);
    const double shaped = r1.tick(src) + 0.7 * r2.tick(src) + 0.5 * r3.tick(src);
    tilt = 0.65 * shaped + 0.35 * tilt;  // mild spectral tilt
    double env = 0.6 + 0.4 * std::sin(2.0 * kPi * env_rate * t + env_phase);
    if (i < fade) env *= 0.5 - 0.5 * std::cos(kPi * i / fade);
    const int remaining = n - 1 - i;
    if (remaining < fade) env *= 0.5 - 0.5 * std::cos(kPi * remaining / fade);
    out[static_cast<size_t>(i)] = tilt * env;
  }

  double mean_sq = 0.0;
  for (double v : out) mean_sq += v * v;
  const double rms = std::sqrt(mean_sq / n);
  const double scale = rms > 0.0 ? 0.1 / rms : 0.0;
  for (double& v : out) v *= scale;
  return out;
}

}  // namespace

std::vector<double> preemphasize(const std::vector<double>& x, double coef) {
  std::vector<double> y(x.size());
  for (size_t i = 0; i < x.size(); ++i)
    y[i] = i == 0 ? x[0] : x[i] - coef * x[i - 1];
  return y;
}

Tensor preemphasize(const Tensor& wave, double coef) {
  if (wave.rank() != 3 || wave.dim(1) != 1)
    throw std::invalid_argument("preemphasize: expected waveform [B,1,T]");
  Tensor y(wave.shape());
  const int batch = wave.dim(0), len = wave.dim(2);
  const double* xd = wave.data();
  double* yd = y.data();
  for (int b = 0; b < batch; ++b) {
    const double* xr = xd + static_cast<int64_t>(b) * len;
    double* yr = yd + static_cast<int64_t>(b) * len;
    yr[0] = xr[0];
    for (int i = 1; i < len; ++i) yr[i] = xr[i] - coef * xr[i - 1];
  }
  return y;
}

SynthCorpus synth_corpus(const CorpusConfig& cfg, uint64_t seed) {
  if (cfg.speakers < 2)
    throw std::invalid_argument("synth_corpus: need at least 2 speakers");
  if (cfg.utterances_per_speaker < 1)
    throw std::invalid_argument("synth_corpus: need at least 1 utterance per speaker");
  SynthCorpus corpus;
  corpus.speakers = cfg.speakers;
  const Rng root(seed);
  for (int k = 0; k < cfg.speakers; ++k) {
    const SpeakerRecipe sp = recipe_for(k);
    const int total = cfg.utterances_per_speaker + cfg.eval_utterances_per_speaker;
    for (int u = 0; u < total; ++u) {
      Rng utt_rng = root.fork((static_cast<uint64_t>(k) << 20) | static_cast<uint64_t>(u));
      Utterance utt;
      utt.speaker = k;
      utt.samples = render_utterance(sp, utt_rng);
      auto& part = u < cfg.utterances_per_speaker ? corpus.train : corpus.held_out;
      part.push_back(std::move(utt));
    }
  }
  return corpus;
}

Batch make_batch(const std::vector<Utterance>& utts, const BatchPolicy& policy,
                 int batch_size, int frame_stride, Rng& rng) {
  if (utts.empty()) throw std::invalid_argument("make_batch: no utterances");
  if (batch_size <= 0) throw std::invalid_argument("make_batch: batch_size must be positive");
  if (frame_stride <= 0) throw std::invalid_argument("make_batch: frame_stride must be positive");
  const int full_len = static_cast<int>(std::lround(policy.full_seconds * policy.sample_rate));
  const int min_len = static_cast<int>(std::lround(policy.min_seconds * policy.sample_rate));
  if (full_len % frame_stride != 0)
    throw std::invalid_argument("make_batch: fixed crop length " + std::to_string(full_len) +
                                " is not a multiple of the frame stride " +
                                std::to_string(frame_stride));
  if (min_len < frame_stride || min_len > full_len)
    throw std::invalid_argument("make_batch: invalid duration bounds");

  int crop = full_len;
  if (!rng.bernoulli(policy.p_full)) {
    const int64_t raw = rng.uniform_int(min_len, full_len);
    crop = static_cast<int>(raw / frame_stride) * frame_stride;
  }

  Batch batch;
  batch.crop_len = crop;
  batch.labels.resize(static_cast<size_t>(batch_size));
  batch.waves = Tensor({batch_size, 1, crop});
  double* wd = batch.waves.data();
  for (int b = 0; b < batch_size; ++b) {
    const auto pick = rng.uniform_int(0, static_cast<int64_t>(utts.size()) - 1);
    const Utterance& utt = utts[static_cast<size_t>(pick)];
    batch.labels[static_cast<size_t>(b)] = utt.speaker;
    const int len = static_cast<int>(utt.samples.size());
    double* row = wd + static_cast<int64_t>(b) * crop;
    if (len >= crop) {
      const int start = static_cast<int>(rng.uniform_int(0, len - crop));
      std::copy(utt.samples.begin() + start, utt.samples.begin() + start + crop, row);
    } else {
      // shorter utterance: wrap around from a random phase
      batch.wrapped = true;
      const int start = static_cast<int>(rng.uniform_int(0, len - 1));
      for (int i = 0; i < crop; ++i) row[i] = utt.samples[static_cast<size_t>((start + i) % len)];
    }
  }
  return batch;
}

AAMHead::AAMHead(int num_speakers, int dim, Rng& rng) : w({num_speakers, dim}) {
  init_uniform_fanin(w, dim, rng);
}

Tensor aam_softmax_loss(const Tensor& e, const std::vector<int>& labels,
                        const AAMHead& head, std::vector<double>* cosines_out) {
  if (e.rank() != 2 || e.dim(1) != head.w.dim(1))
    throw std::invalid_argument("aam_softmax_loss: embedding width does not match head");
  const Tensor e_n = l2_normalize_rows(e);
  const Tensor w_n = l2_normalize_rows(head.w);
  const Tensor cosines = linear(e_n, w_n, Tensor{});
  if (cosines_out) *cosines_out = cosines.values();
  const Tensor adjusted = aam_adjust(cosines, labels, head.margin);
  return cross_entropy(mul_scalar(adjusted, head.scale), labels);
}

double cosine_lr(int64_t step, int64_t total_steps, double lr_max, double lr_min) {
  if (total_steps <= 0) throw std::invalid_argument("cosine_lr: total_steps must be positive");
  if (step <= 0) return lr_max;
  if (step >= total_steps) return lr_min;
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(kPi * frac));
}

void AdamState::init(const ParamList& params) {
  step = 0;
  m.clear();
  v.clear();
  for (const ParamRef& p : params) {
    m.emplace_back(static_cast<size_t>(p.tensor.numel()), 0.0);
    v.emplace_back(static_cast<size_t>(p.tensor.numel()), 0.0);
  }
}

void adam_step(const ParamList& params, AdamState& state, double lr) {
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw std::invalid_argument("adam_step: state does not match parameter list");
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    if (!params[i].trainable) continue;
    Tensor t = params[i].tensor;
    double* w = t.data();
    const std::vector<double>& g = t.grad();
    std::vector<double>& mi = state.m[i];
    std::vector<double>& vi = state.v[i];
    const int64_t n = t.numel();
    for (int64_t j = 0; j < n; ++j) {
      // decoupled decay first, then the moment update
      w[j] *= 1.0 - lr * state.weight_decay;
      mi[j] = state.beta1 * mi[j] + (1.0 - state.beta1) * g[j];
      vi[j] = state.beta2 * vi[j] + (1.0 - state.beta2) * g[j] * g[j];
      const double mhat = mi[j] / bc1;
      const double vhat = vi[j] / bc2;
      w[j] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

TrainResult train_loop(Model& model, AAMHead& head, const SynthCorpus& corpus,
                       const RunConfig& rc) {
  namespace fs = std::filesystem;
  const TrainConfig& tc = rc.train;
  const int64_t total_steps = static_cast<int64_t>(tc.epochs) * tc.steps_per_epoch;
  if (total_steps <= 0) throw std::invalid_argument("train_loop: no steps scheduled");
  if (corpus.train.empty()) throw std::invalid_argument("train_loop: empty corpus");
  fs::create_directories(rc.out_dir);

  head.margin = tc.margin;
  head.scale = tc.scale;

  ParamList params = model.params();
  add_param(params, "head.w", head.w, true);
  for (ParamRef& p : params)
    if (p.trainable) p.tensor.set_requires_grad(true);

  AdamState adam;
  adam.weight_decay = tc.weight_decay;
  adam.init(params);

  BatchPolicy policy;
  policy.full_seconds = tc.full_seconds;
  policy.min_seconds = tc.min_seconds;
  policy.p_full = tc.p_full;

  Rng batch_rng = Rng(rc.seed).fork(0x5eed);

  std::ofstream metrics(fs::path(rc.out_dir) / "metrics.jsonl", std::ios::binary);
  if (!metrics) throw std::runtime_error("train_loop: cannot open metrics file in " + rc.out_dir);

  TrainResult result;
  const int frame_stride = model.cfg.frame_stride();
  // schedule spans the run so the first step uses lr_max and the last lr_min
  const int64_t denom = std::max<int64_t>(1, total_steps - 1);
  for (int64_t step = 0; step < total_steps; ++step) {
    const double lr = cosine_lr(step, denom, tc.lr_max, tc.lr_min);
    Batch batch = make_batch(corpus.train, policy, tc.batch_size, frame_stride, batch_rng);
    const Tensor x = preemphasize(batch.waves, model.cfg.preemphasis);

    double loss_value = 0.0, accuracy = 0.0;
    {
      Tape tape;
      TapeScope scope(tape);
      const Tensor emb = model.forward(x, Mode::kTrain);
      std::vector<double> cosines;
      const Tensor loss = aam_softmax_loss(emb, batch.labels, head, &cosines);
      loss_value = loss.value();
      if (!std::isfinite(loss_value)) {
        const double* bw = batch.waves.data();
        const int64_t n = batch.waves.numel();
        double mean = 0.0;
        for (int64_t i = 0; i < n; ++i) mean += bw[i];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (int64_t i = 0; i < n; ++i) var += (bw[i] - mean) * (bw[i] - mean);
        var /= static_cast<double>(n);
        throw std::runtime_error(
            "train_loop: non-finite loss at step " + std::to_string(step) +
            " (crop=" + std::to_string(batch.crop_len) + ", wave mean=" + fmt_double(mean) +
            ", wave std=" + fmt_double(std::sqrt(var)) +
            (batch.wrapped ? ", wrapped" : "") + ")");
      }
      const int speakers = head.w.dim(0);
      int correct = 0;
      for (int b = 0; b < tc.batch_size; ++b) {
        int best = 0;
        for (int j = 1; j < speakers; ++j)
          if (cosines[static_cast<size_t>(b) * speakers + j] >
              cosines[static_cast<size_t>(b) * speakers + best])
            best = j;
        if (best == batch.labels[static_cast<size_t>(b)]) ++correct;
      }
      accuracy = static_cast<double>(correct) / tc.batch_size;
      for (ParamRef& p : params) p.tensor.zero_grad();
      tape.backward(loss);
    }
    adam_step(params, adam, lr);

    metrics << "{\"step\":" << step << ",\"loss\":" << fmt_double(loss_value)
            << ",\"lr\":" << fmt_double(lr) << ",\"acc\":" << fmt_double(accuracy) << "}\n";
    metrics.flush();
    result.losses.push_back(loss_value);

    if ((step + 1) % tc.steps_per_epoch == 0) {
      const int epoch = static_cast<int>((step + 1) / tc.steps_per_epoch);
      char name[32];
      std::snprintf(name, sizeof(name), "epoch_%02d.mrrw", epoch);
      save_checkpoint(model, (fs::path(rc.out_dir) / name).string());
    }
  }

  const std::string final_path = (fs::path(rc.out_dir) / "final.mrrw").string();
  save_checkpoint(model, final_path);
  result.final_checkpoint = final_path;
  result.final_accuracy = classification_accuracy(model, head, corpus.train);
  return result;
}

double classification_accuracy(const Model& model, const AAMHead& head,
                               const std::vector<Utterance>& utts) {
  if (utts.empty()) return 0.0;
  const int frame_stride = model.cfg.frame_stride();
  const int speakers = head.w.dim(0);
  const int dim = head.w.dim(1);

  std::vector<double> wn(head.w.values());
  for (int j = 0; j < speakers; ++j) {
    double ss = 0.0;
    for (int d = 0; d < dim; ++d) ss += wn[static_cast<size_t>(j) * dim + d] * wn[static_cast<size_t>(j) * dim + d];
    const double inv = 1.0 / std::max(std::sqrt(ss), 1e-12);
    for (int d = 0; d < dim; ++d) wn[static_cast<size_t>(j) * dim + d] *= inv;
  }

  int correct = 0;
  for (const Utterance& utt : utts) {
    const int len = static_cast<int>(utt.samples.size()) / frame_stride * frame_stride;
    if (len <= 0)
      throw std::invalid_argument("classification_accuracy: utterance shorter than one frame");
    Tensor wave({1, 1, len});
    std::copy(utt.samples.begin(), utt.samples.begin() + len, wave.data());
    const Tensor emb = model.forward(preemphasize(wave, model.cfg.preemphasis), Mode::kEval);
    if (emb.rank() != 2 || emb.dim(1) != dim)
      throw std::invalid_argument("classification_accuracy: embedding width does not match head");
    const double* e = emb.data();
    double ss = 0.0;
    for (int d = 0; d < dim; ++d) ss += e[d] * e[d];
    const double inv = 1.0 / std::max(std::sqrt(ss), 1e-12);
    int best = 0;
    double best_score = -1e300;
    for (int j = 0; j < speakers; ++j) {
      double dot = 0.0;
      for (int d = 0; d < dim; ++d) dot += e[d] * inv * wn[static_cast<size_t>(j) * dim + d];
      if (dot > best_score) {
        best_score = dot;
        best = j;
      }
    }
    if (best == utt.speaker) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(utts.size());
}

}  // namespace mrw
