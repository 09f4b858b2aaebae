// Desk-scale acceptance run: ten numbered checks covering geometry, parameter
// budget, gradients, normalization laws, metric oracles, schedule/loss
// anchors, the overfit oracle, duration robustness, batch statistics, and
// determinism. One PASS/FAIL line per check; nonzero exit if any fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mrw/evaluator.hpp"
#include "mrw/frontend.hpp"
#include "mrw/ops.hpp"
#include "mrw/trainer.hpp"
#include "mrw/verify.hpp"

using namespace mrw;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* format, ...) {
  char buf[512];
  va_list args;
  va_start(args, format);
  std::vsnprintf(buf, sizeof(buf), format, args);
  va_end(args);
  return buf;
}

int ceil_div(int a, int b) { return (a + b - 1) / b; }

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) return "<unreadable:" + path + ">";
  return std::string(std::istreambuf_iterator<char>(is),
                     std::istreambuf_iterator<char>());
}

// ---------------------------------------------------------------------------
// Shared micro run used by the overfit and duration checks.
// ---------------------------------------------------------------------------

RunConfig overfit_config(uint64_t seed) {
  RunConfig rc;
  rc.seed = seed;
  rc.out_dir = "acceptance_out/seed" + std::to_string(seed);
  rc.train.epochs = 10;
  rc.train.steps_per_epoch = 16;
  rc.train.batch_size = 16;
  rc.model.mrfe.extractors = 2;
  rc.model.mrfe.fbank_filters = 24;
  rc.model.mrfe.channels = 16;
  rc.model.mrfe.hidden = 24;
  rc.model.mrfe.blocks = 2;
  rc.model.mrfe.repeats = 1;
  rc.model.backbone.channels = 24;
  rc.model.backbone.blocks_per_stage = 1;
  rc.model.backbone.head_channels = 64;
  rc.model.d_att = 32;
  rc.model.embed_dim = 64;
  return rc;
}

struct OverfitRun {
  double accuracy = 0.0;
  double eer_full = 100.0, eer_1s = 100.0;
  int trials = 0;
  bool dims_consistent = false;
};

OverfitRun run_overfit(uint64_t seed, bool all_durations) {
  const RunConfig rc = overfit_config(seed);
  SynthCorpus corpus = synth_corpus(rc.corpus, rc.seed);
  Model model = assemble(rc.model, rc.seed);
  Rng head_rng = Rng(rc.seed).fork(0xAA);
  AAMHead head(rc.corpus.speakers, rc.model.embed_dim, head_rng);

  OverfitRun out;
  const TrainResult tr = train_loop(model, head, corpus, rc);
  out.accuracy = tr.final_accuracy;

  UtteranceStore store;
  std::vector<LabeledUtt> labeled;
  for (size_t i = 0; i < corpus.held_out.size(); ++i) {
    const std::string id = "u" + std::to_string(i);
    store[id] = corpus.held_out[i].samples;
    labeled.push_back({id, corpus.held_out[i].speaker});
  }
  Rng trial_rng = Rng(rc.seed).fork(0x7817);
  const std::vector<Trial> trials = make_trials(labeled, 1, trial_rng);
  out.trials = static_cast<int>(trials.size());

  const std::vector<std::string> durations =
      all_durations ? std::vector<std::string>{"full", "5", "2", "1"}
                    : std::vector<std::string>{"full", "1"};
  const ScoreReport report = evaluate(model, store, trials, durations, 1);
  for (const DurationRow& row : report.rows) {
    if (row.duration == "full") out.eer_full = row.eer_percent;
    if (row.duration == "1") out.eer_1s = row.eer_percent;
  }

  out.dims_consistent = true;
  for (int seconds : {1, 2, 3, 5}) {
    Tensor wave({1, 1, seconds * 16000});
    for (int64_t i = 0; i < wave.numel(); ++i)
      wave.data()[i] = 0.05 * std::sin(0.03 * static_cast<double>(i));
    const Tensor e = model.forward(wave, Mode::kEval);
    if (e.rank() != 2 || e.dim(1) != rc.model.embed_dim) out.dims_consistent = false;
  }
  return out;
}

std::optional<OverfitRun> g_seed11;

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

Outcome c1_geometry() {
  if (frame_stride(50, 16) != 160) return {false, "frame stride is not 160"};
  const std::vector<FEGeometry> gs = derive_geometry(50, 16, 4);
  if (gs.size() != 4) return {false, "expected 4 extractors"};
  for (const FEGeometry& g : gs) {
    if (g.stride_pf * g.stride_last != 160)
      return {false, fmt("extractor %d stride product != 160", g.index)};
    const int frames = ceil_div(ceil_div(48000, g.stride_pf), g.stride_last);
    if (frames != 300)
      return {false, fmt("extractor %d yields %d frames at 48000", g.index, frames)};
  }
  return {true, "frame stride 160; every extractor yields 300 frames at 48000"};
}

Outcome c2_parameters() {
  const int64_t mr = assemble(ModelConfig{}, 1).count_params();
  ModelConfig base_cfg;
  base_cfg.variant = Variant::kRawNet3Baseline;
  const int64_t base = assemble(base_cfg, 1).count_params();
  const bool in_window = mr >= 12400000 && mr <= 18600000;
  const bool ordered = mr < base;
  return {in_window && ordered,
          fmt("model %.2fM in [12.4M, 18.6M]; baseline %.2fM %s", mr / 1e6,
              base / 1e6, ordered ? "above it" : "NOT above it")};
}

Outcome c3_gradients() {
  const std::vector<SuiteResult> results = run_full();
  int grads = 0;
  std::string worst_name;
  std::string failures;
  for (const SuiteResult& r : results) {
    if (r.name.rfind("grad-", 0) != 0) continue;
    ++grads;
    if (!r.pass) failures += (failures.empty() ? "" : ", ") + r.name;
    std::printf("    %-24s %s %s\n", r.name.c_str(), r.pass ? "ok," : "FAILED:",
                r.detail.c_str());
  }
  if (grads < 7) return {false, fmt("only %d gradient suites ran", grads)};
  if (!failures.empty()) return {false, "failing blocks: " + failures};
  return {true, fmt("%d block-level finite-difference audits below 1e-4", grads)};
}

Outcome c4_normalization() {
  Rng rng(404);

  // Softmax rows sum to one along every axis.
  Tensor x({3, 5, 7});
  for (int64_t i = 0; i < x.numel(); ++i) x.data()[i] = rng.uniform(-4.0, 4.0);
  for (int axis = 0; axis < 3; ++axis) {
    const Tensor s = softmax(x, axis);
    const int n0 = s.dim(0), n1 = s.dim(1), n2 = s.dim(2);
    for (int a = 0; a < n0; ++a)
      for (int b = 0; b < n1; ++b)
        for (int c = 0; c < n2; ++c) {
          if (axis == 0 && a) continue;
          if (axis == 1 && b) continue;
          if (axis == 2 && c) continue;
          double sum = 0.0;
          const int steps = axis == 0 ? n0 : axis == 1 ? n1 : n2;
          for (int k = 0; k < steps; ++k) {
            const int ia = axis == 0 ? k : a, ib = axis == 1 ? k : b,
                      ic = axis == 2 ? k : c;
            sum += s.data()[(static_cast<int64_t>(ia) * n1 + ib) * n2 + ic];
          }
          if (std::fabs(sum - 1.0) > 1e-12)
            return {false, fmt("softmax sum off by %.2e on axis %d",
                               std::fabs(sum - 1.0), axis)};
        }
  }

  // Branch gate weights form a convex combination per channel.
  const Gate gate(6, 3, rng);
  auto rand_map = [&](std::vector<int> shape) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(-1.0, 1.0);
    return t;
  };
  const Tensor alphas = gate.alphas(rand_map({2, 6, 9}), rand_map({2, 6, 9}),
                                    rand_map({2, 6, 9}), Mode::kEval);
  for (int b = 0; b < 2; ++b)
    for (int c = 0; c < 6; ++c) {
      double sum = 0.0;
      for (int k = 0; k < 3; ++k)
        sum += alphas.data()[(static_cast<int64_t>(b) * 3 + k) * 6 + c];
      if (std::fabs(sum - 1.0) > 1e-12)
        return {false, fmt("gate weights sum off by %.2e", std::fabs(sum - 1.0))};
    }

  // Pooling attention sums to one over time.
  const ASP asp(10, 4, rng);
  const Tensor w = asp.weights(rand_map({2, 10, 13}));
  for (int b = 0; b < 2; ++b)
    for (int c = 0; c < 10; ++c) {
      double sum = 0.0;
      for (int t = 0; t < 13; ++t)
        sum += w.data()[(static_cast<int64_t>(b) * 10 + c) * 13 + t];
      if (std::fabs(sum - 1.0) > 1e-12)
        return {false, fmt("attention weights sum off by %.2e", std::fabs(sum - 1.0))};
    }

  // Global layer norm gives zero mean and unit variance per batch item.
  const Tensor g = rand_map({2, 4, 25});
  const Tensor gn = global_layer_norm(g, Tensor::full({4}, 1.0),
                                      Tensor::full({4}, 0.0), 1e-8);
  for (int b = 0; b < 2; ++b) {
    double mean = 0.0, var = 0.0;
    for (int i = 0; i < 100; ++i) mean += gn.data()[b * 100 + i];
    mean /= 100.0;
    for (int i = 0; i < 100; ++i) {
      const double d = gn.data()[b * 100 + i] - mean;
      var += d * d;
    }
    var /= 100.0;
    if (std::fabs(mean) > 1e-9 || std::fabs(var - 1.0) > 1e-6)
      return {false, fmt("layer norm mean %.2e var %.6f", mean, var)};
  }
  return {true, "gate, attention, softmax, and layer-norm laws hold to 1e-12"};
}

Outcome c5_metric_oracle() {
  const EerResult hand = eer({0.9, 0.7, 0.6, 0.8, 0.3, 0.2},
                             {true, true, true, false, false, false});
  if (std::fabs(hand.eer - 1.0 / 3.0) > 1e-12)
    return {false, fmt("hand case EER %.6f != 1/3", hand.eer)};
  if (eer({0.9, 0.8, 0.2, 0.1}, {true, true, false, false}).eer != 0.0)
    return {false, "perfect separation did not give EER 0"};
  if (min_dcf({0.9, 0.8, 0.2, 0.1}, {true, true, false, false}) != 0.0)
    return {false, "perfect separation did not give minDCF 0"};
  if (std::fabs(min_dcf({0.3, 0.3, 0.3, 0.3}, {true, true, false, false}) - 1.0) >
      1e-12)
    return {false, "all-equal scores did not give minDCF 1"};
  if (std::fabs(eer({0.3, 0.3, 0.3, 0.3}, {true, true, false, false}).eer - 0.5) >
      1e-12)
    return {false, "all-equal scores did not give EER 0.5"};

  Rng rng(505);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const auto nt = static_cast<int>(rng.uniform_int(3, 100));
    const auto nn = static_cast<int>(rng.uniform_int(3, 100));
    const bool quantize = rng.bernoulli(0.3);
    std::vector<double> scores;
    std::vector<bool> targets;
    for (int k = 0; k < nt + nn; ++k) {
      double s = rng.uniform(-1.0, 1.0);
      if (quantize) s = std::round(s * 10.0) / 10.0;
      scores.push_back(s);
      targets.push_back(k < nt);
    }
    worst = std::max(worst, std::fabs(eer(scores, targets).eer -
                                      brute_force_eer(scores, targets)));
    worst = std::max(worst, std::fabs(min_dcf(scores, targets) -
                                      brute_force_min_dcf(scores, targets)));
    if (worst > 1e-12)
      return {false, fmt("sweep diverged from recount by %.2e on instance %d", worst, i)};
  }
  return {true, fmt("100 random instances match the recount (worst gap %.1e)", worst)};
}

Outcome c6_anchors() {
  if (cosine_lr(0, 1000, 5e-4, 3e-6) != 5e-4)
    return {false, "schedule does not start at 5e-4"};
  if (cosine_lr(1000, 1000, 5e-4, 3e-6) != 3e-6)
    return {false, "schedule does not end at 3e-6"};

  const Tensor cosines({1, 2}, {1.0, 0.2});
  const Tensor adjusted = aam_adjust(cosines, {0}, 0.3);
  const double logit = 30.0 * adjusted.data()[0];
  if (std::fabs(logit - 30.0 * std::cos(0.3)) > 1e-9)
    return {false, fmt("aligned-target logit %.12f != 30cos(0.3)", logit)};

  Rng rng(606);
  AAMHead head(4, 6, rng);
  head.margin = 0.0;
  head.scale = 1.0;
  Tensor e({3, 6});
  for (int64_t i = 0; i < e.numel(); ++i) e.data()[i] = rng.uniform(-1.0, 1.0);
  const std::vector<int> labels = {2, 0, 3};
  std::vector<double> cos_rows;
  const double loss = aam_softmax_loss(e, labels, head, &cos_rows).value();
  double hand = 0.0;
  for (int b = 0; b < 3; ++b) {
    double mx = -2.0, denom = 0.0;
    for (int j = 0; j < 4; ++j) mx = std::max(mx, cos_rows[static_cast<size_t>(b * 4 + j)]);
    for (int j = 0; j < 4; ++j)
      denom += std::exp(cos_rows[static_cast<size_t>(b * 4 + j)] - mx);
    hand += mx + std::log(denom) - cos_rows[static_cast<size_t>(b * 4 + labels[static_cast<size_t>(b)])];
  }
  hand /= 3.0;
  if (std::fabs(loss - hand) > 1e-12)
    return {false, fmt("margin-free loss differs from cross-entropy by %.2e",
                       std::fabs(loss - hand))};
  return {true, "schedule endpoints exact; margin logit and margin-free reduction hold"};
}

Outcome c7_overfit() {
  g_seed11 = run_overfit(11, /*all_durations=*/true);
  const OverfitRun& r = *g_seed11;
  const bool pass = r.accuracy >= 0.95 && r.eer_full < 20.0;
  return {pass, fmt("train accuracy %.3f, held-out EER(full) %.3f%% over %d trials",
                    r.accuracy, r.eer_full, r.trials)};
}

Outcome c8_duration_robustness() {
  std::vector<OverfitRun> runs;
  runs.push_back(g_seed11 ? *g_seed11 : run_overfit(11, true));
  for (uint64_t seed : {12, 13, 14, 15}) runs.push_back(run_overfit(seed, false));

  bool dims = true;
  double mean_full = 0.0, mean_1s = 0.0;
  for (const OverfitRun& r : runs) {
    dims = dims && r.dims_consistent;
    mean_full += r.eer_full / runs.size();
    mean_1s += r.eer_1s / runs.size();
  }
  const bool trend = mean_1s >= mean_full;
  return {dims && trend,
          fmt("embedding width fixed across 1-5 s; mean EER %.3f%% at 1 s vs "
              "%.3f%% at full over %zu seeds",
              mean_1s, mean_full, runs.size())};
}

Outcome c9_batch_statistics() {
  CorpusConfig small;
  small.speakers = 4;
  small.utterances_per_speaker = 3;
  small.eval_utterances_per_speaker = 1;
  const SynthCorpus corpus = synth_corpus(small, 909);
  Rng rng(910);
  const int draws = 10000;
  int full = 0;
  for (int i = 0; i < draws; ++i) {
    const Batch b = make_batch(corpus.train, BatchPolicy{}, 2, 160, rng);
    if (b.crop_len % 160 != 0)
      return {false, fmt("crop length %d is not a frame multiple", b.crop_len)};
    if (b.crop_len < 16000 || b.crop_len > 48000)
      return {false, fmt("crop length %d outside [16000, 48000]", b.crop_len)};
    if (b.crop_len == 48000) ++full;
  }
  const double frac = static_cast<double>(full) / draws;
  return {frac >= 0.48 && frac <= 0.52,
          fmt("full-length fraction %.4f over %d draws; all crops frame-aligned",
              frac, draws)};
}

Outcome c10_determinism() {
  ModelConfig tiny;
  tiny.mrfe.extractors = 2;
  tiny.mrfe.fbank_filters = 16;
  tiny.mrfe.channels = 8;
  tiny.mrfe.hidden = 16;
  tiny.mrfe.blocks = 2;
  tiny.mrfe.repeats = 1;
  tiny.backbone.channels = 16;
  tiny.backbone.blocks_per_stage = 1;
  tiny.backbone.head_channels = 32;
  tiny.d_att = 8;
  tiny.embed_dim = 16;

  CorpusConfig cc;
  cc.speakers = 4;
  cc.utterances_per_speaker = 2;
  cc.eval_utterances_per_speaker = 2;
  const SynthCorpus corpus = synth_corpus(cc, 42);

  auto train_once = [&](const std::string& out_dir) {
    RunConfig rc;
    rc.seed = 42;
    rc.out_dir = out_dir;
    rc.model = tiny;
    rc.train.epochs = 1;
    rc.train.steps_per_epoch = 2;
    rc.train.batch_size = 2;
    rc.train.full_seconds = 1.0;
    rc.train.p_full = 1.0;
    Model model = assemble(rc.model, rc.seed);
    Rng head_rng = Rng(rc.seed).fork(0xAA);
    AAMHead head(cc.speakers, rc.model.embed_dim, head_rng);
    train_loop(model, head, corpus, rc);
    return model;
  };
  const Model m1 = train_once("acceptance_out/det_a");
  const Model m2 = train_once("acceptance_out/det_b");
  if (slurp("acceptance_out/det_a/metrics.jsonl") !=
      slurp("acceptance_out/det_b/metrics.jsonl"))
    return {false, "training metrics differ between reruns"};
  if (slurp("acceptance_out/det_a/final.mrrw") !=
      slurp("acceptance_out/det_b/final.mrrw"))
    return {false, "training checkpoints differ between reruns"};

  UtteranceStore store;
  std::vector<LabeledUtt> labeled;
  for (size_t i = 0; i < corpus.held_out.size(); ++i) {
    const std::string id = "u" + std::to_string(i);
    store[id] = corpus.held_out[i].samples;
    labeled.push_back({id, corpus.held_out[i].speaker});
  }
  Rng t1(7), t2(7);
  const std::vector<Trial> trials_a = make_trials(labeled, 1, t1);
  const std::vector<Trial> trials_b = make_trials(labeled, 1, t2);
  const std::string rep_a =
      report_records(evaluate(m1, store, trials_a, {"full", "1"}, 1));
  const std::string rep_b =
      report_records(evaluate(m2, store, trials_b, {"full", "1"}, 2));
  if (rep_a != rep_b) return {false, "evaluation reports differ between reruns"};

  if (format_results(run_fast()) != format_results(run_fast()))
    return {false, "self-check output differs between reruns"};
  return {true, "train, eval, and self-check reruns are byte-identical"};
}

}  // namespace

int main() {
  using clock = std::chrono::steady_clock;
  const struct {
    int id;
    const char* title;
    std::function<Outcome()> run;
  } criteria[] = {
      {1, "front-end geometry anchor", c1_geometry},
      {2, "parameter budget and ordering", c2_parameters},
      {3, "finite-difference gradient audit", c3_gradients},
      {4, "normalization invariants", c4_normalization},
      {5, "metric oracle equivalence", c5_metric_oracle},
      {6, "schedule and loss anchors", c6_anchors},
      {7, "overfit oracle", c7_overfit},
      {8, "duration robustness", c8_duration_robustness},
      {9, "batch-policy statistics", c9_batch_statistics},
      {10, "determinism", c10_determinism},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    const auto t0 = clock::now();
    Outcome outcome;
    try {
      outcome = c.run();
    } catch (const std::exception& e) {
      outcome = {false, std::string("exception: ") + e.what()};
    }
    const double seconds = std::chrono::duration<double>(clock::now() - t0).count();
    if (!outcome.pass) ++failures;
    std::printf("criterion %2d  %-36s %s  [%.1fs]  %s\n", c.id, c.title,
                outcome.pass ? "PASS" : "FAIL", seconds, outcome.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/10 criteria passed\n", 10 - failures);
  return failures == 0 ? 0 : 1;
}
