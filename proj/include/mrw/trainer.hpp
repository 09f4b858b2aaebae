#pragma once

#include <string>
#include <vector>

#include "mrw/config.hpp"
#include "mrw/model.hpp"

namespace mrw {

// First-order high-pass: y[0]=x[0], y[n]=x[n]-coef*x[n-1].
std::vector<double> preemphasize(const std::vector<double>& x, double coef);
Tensor preemphasize(const Tensor& wave, double coef);  // [B,1,T]

struct Utterance {
  int speaker = 0;
  std::vector<double> samples;  // 16 kHz mono, roughly unit scale
};

// Deterministic synthetic speaker set: each speaker is a fixed recipe of
// fundamental frequency and resonator placements, each utterance a seeded
// render of 2-6 s. Train and held-out partitions are disjoint.
struct SynthCorpus {
  int speakers = 0;
  std::vector<Utterance> train;
  std::vector<Utterance> held_out;
};

SynthCorpus synth_corpus(const CorpusConfig& cfg, uint64_t seed);

struct BatchPolicy {
  double full_seconds = 3.0;
  double min_seconds = 1.0;
  double p_full = 0.5;
  int sample_rate = 16000;
};

struct Batch {
  Tensor waves;  // [B,1,L], one shared L per batch
  std::vector<int> labels;
  int crop_len = 0;
  bool wrapped = false;  // an utterance shorter than the crop was wrap-padded
};

// Draws the shared crop length (fixed length with probability p_full, else
// uniform and floored to a frame_stride multiple), then a random crop of a
// random utterance per row.
Batch make_batch(const std::vector<Utterance>& utts, const BatchPolicy& policy,
                 int batch_size, int frame_stride, Rng& rng);

struct AAMHead {
  Tensor w;  // [num_speakers, D]
  double margin = 0.3, scale = 30.0;

  AAMHead() = default;
  AAMHead(int num_speakers, int dim, Rng& rng);
};

// Angular-margin softmax: cosine logits between unit-normalized embeddings and
// class weights, margin added to the target angle, scaled, cross-entropy.
// When cosines_out is given it receives the pre-margin cosine matrix.
Tensor aam_softmax_loss(const Tensor& e, const std::vector<int>& labels,
                        const AAMHead& head,
                        std::vector<double>* cosines_out = nullptr);

// Half-cosine decay from lr_max (step 0) to lr_min (step total); endpoints are
// exact.
double cosine_lr(int64_t step, int64_t total_steps, double lr_max, double lr_min);

struct AdamState {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay = 5e-5;
  int64_t step = 0;
  std::vector<std::vector<double>> m, v;

  void init(const ParamList& params);
};

// Adam with decoupled multiplicative weight decay applied before the update.
// Non-trainable entries (running stats) are skipped.
void adam_step(const ParamList& params, AdamState& state, double lr);

struct TrainResult {
  std::vector<double> losses;        // one entry per step
  double final_accuracy = 0.0;       // training-set classification accuracy
  std::string final_checkpoint;
};

// Full training run: per-step batch/loss/backward/Adam with the cosine
// schedule, JSONL metrics, and a checkpoint per epoch under rc.out_dir.
// Throws on NaN loss with a diagnostic of the offending batch.
TrainResult train_loop(Model& model, AAMHead& head, const SynthCorpus& corpus,
                       const RunConfig& rc);

// Eval-mode nearest-class-weight classification over whole utterances.
double classification_accuracy(const Model& model, const AAMHead& head,
                               const std::vector<Utterance>& utts);

}  // namespace mrw
