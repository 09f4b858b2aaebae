#pragma once

#include <map>
#include <string>
#include <vector>

#include "mrw/model.hpp"

namespace mrw {

struct Trial {
  bool target = false;
  std::string enroll, test;
};

// One trial per line: "<0|1> <enroll-id> <test-id>". Blank lines and lines
// starting with '#' are skipped. Malformed lines raise errors naming the line
// number.
std::vector<Trial> parse_trials(const std::string& path);

struct LabeledUtt {
  std::string id;
  int speaker = 0;
};

// Every same-speaker pair becomes a target trial; `nontargets_per_target`
// cross-speaker pairs are drawn per target. Deterministic given the rng.
std::vector<Trial> make_trials(const std::vector<LabeledUtt>& utts,
                               int nontargets_per_target, Rng& rng);

// Middle `seconds` of the signal, floored to a frame_stride multiple.
// seconds <= 0 selects the whole signal (floored). Signals shorter than the
// request are returned whole and flagged via *shortened.
std::vector<double> center_crop(const std::vector<double>& x, double seconds,
                                int sample_rate, int frame_stride,
                                bool* shortened = nullptr);

double cosine_score(const std::vector<double>& a, const std::vector<double>& b);

struct EerResult {
  double eer = 0.0;        // fraction in [0, 1]
  double threshold = 0.0;  // operating point at the crossing
};

// Equal error rate of the accept-if-score>=t rule, linearly interpolated at
// the FRR/FAR crossing.
EerResult eer(const std::vector<double>& scores, const std::vector<bool>& targets);

// Minimum normalized detection cost over all thresholds.
double min_dcf(const std::vector<double>& scores, const std::vector<bool>& targets,
               double p_target = 0.05, double c_miss = 1.0, double c_fa = 1.0);

// Naive per-threshold recount references for cross-checking the sweeps above.
double brute_force_eer(const std::vector<double>& scores, const std::vector<bool>& targets);
double brute_force_min_dcf(const std::vector<double>& scores,
                           const std::vector<bool>& targets, double p_target = 0.05,
                           double c_miss = 1.0, double c_fa = 1.0);

struct DurationRow {
  std::string duration;      // "full" or seconds
  double eer_percent = 0.0;
  double min_dcf = 0.0;
  int trials = 0;
};

struct ScoreReport {
  std::vector<DurationRow> rows;
};

using UtteranceStore = std::map<std::string, std::vector<double>>;

// Scores every trial at every requested duration. Embeddings are cached per
// (utterance, cropped length) and computed with at most `threads` workers;
// results do not depend on the thread count.
ScoreReport evaluate(const Model& model, const UtteranceStore& store,
                     const std::vector<Trial>& trials,
                     const std::vector<std::string>& durations, int threads = 1);

std::string report_table(const ScoreReport& report);
std::string report_records(const ScoreReport& report);  // JSONL

}  // namespace mrw
