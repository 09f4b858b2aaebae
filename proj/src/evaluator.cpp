#include "mrw/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "mrw/textio.hpp"
#include "mrw/trainer.hpp"

namespace mrw {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_scores(const std::vector<double>& scores, const std::vector<bool>& targets,
                  const char* who) {
  if (scores.size() != targets.size() || scores.empty())
    throw std::invalid_argument(std::string(who) + ": scores and labels must match and be non-empty");
  size_t nt = 0;
  for (bool t : targets) nt += t ? 1 : 0;
  if (nt == 0 || nt == targets.size())
    throw std::invalid_argument(std::string(who) + ": need both target and nontarget trials");
  for (double s : scores)
    if (!std::isfinite(s)) throw std::invalid_argument(std::string(who) + ": non-finite score");
}

struct RocPoint {
  double t, frr, far;
};

// Operating points of the accept-if-score>=t rule at every distinct score,
// with accept-all / reject-all sentinels. frr ascends, far descends.
std::vector<RocPoint> roc_points(const std::vector<double>& scores,
                                 const std::vector<bool>& targets) {
  std::vector<std::pair<double, bool>> s(scores.size());
  for (size_t i = 0; i < scores.size(); ++i) s[i] = {scores[i], targets[i]};
  std::sort(s.begin(), s.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  double nt = 0, nn = 0;
  for (const auto& p : s) (p.second ? nt : nn) += 1.0;

  std::vector<RocPoint> points;
  points.push_back({-kInf, 0.0, 1.0});
  size_t i = 0;
  double tgt_below = 0, non_below = 0;
  while (i < s.size()) {
    const double v = s[i].first;
    points.push_back({v, tgt_below / nt, (nn - non_below) / nn});
    while (i < s.size() && s[i].first == v) {
      (s[i].second ? tgt_below : non_below) += 1.0;
      ++i;
    }
  }
  points.push_back({kInf, 1.0, 0.0});
  return points;
}

EerResult crossing(const std::vector<RocPoint>& points) {
  for (size_t i = 1; i < points.size(); ++i) {
    const double d1 = points[i - 1].frr - points[i - 1].far;
    const double d2 = points[i].frr - points[i].far;
    if (d2 < 0.0) continue;
    EerResult r;
    if (d2 == 0.0) {
      r.eer = points[i].frr;
      r.threshold = points[i].t;
    } else {
      const double alpha = -d1 / (d2 - d1);
      r.eer = points[i - 1].frr + alpha * (points[i].frr - points[i - 1].frr);
      if (!std::isfinite(points[i - 1].t)) r.threshold = points[i].t;
      else if (!std::isfinite(points[i].t)) r.threshold = points[i - 1].t;
      else r.threshold = points[i - 1].t + alpha * (points[i].t - points[i - 1].t);
    }
    return r;
  }
  throw std::logic_error("eer: no crossing found");
}

double seconds_of(const std::string& duration) {
  if (duration == "full") return -1.0;
  try {
    size_t used = 0;
    const double v = std::stod(duration, &used);
    if (used != duration.size() || !(v > 0.0)) throw std::invalid_argument(duration);
    return v;
  } catch (const std::exception&) {
    throw std::invalid_argument("evaluate: bad duration '" + duration +
                                "' (use \"full\" or seconds)");
  }
}

}  // namespace

std::vector<Trial> parse_trials(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("trials: cannot open " + path);
  std::vector<Trial> trials;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::string stripped = line;
    stripped.erase(0, stripped.find_first_not_of(" \t"));
    if (stripped.empty() || stripped[0] == '#') continue;
    std::istringstream fields(stripped);
    std::string label, enroll, test, extra;
    if (!(fields >> label >> enroll >> test))
      throw std::runtime_error("trials: line " + std::to_string(line_no) +
                               ": expected '<0|1> <enroll> <test>'");
    if (fields >> extra)
      throw std::runtime_error("trials: line " + std::to_string(line_no) +
                               ": unexpected trailing field '" + extra + "'");
    if (label != "0" && label != "1")
      throw std::runtime_error("trials: line " + std::to_string(line_no) +
                               ": label must be 0 or 1, got '" + label + "'");
    trials.push_back({label == "1", enroll, test});
  }
  if (trials.empty()) throw std::runtime_error("trials: no trials in " + path);
  return trials;
}

std::vector<Trial> make_trials(const std::vector<LabeledUtt>& utts,
                               int nontargets_per_target, Rng& rng) {
  if (nontargets_per_target < 1)
    throw std::invalid_argument("make_trials: need at least one nontarget per target");
  std::vector<Trial> trials;
  for (size_t i = 0; i < utts.size(); ++i)
    for (size_t j = i + 1; j < utts.size(); ++j)
      if (utts[i].speaker == utts[j].speaker)
        trials.push_back({true, utts[i].id, utts[j].id});
  if (trials.empty()) throw std::invalid_argument("make_trials: no same-speaker pair exists");

  const size_t targets = trials.size();
  const auto n = static_cast<int64_t>(utts.size());
  for (size_t k = 0; k < targets * static_cast<size_t>(nontargets_per_target); ++k) {
    for (;;) {
      const auto a = rng.uniform_int(0, n - 1);
      const auto b = rng.uniform_int(0, n - 1);
      if (utts[static_cast<size_t>(a)].speaker == utts[static_cast<size_t>(b)].speaker) continue;
      trials.push_back({false, utts[static_cast<size_t>(a)].id, utts[static_cast<size_t>(b)].id});
      break;
    }
  }
  return trials;
}

std::vector<double> center_crop(const std::vector<double>& x, double seconds,
                                int sample_rate, int frame_stride, bool* shortened) {
  if (frame_stride <= 0) throw std::invalid_argument("center_crop: frame_stride must be positive");
  const int len = static_cast<int>(x.size());
  const int have = len / frame_stride * frame_stride;
  if (have <= 0)
    throw std::invalid_argument("center_crop: signal shorter than one frame (" +
                                std::to_string(len) + " samples)");
  int want = have;
  if (seconds > 0.0) {
    want = static_cast<int>(std::lround(seconds * sample_rate)) / frame_stride * frame_stride;
    if (want <= 0) throw std::invalid_argument("center_crop: requested duration too short");
  }
  if (shortened) *shortened = have < want;
  const int take = std::min(want, have);
  const int start = (len - take) / 2;
  return std::vector<double>(x.begin() + start, x.begin() + start + take);
}

double cosine_score(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.empty())
    throw std::invalid_argument("cosine_score: dimension mismatch");
  double dot = 0, na = 0, nb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0)
    throw std::invalid_argument("cosine_score: zero-magnitude embedding");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

EerResult eer(const std::vector<double>& scores, const std::vector<bool>& targets) {
  check_scores(scores, targets, "eer");
  return crossing(roc_points(scores, targets));
}

double min_dcf(const std::vector<double>& scores, const std::vector<bool>& targets,
               double p_target, double c_miss, double c_fa) {
  check_scores(scores, targets, "min_dcf");
  if (!(p_target > 0.0 && p_target < 1.0))
    throw std::invalid_argument("min_dcf: p_target must be in (0, 1)");
  const auto points = roc_points(scores, targets);
  double best = kInf;
  for (const RocPoint& p : points) {
    const double cost = c_miss * p_target * p.frr + c_fa * (1.0 - p_target) * p.far;
    best = std::min(best, cost);
  }
  return best / std::min(c_miss * p_target, c_fa * (1.0 - p_target));
}

double brute_force_eer(const std::vector<double>& scores, const std::vector<bool>& targets) {
  check_scores(scores, targets, "brute_force_eer");
  const size_t n = scores.size();
  double nt = 0, nn = 0;
  for (bool t : targets) (t ? nt : nn) += 1.0;
  auto frr_at = [&](double t) {
    double c = 0;
    for (size_t i = 0; i < n; ++i)
      if (targets[i] && scores[i] < t) c += 1.0;
    return c / nt;
  };
  auto far_at = [&](double t) {
    double c = 0;
    for (size_t i = 0; i < n; ++i)
      if (!targets[i] && scores[i] >= t) c += 1.0;
    return c / nn;
  };
  std::vector<double> ts(scores);
  std::sort(ts.begin(), ts.end());
  ts.erase(std::unique(ts.begin(), ts.end()), ts.end());
  ts.insert(ts.begin(), -kInf);
  ts.push_back(kInf);
  for (size_t i = 1; i < ts.size(); ++i) {
    const double d1 = frr_at(ts[i - 1]) - far_at(ts[i - 1]);
    const double d2 = frr_at(ts[i]) - far_at(ts[i]);
    if (d2 < 0.0) continue;
    if (d2 == 0.0) return frr_at(ts[i]);
    const double alpha = -d1 / (d2 - d1);
    return frr_at(ts[i - 1]) + alpha * (frr_at(ts[i]) - frr_at(ts[i - 1]));
  }
  throw std::logic_error("brute_force_eer: no crossing found");
}

double brute_force_min_dcf(const std::vector<double>& scores,
                           const std::vector<bool>& targets, double p_target,
                           double c_miss, double c_fa) {
  check_scores(scores, targets, "brute_force_min_dcf");
  const size_t n = scores.size();
  double nt = 0, nn = 0;
  for (bool t : targets) (t ? nt : nn) += 1.0;
  std::vector<double> ts(scores);
  ts.insert(ts.begin(), -kInf);
  ts.push_back(kInf);
  double best = kInf;
  for (double t : ts) {
    double miss = 0, fa = 0;
    for (size_t i = 0; i < n; ++i) {
      if (targets[i] && scores[i] < t) miss += 1.0;
      if (!targets[i] && scores[i] >= t) fa += 1.0;
    }
    best = std::min(best, c_miss * p_target * miss / nt + c_fa * (1.0 - p_target) * fa / nn);
  }
  return best / std::min(c_miss * p_target, c_fa * (1.0 - p_target));
}

ScoreReport evaluate(const Model& model, const UtteranceStore& store,
                     const std::vector<Trial>& trials,
                     const std::vector<std::string>& durations, int threads) {
  if (trials.empty()) throw std::invalid_argument("evaluate: no trials");
  if (durations.empty()) throw std::invalid_argument("evaluate: no durations");
  threads = std::clamp(threads, 1, 64);

  std::set<std::string> ids;
  for (const Trial& t : trials) {
    ids.insert(t.enroll);
    ids.insert(t.test);
  }
  for (const std::string& id : ids)
    if (store.find(id) == store.end())
      throw std::runtime_error("evaluate: trial references unknown utterance '" + id + "'");

  const int frame_stride = model.cfg.frame_stride();
  const double preemph = model.cfg.preemphasis;
  // keyed by utterance id and cropped length, shared across durations
  std::map<std::pair<std::string, int>, std::vector<double>> cache;

  ScoreReport report;
  for (const std::string& duration : durations) {
    const double seconds = seconds_of(duration);
    const auto cropped_len = [&](const std::string& id) {
      const int have = static_cast<int>(store.at(id).size()) / frame_stride * frame_stride;
      if (seconds <= 0.0) return have;
      const int want =
          static_cast<int>(std::lround(seconds * 16000)) / frame_stride * frame_stride;
      return std::min(want, have);
    };

    struct Job {
      const std::string* id;
      std::vector<double> wave;
      std::vector<double> emb;
    };
    std::vector<Job> jobs;
    for (const std::string& id : ids) {
      std::vector<double> cropped =
          center_crop(store.at(id), seconds, 16000, frame_stride, nullptr);
      const auto key = std::make_pair(id, static_cast<int>(cropped.size()));
      if (cache.find(key) != cache.end()) continue;
      cache.emplace(key, std::vector<double>{});  // reserve to avoid duplicate jobs
      jobs.push_back({&id, std::move(cropped), {}});
    }

    auto worker = [&](size_t first) {
      for (size_t j = first; j < jobs.size(); j += static_cast<size_t>(threads)) {
        const int len = static_cast<int>(jobs[j].wave.size());
        Tensor wave({1, 1, len});
        std::copy(jobs[j].wave.begin(), jobs[j].wave.end(), wave.data());
        const Tensor emb = model.forward(preemphasize(wave, preemph), Mode::kEval);
        jobs[j].emb.assign(emb.data(), emb.data() + emb.numel());
      }
    };
    if (threads == 1 || jobs.size() <= 1) {
      worker(0);
    } else {
      std::vector<std::thread> pool;
      for (int t = 0; t < threads; ++t) pool.emplace_back(worker, static_cast<size_t>(t));
      for (std::thread& t : pool) t.join();
    }
    for (Job& j : jobs)
      cache[{*j.id, static_cast<int>(j.wave.size())}] = std::move(j.emb);

    std::vector<double> scores;
    std::vector<bool> labels;
    scores.reserve(trials.size());
    labels.reserve(trials.size());
    for (const Trial& t : trials) {
      const auto& enroll = cache.at({t.enroll, cropped_len(t.enroll)});
      const auto& test = cache.at({t.test, cropped_len(t.test)});
      scores.push_back(cosine_score(enroll, test));
      labels.push_back(t.target);
    }

    DurationRow row;
    row.duration = duration;
    row.trials = static_cast<int>(trials.size());
    row.eer_percent = eer(scores, labels).eer * 100.0;
    row.min_dcf = min_dcf(scores, labels);
    report.rows.push_back(row);
  }
  return report;
}

std::string report_table(const ScoreReport& report) {
  std::string out = "duration      trials      EER%        minDCF\n";
  for (const DurationRow& r : report.rows) {
    char line[128];
    std::snprintf(line, sizeof(line), "%-12s  %-10d  %-10.3f  %-10.4f\n", r.duration.c_str(),
                  r.trials, r.eer_percent, r.min_dcf);
    out += line;
  }
  return out;
}

std::string report_records(const ScoreReport& report) {
  std::string out;
  for (const DurationRow& r : report.rows) {
    out += "{\"duration\":\"" + r.duration + "\",\"trials\":" + std::to_string(r.trials) +
           ",\"eer_percent\":" + fmt_double(r.eer_percent) +
           ",\"min_dcf\":" + fmt_double(r.min_dcf) + "}\n";
  }
  return out;
}

}  // namespace mrw
