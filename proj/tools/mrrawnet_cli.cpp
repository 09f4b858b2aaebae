#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mrw/config.hpp"
#include "mrw/evaluator.hpp"
#include "mrw/model.hpp"
#include "mrw/textio.hpp"
#include "mrw/trainer.hpp"
#include "mrw/verify.hpp"
#include "mrw/wav.hpp"

namespace fs = std::filesystem;
using namespace mrw;

namespace {

int env_threads() {
  const char* v = std::getenv("MRRW_THREADS");
  if (!v || !*v) return 1;
  try {
    return std::max(1, std::stoi(v));
  } catch (const std::exception&) {
    throw ConfigError("MRRW_THREADS must be a positive integer, got '" + std::string(v) + "'");
  }
}

std::vector<std::string> split_csv(const std::string& csv) {
  std::vector<std::string> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  if (out.empty()) throw ConfigError("empty duration list");
  return out;
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f.write(content.data(), static_cast<std::streamsize>(content.size()));
}

int cmd_train(const std::string& config_path, const std::string& seed_override,
              const std::string& out_override) {
  RunConfig rc = config_path.empty() ? RunConfig{} : RunConfig::from_file(config_path);
  if (!seed_override.empty()) rc.seed = std::stoull(seed_override);
  if (!out_override.empty()) rc.out_dir = out_override;

  const SynthCorpus corpus = synth_corpus(rc.corpus, rc.seed);
  Model model = assemble(rc.model, rc.seed);
  Rng head_rng = Rng(rc.seed).fork(0xAA);
  AAMHead head(rc.corpus.speakers, rc.model.embed_dim, head_rng);
  head.margin = rc.train.margin;
  head.scale = rc.train.scale;

  const TrainResult result = train_loop(model, head, corpus, rc);

  write_file(fs::path(rc.out_dir) / "config_used.json", rc.to_json().dump(2) + "\n");

  // export the held-out set with a trial list so `eval` is self-contained
  const fs::path eval_dir = fs::path(rc.out_dir) / "eval";
  fs::create_directories(eval_dir);
  std::vector<LabeledUtt> labeled;
  std::vector<int> per_speaker(static_cast<size_t>(corpus.speakers), 0);
  for (const Utterance& utt : corpus.held_out) {
    const int k = per_speaker[static_cast<size_t>(utt.speaker)]++;
    const std::string name =
        "spk" + std::to_string(utt.speaker) + "_utt" + std::to_string(k) + ".wav";
    write_wav((eval_dir / name).string(), utt.samples);
    labeled.push_back({"eval/" + name, utt.speaker});
  }
  std::string trial_lines;
  if (!labeled.empty()) {
    Rng trial_rng = Rng(rc.seed).fork(0x7817);
    for (const Trial& t :
         make_trials(labeled, rc.eval.nontarget_trials_per_target, trial_rng))
      trial_lines += std::string(t.target ? "1 " : "0 ") + t.enroll + " " + t.test + "\n";
  }
  write_file(fs::path(rc.out_dir) / "trials.txt", trial_lines);

  std::cout << "trained " << result.losses.size() << " steps\n"
            << "final loss " << fmt_double(result.losses.back()) << "\n"
            << "train accuracy " << fmt_double(result.final_accuracy) << "\n"
            << "checkpoint " << result.final_checkpoint << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& trials_path,
             const std::string& durations_csv, const std::string& out_dir) {
  const Model model = load_checkpoint(checkpoint);
  const std::vector<Trial> trials = parse_trials(trials_path);
  const fs::path base = fs::path(trials_path).parent_path();

  std::set<std::string> ids;
  for (const Trial& t : trials) {
    ids.insert(t.enroll);
    ids.insert(t.test);
  }
  UtteranceStore store;
  for (const std::string& id : ids) store[id] = read_wav((base / id).string());

  const ScoreReport report =
      evaluate(model, store, trials, split_csv(durations_csv), env_threads());
  std::cout << report_table(report);
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_file(fs::path(out_dir) / "report.txt", report_table(report));
    write_file(fs::path(out_dir) / "report.jsonl", report_records(report));
  }
  return 0;
}

int cmd_verify(const std::string& level) {
  if (level != "fast" && level != "full")
    throw ConfigError("verify level must be 'fast' or 'full', got '" + level + "'");
  const std::vector<SuiteResult> results = level == "full" ? run_full() : run_fast();
  std::cout << format_results(results);
  return all_passed(results) ? 0 : 1;
}

int cmd_info(const std::string& checkpoint, const std::string& config_path) {
  Model model;
  if (!checkpoint.empty()) {
    model = load_checkpoint(checkpoint);
  } else {
    ModelConfig cfg;
    uint64_t seed = 1;
    if (!config_path.empty()) {
      const RunConfig rc = RunConfig::from_file(config_path);
      cfg = rc.model;
      seed = rc.seed;
    }
    model = assemble(cfg, seed);
  }

  std::cout << "variant " << (model.cfg.variant == Variant::kMRRawNet ? "mr-rawnet" : "rawnet3-baseline")
            << "\nframe stride " << model.cfg.frame_stride() << " samples\n\nparameters\n";
  int64_t total = 0;
  for (const auto& [module, count] : model.count_by_module()) {
    std::cout << "  " << module << ": " << count << "\n";
    total += count;
  }
  std::cout << "  total: " << total << "\n\nconfig\n" << model.cfg.to_json().dump(2) << "\n";

  const int probe_len = 3 * 16000;
  Tensor probe({1, 1, probe_len});
  ForwardTrace trace;
  model.forward(probe, Mode::kEval, &trace);
  std::cout << "\nshapes for a 3 s probe\n";
  for (const auto& [label, shape] : trace.entries)
    std::cout << "  " << label << ": " << shape_str(shape) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MR-RawNet: multi-resolution raw-waveform speaker verification"};
  app.require_subcommand(1);

  std::string config_path, seed_override, out_dir, checkpoint, trials_path;
  std::string durations = "full,5,2,1", level = "fast";

  CLI::App* train = app.add_subcommand("train", "train on the synthetic corpus");
  train->add_option("--config", config_path, "run configuration (JSON)");
  train->add_option("--seed", seed_override, "override the run seed");
  train->add_option("--out", out_dir, "override the output directory");

  CLI::App* eval = app.add_subcommand("eval", "score a trial list at several durations");
  eval->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  eval->add_option("--trials", trials_path, "trial list file")->required();
  eval->add_option("--durations", durations, "comma-separated durations (\"full\" or seconds)");
  eval->add_option("--out", out_dir, "directory for report files");

  CLI::App* verify = app.add_subcommand("verify", "run the self-check suites");
  verify->add_option("--level", level, "fast or full");

  CLI::App* info = app.add_subcommand("info", "print model summary and probe shapes");
  info->add_option("--checkpoint", checkpoint, "model checkpoint");
  info->add_option("--config", config_path, "run configuration (JSON)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (train->parsed()) return cmd_train(config_path, seed_override, out_dir);
    if (eval->parsed()) return cmd_eval(checkpoint, trials_path, durations, out_dir);
    if (verify->parsed()) return cmd_verify(level);
    if (info->parsed()) return cmd_info(checkpoint, config_path);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
