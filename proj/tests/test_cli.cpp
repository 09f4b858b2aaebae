#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

const std::string kDir = "cli_test_dir";

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is.good());
  return std::string(std::istreambuf_iterator<char>(is),
                     std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  REQUIRE(os.good());
  os << text;
}

// Runs the CLI with `args`, captures combined stdout/stderr, returns the exit
// code.
int run_cli(const std::string& args, std::string* output,
            const std::string& env_prefix = "") {
  fs::create_directories(kDir);
  const std::string capture = kDir + "/last_output.txt";
  const std::string cmd = env_prefix + "\"" + MRW_CLI_PATH + "\" " + args +
                          " >" + capture + " 2>&1";
  const int status = std::system(cmd.c_str());
  if (output) *output = slurp(capture);
  REQUIRE(WIFEXITED(status));
  return WEXITSTATUS(status);
}

nlohmann::json micro_run_config(const std::string& out_dir) {
  nlohmann::json j;
  j["seed"] = 42;
  j["out_dir"] = out_dir;
  j["model"] = {
      {"mrfe",
       {{"extractors", 2},
        {"fbank_filters", 16},
        {"channels", 8},
        {"hidden", 16},
        {"blocks", 2},
        {"repeats", 1}}},
      {"backbone",
       {{"channels", 16}, {"blocks_per_stage", 1}, {"head_channels", 32}}},
      {"d_att", 8},
      {"embed_dim", 16},
  };
  j["corpus"] = {{"speakers", 3},
                 {"utterances_per_speaker", 3},
                 {"eval_utterances_per_speaker", 2}};
  j["train"] = {{"epochs", 1},      {"steps_per_epoch", 2}, {"batch_size", 2},
                {"full_seconds", 1.0}, {"p_full", 1.0}};
  j["eval"] = {{"durations", {"full", "1"}}, {"nontarget_trials_per_target", 1}};
  return j;
}

}  // namespace

TEST_CASE("usage errors exit with code 2") {
  std::string out;
  CHECK(run_cli("", &out) == 2);

  CHECK(run_cli("train --config " + kDir + "/does_not_exist.json", &out) == 2);
  CHECK(out.find("does_not_exist.json") != std::string::npos);

  fs::create_directories(kDir);
  nlohmann::json bad = micro_run_config(kDir + "/never");
  bad["model"]["bogus_knob"] = 3;
  write_file(kDir + "/bad_key.json", bad.dump(2));
  CHECK(run_cli("train --config " + kDir + "/bad_key.json", &out) == 2);
  CHECK(out.find("bogus_knob") != std::string::npos);

  CHECK(run_cli("verify --level sometimes", &out) == 2);
}

TEST_CASE("training produces a complete, reproducible output directory") {
  fs::remove_all(kDir + "/run1");
  write_file(kDir + "/micro.json", micro_run_config(kDir + "/run1").dump(2));

  std::string out;
  REQUIRE(run_cli("train --config " + kDir + "/micro.json", &out) == 0);
  CHECK(out.find("accuracy") != std::string::npos);
  REQUIRE(fs::exists(kDir + "/run1/final.mrrw"));
  REQUIRE(fs::exists(kDir + "/run1/epoch_01.mrrw"));
  REQUIRE(fs::exists(kDir + "/run1/metrics.jsonl"));
  REQUIRE(fs::exists(kDir + "/run1/config_used.json"));
  REQUIRE(fs::exists(kDir + "/run1/trials.txt"));

  int wavs = 0;
  for (const auto& entry : fs::directory_iterator(kDir + "/run1/eval"))
    if (entry.path().extension() == ".wav") ++wavs;
  CHECK(wavs == 6);  // 3 speakers x 2 held-out utterances

  const std::string metrics = slurp(kDir + "/run1/metrics.jsonl");
  const std::string config_used = slurp(kDir + "/run1/config_used.json");
  const std::string trials = slurp(kDir + "/run1/trials.txt");
  const std::string checkpoint = slurp(kDir + "/run1/final.mrrw");

  // Byte-identical rerun with the same seed and configuration.
  REQUIRE(run_cli("train --config " + kDir + "/micro.json", &out) == 0);
  CHECK(slurp(kDir + "/run1/metrics.jsonl") == metrics);
  CHECK(slurp(kDir + "/run1/config_used.json") == config_used);
  CHECK(slurp(kDir + "/run1/trials.txt") == trials);
  CHECK(slurp(kDir + "/run1/final.mrrw") == checkpoint);

  // --seed overrides the file and changes the trajectory.
  nlohmann::json alt = micro_run_config(kDir + "/run_alt");
  write_file(kDir + "/micro_alt.json", alt.dump(2));
  REQUIRE(run_cli("train --config " + kDir + "/micro_alt.json --seed 43", &out) == 0);
  CHECK(slurp(kDir + "/run_alt/metrics.jsonl") != metrics);
}

TEST_CASE("evaluation prints the duration table and reruns identically") {
  std::string out;
  const std::string eval_args = "eval --checkpoint " + kDir +
                                "/run1/final.mrrw --trials " + kDir +
                                "/run1/trials.txt --durations full,1 --out " +
                                kDir + "/report1";
  REQUIRE(run_cli(eval_args, &out) == 0);
  CHECK(out.find("duration") != std::string::npos);
  CHECK(out.find("EER%") != std::string::npos);
  CHECK(out.find("full") != std::string::npos);
  REQUIRE(fs::exists(kDir + "/report1/report.txt"));
  REQUIRE(fs::exists(kDir + "/report1/report.jsonl"));

  const std::string table = slurp(kDir + "/report1/report.txt");
  const std::string records = slurp(kDir + "/report1/report.jsonl");
  int lines = 0;
  for (char c : records)
    if (c == '\n') ++lines;
  CHECK(lines == 2);

  REQUIRE(run_cli(eval_args, &out) == 0);
  CHECK(slurp(kDir + "/report1/report.txt") == table);
  CHECK(slurp(kDir + "/report1/report.jsonl") == records);

  // A capped thread pool must not change the scores.
  REQUIRE(run_cli(eval_args, &out, "MRRW_THREADS=2 ") == 0);
  CHECK(slurp(kDir + "/report1/report.jsonl") == records);

  CHECK(run_cli(eval_args, &out, "MRRW_THREADS=banana ") == 2);

  write_file(kDir + "/broken_trials.txt", "1 a b\noops\n");
  const int rc = run_cli("eval --checkpoint " + kDir +
                             "/run1/final.mrrw --trials " + kDir +
                             "/broken_trials.txt",
                         &out);
  CHECK(rc == 1);
  CHECK(out.find("line 2") != std::string::npos);
}

TEST_CASE("info summarizes checkpoints and configurations") {
  std::string out;
  REQUIRE(run_cli("info --checkpoint " + kDir + "/run1/final.mrrw", &out) == 0);
  CHECK(out.find("total") != std::string::npos);
  CHECK(out.find("embedding") != std::string::npos);
  CHECK(out.find("o1") != std::string::npos);

  REQUIRE(run_cli("info --config " + kDir + "/micro.json", &out) == 0);
  CHECK(out.find("total") != std::string::npos);

  REQUIRE(run_cli("info", &out) == 0);
  CHECK(out.find("total") != std::string::npos);
}

TEST_CASE("self-check command reports success through its exit code") {
  std::string out;
  CHECK(run_cli("verify --level fast", &out) == 0);
  CHECK(out.find("PASS") != std::string::npos);
  CHECK(out.find("all suites passed") != std::string::npos);
}
