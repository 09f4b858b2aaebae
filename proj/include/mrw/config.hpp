#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mrw/model.hpp"

namespace mrw {

// Configuration problems (bad JSON, unknown keys, invalid values). The CLI
// maps these to exit code 2.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace cfg {

// Rejects any key of `obj` not listed in `known`, naming the offending path.
void require_known_keys(const nlohmann::json& obj,
                        const std::vector<std::string>& known,
                        const std::string& path);

const nlohmann::json& require_object(const nlohmann::json& j, const std::string& path);

double get_number(const nlohmann::json& obj, const std::string& key, double fallback,
                  const std::string& path);
int get_int(const nlohmann::json& obj, const std::string& key, int fallback,
            const std::string& path);
bool get_bool(const nlohmann::json& obj, const std::string& key, bool fallback,
              const std::string& path);
std::string get_string(const nlohmann::json& obj, const std::string& key,
                       const std::string& fallback, const std::string& path);

}  // namespace cfg

struct CorpusConfig {
  int speakers = 8;
  int utterances_per_speaker = 20;
  int eval_utterances_per_speaker = 4;
};

struct TrainConfig {
  int epochs = 8;
  int steps_per_epoch = 20;
  int batch_size = 32;
  double lr_max = 5e-4;
  double lr_min = 3e-6;
  double weight_decay = 5e-5;
  double margin = 0.3;
  double scale = 30.0;
  double full_seconds = 3.0;   // fixed-duration draw length
  double min_seconds = 1.0;    // lower bound of the variable draw
  double p_full = 0.5;         // probability of the fixed-duration draw
};

struct EvalConfig {
  // Entries are either "full" or a number of seconds.
  std::vector<std::string> durations = {"full", "5", "2", "1"};
  int nontarget_trials_per_target = 1;
};

struct RunConfig {
  uint64_t seed = 1;
  std::string out_dir = "run_out";
  ModelConfig model;
  CorpusConfig corpus;
  TrainConfig train;
  EvalConfig eval;

  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig from_file(const std::string& path);
  nlohmann::json to_json() const;
};

}  // namespace mrw
