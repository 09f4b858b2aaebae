#include "mrw/config.hpp"

#include <fstream>

namespace mrw {
namespace cfg {

void require_known_keys(const nlohmann::json& obj,
                        const std::vector<std::string>& known,
                        const std::string& path) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool found = false;
    for (const auto& k : known)
      if (it.key() == k) {
        found = true;
        break;
      }
    if (!found) throw ConfigError(path + ": unknown key '" + it.key() + "'");
  }
}

const nlohmann::json& require_object(const nlohmann::json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path + ": expected a JSON object");
  return j;
}

double get_number(const nlohmann::json& obj, const std::string& key, double fallback,
                  const std::string& path) {
  if (!obj.contains(key)) return fallback;
  const auto& v = obj.at(key);
  if (!v.is_number()) throw ConfigError(path + "." + key + ": expected a number");
  return v.get<double>();
}

int get_int(const nlohmann::json& obj, const std::string& key, int fallback,
            const std::string& path) {
  if (!obj.contains(key)) return fallback;
  const auto& v = obj.at(key);
  if (!v.is_number_integer()) throw ConfigError(path + "." + key + ": expected an integer");
  return v.get<int>();
}

bool get_bool(const nlohmann::json& obj, const std::string& key, bool fallback,
              const std::string& path) {
  if (!obj.contains(key)) return fallback;
  const auto& v = obj.at(key);
  if (!v.is_boolean()) throw ConfigError(path + "." + key + ": expected a boolean");
  return v.get<bool>();
}

std::string get_string(const nlohmann::json& obj, const std::string& key,
                       const std::string& fallback, const std::string& path) {
  if (!obj.contains(key)) return fallback;
  const auto& v = obj.at(key);
  if (!v.is_string()) throw ConfigError(path + "." + key + ": expected a string");
  return v.get<std::string>();
}

}  // namespace cfg

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  cfg::require_object(j, "config");
  cfg::require_known_keys(j, {"seed", "out_dir", "model", "corpus", "train", "eval"},
                          "config");
  RunConfig c;
  if (j.contains("seed")) {
    if (!j.at("seed").is_number_integer())
      throw ConfigError("config.seed: expected an integer");
    c.seed = j.at("seed").get<uint64_t>();
  }
  c.out_dir = cfg::get_string(j, "out_dir", c.out_dir, "config");
  if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"), "config.model");
  if (j.contains("corpus")) {
    const auto& o = cfg::require_object(j.at("corpus"), "config.corpus");
    cfg::require_known_keys(
        o, {"speakers", "utterances_per_speaker", "eval_utterances_per_speaker"},
        "config.corpus");
    c.corpus.speakers = cfg::get_int(o, "speakers", c.corpus.speakers, "config.corpus");
    c.corpus.utterances_per_speaker =
        cfg::get_int(o, "utterances_per_speaker", c.corpus.utterances_per_speaker,
                     "config.corpus");
    c.corpus.eval_utterances_per_speaker =
        cfg::get_int(o, "eval_utterances_per_speaker",
                     c.corpus.eval_utterances_per_speaker, "config.corpus");
  }
  if (j.contains("train")) {
    const auto& o = cfg::require_object(j.at("train"), "config.train");
    cfg::require_known_keys(o,
                            {"epochs", "steps_per_epoch", "batch_size", "lr_max",
                             "lr_min", "weight_decay", "margin", "scale", "full_seconds",
                             "min_seconds", "p_full"},
                            "config.train");
    c.train.epochs = cfg::get_int(o, "epochs", c.train.epochs, "config.train");
    c.train.steps_per_epoch =
        cfg::get_int(o, "steps_per_epoch", c.train.steps_per_epoch, "config.train");
    c.train.batch_size =
        cfg::get_int(o, "batch_size", c.train.batch_size, "config.train");
    c.train.lr_max = cfg::get_number(o, "lr_max", c.train.lr_max, "config.train");
    c.train.lr_min = cfg::get_number(o, "lr_min", c.train.lr_min, "config.train");
    c.train.weight_decay =
        cfg::get_number(o, "weight_decay", c.train.weight_decay, "config.train");
    c.train.margin = cfg::get_number(o, "margin", c.train.margin, "config.train");
    c.train.scale = cfg::get_number(o, "scale", c.train.scale, "config.train");
    c.train.full_seconds =
        cfg::get_number(o, "full_seconds", c.train.full_seconds, "config.train");
    c.train.min_seconds =
        cfg::get_number(o, "min_seconds", c.train.min_seconds, "config.train");
    c.train.p_full = cfg::get_number(o, "p_full", c.train.p_full, "config.train");
  }
  if (j.contains("eval")) {
    const auto& o = cfg::require_object(j.at("eval"), "config.eval");
    cfg::require_known_keys(o, {"durations", "nontarget_trials_per_target"},
                            "config.eval");
    if (o.contains("durations")) {
      if (!o.at("durations").is_array())
        throw ConfigError("config.eval.durations: expected an array");
      c.eval.durations.clear();
      for (const auto& d : o.at("durations")) {
        if (d.is_string())
          c.eval.durations.push_back(d.get<std::string>());
        else if (d.is_number())
          c.eval.durations.push_back(nlohmann::json(d).dump());
        else
          throw ConfigError("config.eval.durations: entries must be 'full' or seconds");
      }
    }
    c.eval.nontarget_trials_per_target =
        cfg::get_int(o, "nontarget_trials_per_target",
                     c.eval.nontarget_trials_per_target, "config.eval");
  }
  return c;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config file '" + path + "' cannot be opened");
  nlohmann::json j = nlohmann::json::parse(is, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config file '" + path + "' is not valid JSON");
  return from_json(j);
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j;
  j["seed"] = seed;
  j["out_dir"] = out_dir;
  j["model"] = model.to_json();
  j["corpus"] = {{"speakers", corpus.speakers},
                 {"utterances_per_speaker", corpus.utterances_per_speaker},
                 {"eval_utterances_per_speaker", corpus.eval_utterances_per_speaker}};
  j["train"] = {{"epochs", train.epochs},
                {"steps_per_epoch", train.steps_per_epoch},
                {"batch_size", train.batch_size},
                {"lr_max", train.lr_max},
                {"lr_min", train.lr_min},
                {"weight_decay", train.weight_decay},
                {"margin", train.margin},
                {"scale", train.scale},
                {"full_seconds", train.full_seconds},
                {"min_seconds", train.min_seconds},
                {"p_full", train.p_full}};
  j["eval"] = {{"durations", eval.durations},
               {"nontarget_trials_per_target", eval.nontarget_trials_per_target}};
  return j;
}

}  // namespace mrw
