#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "mrw/config.hpp"
#include "mrw/model.hpp"
#include "support/test_util.hpp"

using namespace mrw;
using namespace mrw::testutil;

namespace {

ModelConfig micro_mr_config() {
  ModelConfig cfg;
  cfg.mrfe.extractors = 2;
  cfg.mrfe.fbank_filters = 16;
  cfg.mrfe.channels = 8;
  cfg.mrfe.hidden = 16;
  cfg.mrfe.blocks = 2;
  cfg.mrfe.repeats = 1;
  cfg.backbone.channels = 16;
  cfg.backbone.blocks_per_stage = 1;
  cfg.backbone.head_channels = 32;
  cfg.d_att = 8;
  cfg.embed_dim = 16;
  return cfg;
}

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is.good());
  return std::string(std::istreambuf_iterator<char>(is),
                     std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream os(path, std::ios::binary);
  REQUIRE(os.good());
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

uint32_t u32_at(const std::string& bytes, size_t off) {
  auto b = [&](size_t i) { return static_cast<uint32_t>(static_cast<unsigned char>(bytes[off + i])); };
  return b(0) | (b(1) << 8) | (b(2) << 16) | (b(3) << 24);
}

void put_u32(std::string& bytes, size_t off, uint32_t v) {
  for (int i = 0; i < 4; ++i)
    bytes[off + static_cast<size_t>(i)] = static_cast<char>((v >> (8 * i)) & 0xff);
}

std::string exception_text(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

}  // namespace

// ---------------------------------------------------------------------------
// Attentive statistics pooling
// ---------------------------------------------------------------------------

TEST_CASE("pooling attention weights form a distribution over time per channel") {
  Rng rng(41);
  ASP asp(12, 4, rng);
  const Tensor x = rand_tensor(rng, {2, 12, 7});
  const Tensor w = asp.weights(x);
  REQUIRE(w.shape() == std::vector<int>{2, 12, 7});
  for (int b = 0; b < 2; ++b)
    for (int c = 0; c < 12; ++c) {
      double sum = 0.0;
      for (int t = 0; t < 7; ++t) {
        const double v = w.data()[(b * 12 + c) * 7 + t];
        CHECK(v > 0.0);
        CHECK(v < 1.0);
        sum += v;
      }
      CHECK(std::fabs(sum - 1.0) <= 1e-12);
    }
}

TEST_CASE("pooling a time-constant signal returns its value with zero spread") {
  Rng rng(42);
  ASP asp(6, 4, rng);
  Tensor x({1, 6, 9});
  for (int c = 0; c < 6; ++c)
    for (int t = 0; t < 9; ++t) x.data()[c * 9 + t] = 0.3 * (c + 1);
  const Tensor y = asp.forward(x);
  REQUIRE(y.shape() == std::vector<int>{1, 2 * 6});
  for (int c = 0; c < 6; ++c) {
    CHECK(std::fabs(y.data()[c] - 0.3 * (c + 1)) <= 1e-9);   // weighted mean
    CHECK(std::fabs(y.data()[6 + c]) <= 1e-7);               // weighted std
  }
}

TEST_CASE("pooling output width is independent of the number of frames") {
  Rng rng(43);
  ASP asp(10, 4, rng);
  for (int frames : {2, 5, 23, 64}) {
    const Tensor x = rand_tensor(rng, {3, 10, frames});
    CHECK(asp.forward(x).shape() == std::vector<int>{3, 20});
  }
}

// ---------------------------------------------------------------------------
// Parameter accounting
// ---------------------------------------------------------------------------

TEST_CASE("default model parameter counts land in the published budget") {
  const Model mr = assemble(ModelConfig{}, 5);
  const int64_t mr_total = mr.count_params();
  CHECK(mr_total == 13031232);
  CHECK(mr_total >= 12400000);  // 15.5M - 20%
  CHECK(mr_total <= 18600000);  // 15.5M + 20%

  const auto by_module = mr.count_by_module();
  REQUIRE(by_module.size() == 5);
  CHECK(by_module.at("frontend") == 871936);
  CHECK(by_module.at("projection") == 65792);
  CHECK(by_module.at("backbone") == 10518720);
  CHECK(by_module.at("pooling") == 788096);
  CHECK(by_module.at("embedding") == 786688);

  int64_t module_sum = 0;
  for (const auto& [name, n] : by_module) module_sum += n;
  CHECK(module_sum == mr_total);

  ModelConfig base_cfg;
  base_cfg.variant = Variant::kRawNet3Baseline;
  const Model baseline = assemble(base_cfg, 5);
  CHECK(baseline.count_params() == 17798528);
  CHECK(mr_total < baseline.count_params());
  CHECK(base_cfg.frame_stride() == 1500);
}

TEST_CASE("buffer entries are excluded from trainable counts") {
  const Model m = assemble(micro_mr_config(), 3);
  int64_t total = 0, trainable = 0;
  for (const auto& p : m.params()) {
    total += p.tensor.numel();
    if (p.trainable) trainable += p.tensor.numel();
  }
  CHECK(m.count_params(false) == total);
  CHECK(m.count_params(true) == trainable);
  CHECK(trainable < total);  // batch-norm running stats are buffers
}

// ---------------------------------------------------------------------------
// Assembly determinism
// ---------------------------------------------------------------------------

TEST_CASE("assembling twice with one seed gives identical weights and outputs") {
  const ModelConfig cfg = micro_mr_config();
  const Model a = assemble(cfg, 20);
  const Model b = assemble(cfg, 20);
  const ParamList pa = a.params();
  const ParamList pb = b.params();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) {
    REQUIRE(pa[i].path == pb[i].path);
    REQUIRE(pa[i].tensor.same_shape(pb[i].tensor));
    for (int64_t k = 0; k < pa[i].tensor.numel(); ++k)
      REQUIRE(pa[i].tensor.data()[k] == pb[i].tensor.data()[k]);
  }

  Rng rng(6);
  const Tensor wave = rand_tensor(rng, {1, 1, 16000}, -0.1, 0.1);
  const Tensor ea = a.forward(wave, Mode::kEval);
  const Tensor eb = b.forward(wave, Mode::kEval);
  for (int64_t i = 0; i < ea.numel(); ++i) CHECK(ea.data()[i] == eb.data()[i]);

  const Model c = assemble(cfg, 21);
  const Tensor ec = c.forward(wave, Mode::kEval);
  double diff = 0.0;
  for (int64_t i = 0; i < ea.numel(); ++i)
    diff = std::max(diff, std::fabs(ea.data()[i] - ec.data()[i]));
  CHECK(diff > 0.0);
}

// ---------------------------------------------------------------------------
// Forward contract
// ---------------------------------------------------------------------------

TEST_CASE("forward trace lists the stage outputs in order") {
  const Model m = assemble(micro_mr_config(), 7);
  Rng rng(8);
  const Tensor wave = rand_tensor(rng, {1, 1, 16000}, -0.1, 0.1);
  ForwardTrace trace;
  const Tensor e = m.forward(wave, Mode::kEval, &trace);
  REQUIRE(e.shape() == std::vector<int>{1, 16});

  std::vector<std::string> labels;
  for (const auto& [label, shape] : trace.entries) labels.push_back(label);
  const std::vector<std::string> expect = {"o1", "o2", "o3", "o4", "o5",
                                           "o6", "o7", "o8", "embedding"};
  CHECK(labels == expect);
  CHECK(trace.entries.back().second == std::vector<int>{1, 16});
}

TEST_CASE("embedding dimension is identical across input durations") {
  const Model m = assemble(micro_mr_config(), 7);
  Rng rng(9);
  const int stride = m.cfg.frame_stride();
  std::vector<int> widths;
  for (int seconds : {1, 2, 3, 5}) {
    const int samples = seconds * 16000;
    REQUIRE(samples % stride == 0);
    const Tensor e = m.forward(rand_tensor(rng, {1, 1, samples}, -0.1, 0.1),
                               Mode::kEval);
    REQUIRE(e.rank() == 2);
    widths.push_back(e.dim(1));
  }
  for (int w : widths) CHECK(w == widths[0]);
}

TEST_CASE("forward rejects waveforms that are not whole frames") {
  const Model m = assemble(micro_mr_config(), 7);
  Tensor wave({1, 1, 16001});
  const std::string msg =
      exception_text([&] { m.forward(wave, Mode::kEval); });
  CHECK(msg.find("not a multiple of the frame stride") != std::string::npos);
  CHECK(msg.find("crop before calling") != std::string::npos);

  Tensor flat({1, 16000});
  CHECK_THROWS_AS(m.forward(flat, Mode::kEval), std::invalid_argument);
}

TEST_CASE("baseline variant produces a staged trace and the same head shape") {
  ModelConfig cfg;
  cfg.variant = Variant::kRawNet3Baseline;
  cfg.baseline_filters = 12;
  cfg.baseline_channels = 16;
  cfg.backbone.head_channels = 32;
  cfg.d_att = 8;
  cfg.embed_dim = 16;
  REQUIRE(cfg.frame_stride() == 1500);

  const Model m = assemble(cfg, 11);
  Rng rng(12);
  const Tensor wave = rand_tensor(rng, {1, 1, 48000}, -0.1, 0.1);
  ForwardTrace trace;
  const Tensor e = m.forward(wave, Mode::kEval, &trace);
  REQUIRE(e.shape() == std::vector<int>{1, 16});

  std::vector<std::string> labels;
  for (const auto& [label, shape] : trace.entries) labels.push_back(label);
  const std::vector<std::string> expect = {"o2", "o3", "o4", "o5",
                                           "o6", "o7", "o8", "embedding"};
  CHECK(labels == expect);
  // 48000 samples / stride 50 = 960 frames, then pools 5, 3, 2.
  CHECK(trace.entries[0].second == std::vector<int>{1, 16, 960});
  CHECK(trace.entries[1].second == std::vector<int>{1, 16, 192});
  CHECK(trace.entries[2].second == std::vector<int>{1, 16, 64});
  CHECK(trace.entries[3].second == std::vector<int>{1, 16, 32});
  CHECK(trace.entries[4].second == std::vector<int>{1, 48, 32});
  CHECK(trace.entries[5].second == std::vector<int>{1, 32, 32});
  CHECK(trace.entries[6].second == std::vector<int>{1, 64});
}

// ---------------------------------------------------------------------------
// Checkpoint round-trips and corruption handling
// ---------------------------------------------------------------------------

TEST_CASE("checkpoints restore weights, outputs, and bytes exactly") {
  const std::string dir = "ckpt_test_dir";
  std::remove((dir + "/a.mrrw").c_str());
  std::filesystem::create_directories(dir);

  const Model m = assemble(micro_mr_config(), 31);
  const std::string path_a = dir + "/a.mrrw";
  save_checkpoint(m, path_a);

  const Model r = load_checkpoint(path_a);
  const ParamList pm = m.params();
  const ParamList pr = r.params();
  REQUIRE(pm.size() == pr.size());
  for (size_t i = 0; i < pm.size(); ++i) {
    REQUIRE(pm[i].path == pr[i].path);
    REQUIRE(pm[i].tensor.same_shape(pr[i].tensor));
    // Storage is float32, so compare after the same narrowing.
    for (int64_t k = 0; k < pm[i].tensor.numel(); ++k)
      REQUIRE(static_cast<float>(pm[i].tensor.data()[k]) ==
              static_cast<float>(pr[i].tensor.data()[k]));
  }

  Rng rng(32);
  const Tensor wave = rand_tensor(rng, {1, 1, 16000}, -0.1, 0.1);
  const Tensor em = r.forward(wave, Mode::kEval);
  const Tensor em2 = load_checkpoint(path_a).forward(wave, Mode::kEval);
  for (int64_t i = 0; i < em.numel(); ++i) CHECK(em.data()[i] == em2.data()[i]);

  const std::string path_b = dir + "/b.mrrw";
  save_checkpoint(r, path_b);
  CHECK(read_file(path_a) == read_file(path_b));
}

TEST_CASE("checkpoint loader reports each corruption mode by name") {
  const std::string dir = "ckpt_test_dir";
  std::filesystem::create_directories(dir);
  const Model m = assemble(micro_mr_config(), 33);
  const std::string good_path = dir + "/good.mrrw";
  save_checkpoint(m, good_path);
  const std::string good = read_file(good_path);
  REQUIRE(good.size() > 64);
  REQUIRE(good.substr(0, 5) == "MRRW1");

  auto load_err = [&](const std::string& name, const std::string& bytes) {
    const std::string p = dir + "/" + name;
    write_file(p, bytes);
    return exception_text([&] { load_checkpoint(p); });
  };

  CHECK(exception_text([&] { load_checkpoint(dir + "/absent.mrrw"); })
            .find("cannot open") != std::string::npos);

  std::string bad_magic = good;
  bad_magic[0] = 'X';
  CHECK(load_err("bad_magic.mrrw", bad_magic).find("is not a MRRW1 checkpoint") !=
        std::string::npos);

  const uint32_t cfg_len = u32_at(good, 5);
  REQUIRE(9 + cfg_len < good.size());
  CHECK(load_err("cut_config.mrrw", good.substr(0, 9 + cfg_len / 2))
            .find("truncated config block") != std::string::npos);

  std::string bad_json = good.substr(0, 5);
  bad_json += std::string("\x05\x00\x00\x00", 4);
  bad_json += "hello";
  CHECK(load_err("bad_json.mrrw", bad_json).find("is not valid JSON") !=
        std::string::npos);

  const size_t entries_off = 9 + cfg_len;
  std::string wrong_count = good;
  put_u32(wrong_count, entries_off, u32_at(good, entries_off) + 1);
  CHECK(load_err("wrong_count.mrrw", wrong_count).find("entry count") !=
        std::string::npos);

  // First entry layout: u32 name length, name, u8 trainable, u32 rank, dims.
  const size_t name_off = entries_off + 4;
  const uint32_t name_len = u32_at(good, name_off);
  std::string bad_name = good;
  bad_name[name_off + 4] = 'Z';
  CHECK(load_err("bad_name.mrrw", bad_name).find("unknown parameter path") !=
        std::string::npos);

  const size_t rank_off = name_off + 4 + name_len + 1;
  const size_t dim0_off = rank_off + 4;
  std::string bad_dim = good;
  put_u32(bad_dim, dim0_off, u32_at(good, dim0_off) + 1);
  CHECK(load_err("bad_dim.mrrw", bad_dim).find("shape mismatch") !=
        std::string::npos);

  CHECK(load_err("cut_data.mrrw", good.substr(0, good.size() - 32))
            .find("truncated") != std::string::npos);
}

// ---------------------------------------------------------------------------
// Configuration serialization
// ---------------------------------------------------------------------------

TEST_CASE("run configuration survives a JSON round-trip") {
  RunConfig rc;
  rc.seed = 99;
  rc.out_dir = "elsewhere";
  rc.model = micro_mr_config();
  rc.model.preemphasis = 0.95;
  rc.corpus.speakers = 5;
  rc.corpus.utterances_per_speaker = 7;
  rc.train.epochs = 2;
  rc.train.lr_max = 1e-3;
  rc.train.margin = 0.25;
  rc.eval.durations = {"full", "2"};
  rc.eval.nontarget_trials_per_target = 3;

  const nlohmann::json j = rc.to_json();
  const RunConfig back = RunConfig::from_json(j);
  CHECK(back.to_json() == j);
  CHECK(back.seed == 99);
  CHECK(back.model.mrfe.extractors == 2);
  CHECK(back.model.preemphasis == 0.95);
  CHECK(back.train.lr_max == 1e-3);
  CHECK(back.eval.durations == std::vector<std::string>{"full", "2"});

  ModelConfig base;
  base.variant = Variant::kRawNet3Baseline;
  const ModelConfig base_back = ModelConfig::from_json(base.to_json(), "model");
  CHECK(base_back.variant == Variant::kRawNet3Baseline);
  CHECK(base_back.to_json() == base.to_json());
}

TEST_CASE("unknown configuration keys are rejected with their path") {
  nlohmann::json j = RunConfig().to_json();
  j["model"]["bogus_knob"] = 1;
  const std::string msg =
      exception_text([&] { RunConfig::from_json(j); });
  CHECK(msg.find("bogus_knob") != std::string::npos);
  CHECK(msg.find("model") != std::string::npos);

  nlohmann::json top = RunConfig().to_json();
  top["misspelled"] = true;
  CHECK_THROWS_AS(RunConfig::from_json(top), ConfigError);

  nlohmann::json bad_variant = RunConfig().to_json();
  bad_variant["model"]["variant"] = "transformer";
  const std::string vmsg =
      exception_text([&] { RunConfig::from_json(bad_variant); });
  CHECK(vmsg.find("transformer") != std::string::npos);
}
