#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "mrw/config.hpp"
#include "mrw/evaluator.hpp"
#include "mrw/frontend.hpp"
#include "mrw/model.hpp"
#include "mrw/trainer.hpp"
#include "mrw/verify.hpp"

namespace py = pybind11;
using namespace mrw;

namespace {

// Untrained-or-loaded model wrapper for embedding extraction from Python.
struct Embedder {
  Model model;

  explicit Embedder(const std::string& checkpoint_path)
      : model(load_checkpoint(checkpoint_path)) {}

  Embedder(const nlohmann::json& model_json, uint64_t seed)
      : model(assemble(ModelConfig::from_json(model_json, "model"), seed)) {}

  int dim() const { return model.cfg.embed_dim; }
  int frame_stride() const { return model.cfg.frame_stride(); }

  std::vector<double> embed(const std::vector<double>& samples) const {
    const int stride = model.cfg.frame_stride();
    const int64_t keep =
        (static_cast<int64_t>(samples.size()) / stride) * stride;
    if (keep <= 0)
      throw std::invalid_argument(
          "embed: need at least " + std::to_string(stride) + " samples, got " +
          std::to_string(samples.size()));
    Tensor wave({1, 1, static_cast<int>(keep)});
    for (int64_t i = 0; i < keep; ++i)
      wave.data()[i] = samples[static_cast<size_t>(i)];
    wave = preemphasize(wave, model.cfg.preemphasis);
    const Tensor e = model.forward(wave, Mode::kEval);
    return std::vector<double>(e.data(), e.data() + e.numel());
  }
};

Embedder embedder_from_config(const std::string& model_json, uint64_t seed) {
  nlohmann::json j = nlohmann::json::parse(model_json, nullptr, false);
  if (j.is_discarded())
    throw std::invalid_argument("embedder_from_config: invalid JSON");
  return Embedder(j, seed);
}

py::dict param_counts(const std::string& variant) {
  ModelConfig cfg;
  if (variant == "baseline")
    cfg.variant = Variant::kRawNet3Baseline;
  else if (variant != "mr")
    throw std::invalid_argument("param_counts: variant must be 'mr' or 'baseline'");
  const Model m = assemble(cfg, 1);
  py::dict out;
  for (const auto& [name, n] : m.count_by_module()) out[py::str(name)] = n;
  out["total"] = m.count_params();
  return out;
}

py::list geometry_list(int k1, int m1, int n) {
  py::list out;
  for (const FEGeometry& g : derive_geometry(k1, m1, n)) {
    py::dict d;
    d["index"] = g.index;
    d["kernel"] = g.kernel_pf;
    d["stride"] = g.stride_pf;
    d["last_kernel"] = g.kernel_last;
    d["last_stride"] = g.stride_last;
    out.append(d);
  }
  return out;
}

py::tuple run_verify(const std::string& level) {
  std::vector<SuiteResult> results;
  if (level == "fast")
    results = run_fast();
  else if (level == "full")
    results = run_full();
  else
    throw std::invalid_argument("verify: level must be 'fast' or 'full'");
  return py::make_tuple(all_passed(results), format_results(results));
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Multi-resolution raw-waveform speaker verification core";

  m.def("frame_stride", &frame_stride, py::arg("kernel1") = 50,
        py::arg("last1") = 16,
        "Samples per output frame shared by all extractors.");
  m.def("geometry", &geometry_list, py::arg("kernel1") = 50,
        py::arg("last1") = 16, py::arg("extractors") = 4,
        "Kernel/stride schedule of the multi-resolution front-end.");
  m.def(
      "preemphasize",
      [](const std::vector<double>& x, double coef) {
        return preemphasize(x, coef);
      },
      py::arg("x"), py::arg("coef") = 0.97,
      "First-order high-pass: y[n] = x[n] - coef*x[n-1].");
  m.def("cosine_lr", &cosine_lr, py::arg("step"), py::arg("total_steps"),
        py::arg("lr_max") = 5e-4, py::arg("lr_min") = 3e-6,
        "Half-cosine decay with exact endpoints.");
  m.def(
      "eer",
      [](const std::vector<double>& scores, const std::vector<bool>& targets) {
        const EerResult r = eer(scores, targets);
        return py::make_tuple(r.eer, r.threshold);
      },
      py::arg("scores"), py::arg("targets"),
      "Equal error rate and its threshold for accept-if-score>=t.");
  m.def("min_dcf", &min_dcf, py::arg("scores"), py::arg("targets"),
        py::arg("p_target") = 0.05, py::arg("c_miss") = 1.0,
        py::arg("c_fa") = 1.0, "Minimum normalized detection cost.");
  m.def("cosine_score", &cosine_score, py::arg("a"), py::arg("b"),
        "Cosine similarity between two embeddings.");
  m.def("param_counts", &param_counts, py::arg("variant") = "mr",
        "Trainable parameter counts per module plus 'total'.");
  m.def("verify", &run_verify, py::arg("level") = "fast",
        "Run the self-check suites; returns (all_passed, report).");
  m.def("default_config", [] { return RunConfig().to_json().dump(2); },
        "Default run configuration as a JSON string.");

  py::class_<Embedder>(m, "Embedder")
      .def(py::init<const std::string&>(), py::arg("checkpoint_path"),
           "Load a trained model from a checkpoint file.")
      .def_property_readonly("dim", &Embedder::dim)
      .def_property_readonly("frame_stride", &Embedder::frame_stride)
      .def("embed", &Embedder::embed, py::arg("samples"),
           "Embedding of a 16 kHz waveform (floored to whole frames).");
  m.def("embedder_from_config", &embedder_from_config, py::arg("model_json"),
        py::arg("seed") = 1,
        "Untrained model built from a model-config JSON string.");
}
