// Python bindings for the sensitivity pipeline. Structured results cross the
// boundary as JSON text and are decoded on the Python side.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "saesens/aggregation.hpp"
#include "saesens/error.hpp"
#include "saesens/examples.hpp"
#include "saesens/fixture.hpp"
#include "saesens/generation.hpp"
#include "saesens/pipeline.hpp"
#include "saesens/sae.hpp"
#include "saesens/text_analysis.hpp"

namespace py = pybind11;
using namespace saesens;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Matrix to_matrix(const FloatArray& a) {
  if (a.ndim() != 2) throw ShapeError("expected a 2-d array, got " + std::to_string(a.ndim()) + " dimensions");
  const auto rows = static_cast<std::size_t>(a.shape(0)), cols = static_cast<std::size_t>(a.shape(1));
  return Matrix(rows, cols, std::vector<float>(a.data(), a.data() + rows * cols));
}

FloatArray to_array(const Matrix& m) {
  FloatArray out({m.rows(), m.cols()});
  std::copy(m.data().begin(), m.data().end(), out.mutable_data());
  return out;
}

std::string stage_status(const StageResult& r) { return r.status == StageStatus::ok ? "ok" : "partial"; }

}  // namespace

PYBIND11_MODULE(_saesens, m) {
  m.doc() = "Feature sensitivity evaluation for sparse autoencoders.";

  // Translators run newest first, so the base class goes in before its children.
  auto& base = py::register_exception<Error>(m, "SaesensError");
  py::register_exception<IoError>(m, "IoError", base.ptr());
  py::register_exception<LoadError>(m, "LoadError", base.ptr());
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<ParseError>(m, "ParseError", base.ptr());
  py::register_exception<PreconditionError>(m, "PreconditionError", base.ptr());
  py::register_exception<UndefinedMetricError>(m, "UndefinedMetricError", base.ptr());
  py::register_exception<ChainError>(m, "ChainError", base.ptr());

  py::class_<SaeModel>(m, "SaeModel")
      .def_property_readonly("variant", [](const SaeModel& s) { return to_string(s.variant); })
      .def_readonly("width", &SaeModel::width)
      .def_readonly("d_model", &SaeModel::d_model)
      .def_readonly("l0_label", &SaeModel::l0_label)
      .def("encode", [](const SaeModel& s, const FloatArray& x) { return to_array(encode(s, to_matrix(x))); },
           py::arg("activations"), "T x d_model activations to T x width feature activations.")
      .def("max_decoder_cosine", [](const SaeModel& s, FeatureId f) { return max_decoder_cosine(s, f); })
      .def("__repr__", [](const SaeModel& s) {
        return "<SaeModel " + to_string(s.variant) + " width=" + std::to_string(s.width) +
               " d_model=" + std::to_string(s.d_model) + ">";
      });

  m.def("load_sae", [](const std::filesystem::path& p) { return load_sae(p); }, py::arg("path"));

  m.def(
      "lcs_tokens",
      [](const std::vector<TokenId>& a, const std::vector<TokenId>& b) { return lcs_tokens(a, b); },
      py::arg("a"), py::arg("b"), "Length of the longest common run of token ids.");
  m.def(
      "spearman", [](const std::vector<double>& x, const std::vector<double>& y) { return spearman(x, y); },
      py::arg("x"), py::arg("y"));

  m.def(
      "filter_feature",
      [](FeatureId id, std::size_t count, double rate, std::size_t min_examples, double cutoff) {
        return to_json(filter_feature(id, count, rate, {min_examples, cutoff})).dump();
      },
      py::arg("feature_id"), py::arg("occurrence_count"), py::arg("truncation_rate"), py::arg("min_examples") = 15,
      py::arg("truncation_cutoff") = 0.9);

  m.def(
      "frequency_weighting",
      [](const SaeFrequencies& freqs, std::size_t n_bins) { return to_json(build_frequency_weighting(freqs, n_bins)).dump(); },
      py::arg("frequencies"), py::arg("n_bins") = 20);

  m.def(
      "build_prompt",
      [](const std::string& example_set_json) {
        const auto p = build_prompt(example_set_from_json(nlohmann::json::parse(example_set_json)));
        return py::make_tuple(p.system_text, p.user_text);
      },
      py::arg("example_set_json"), "(system, user) prompt text for a serialized example set.");

  m.def(
      "parse_samples",
      [](const std::string& text) {
        nlohmann::json out = nlohmann::json::array();
        for (const auto& s : parse_samples(text)) {
          nlohmann::json spans = nlohmann::json::array();
          for (const auto& sp : s.target_spans) spans.push_back({sp.start, sp.end});
          out.push_back({{"raw_text", s.raw_text}, {"clean_text", s.clean_text}, {"target_spans", spans}});
        }
        return out.dump();
      },
      py::arg("response_text"));

  m.def(
      "write_fixture",
      [](const std::filesystem::path& dir, std::uint64_t seed) {
        FixtureOptions o;
        o.seed = seed;
        return write_fixture(dir, o).config;
      },
      py::arg("dir"), py::arg("seed") = 7, "Writes a synthetic run and returns its config path.");

  py::class_<PipelineContext>(m, "Pipeline")
      .def(py::init([](const std::filesystem::path& config) { return new PipelineContext(RunConfig::load(config)); }),
           py::arg("config"))
      .def_property_readonly("output_dir", [](const PipelineContext& c) { return c.config().output_dir; })
      .def("sae_dir", &PipelineContext::sae_dir, py::arg("sae_id"))
      .def("collect", [](PipelineContext& c) { return stage_status(run_collect(c)); },
           py::call_guard<py::gil_scoped_release>())
      .def("generate", [](PipelineContext& c) { return stage_status(run_generate(c)); },
           py::call_guard<py::gil_scoped_release>())
      .def("score", [](PipelineContext& c) { return stage_status(run_score(c)); },
           py::call_guard<py::gil_scoped_release>())
      .def("analyze", [](PipelineContext& c) { return stage_status(run_analyze(c)); },
           py::call_guard<py::gil_scoped_release>())
      .def(
          "build_session",
          [](PipelineContext& c, const std::string& id) { return to_json(run_session_build(c, id)).dump(); },
          py::arg("session_id"));
}
