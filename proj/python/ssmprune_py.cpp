#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "ssmprune/checkpoint.hpp"
#include "ssmprune/cli.hpp"
#include "ssmprune/error.hpp"
#include "ssmprune/eval.hpp"
#include "ssmprune/pruning.hpp"
#include "ssmprune/serialize.hpp"
#include "ssmprune/toy.hpp"

namespace py = pybind11;
using namespace ssmprune;

namespace {

CalibSet to_calib(const std::vector<TokenSeq>& sequences) {
  CalibSet c;
  c.sequences = sequences;
  return c;
}

py::array_t<float> to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<float> out(shape);
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

}  // namespace

PYBIND11_MODULE(_ssmprune, m) {
  m.doc() = "Bindings for the ssmprune C++ core";
  py::register_exception<Error>(m, "SsmpruneError");

  py::class_<Model>(m, "Model")
      .def_property_readonly("dims_json", [](const Model& model) { return dump_json(to_json(model.dims)); })
      .def_property_readonly("num_params", [](const Model& model) { return count_elements(model); })
      .def("__eq__", [](const Model& a, const Model& b) { return a == b; });

  m.def("preset_names", &preset_names);
  m.def("toy_model", [](const std::string& preset, std::uint64_t seed) { return make_toy_model(preset_dims(preset), seed); },
        py::arg("preset"), py::arg("seed") = 0);
  m.def("read_checkpoint", &read_checkpoint, py::arg("path"));
  m.def("write_checkpoint", &write_checkpoint, py::arg("path"), py::arg("model"));
  m.def("forward", [](const Model& model, const TokenSeq& tokens) { return to_array(model_forward(model, tokens)); },
        py::arg("model"), py::arg("tokens"));
  m.def("perplexity",
        [](const Model& model, const std::vector<TokenSeq>& sequences, int threads) {
          return perplexity(model, to_calib(sequences), threads).perplexity;
        },
        py::arg("model"), py::arg("sequences"), py::arg("threads") = 1);
  m.def("sample_corpus",
        [](const Model& model, std::size_t count, std::size_t length, std::uint64_t seed) {
          return sample_corpus(model, count, length, seed).sequences;
        },
        py::arg("model"), py::arg("count"), py::arg("length"), py::arg("seed") = 0);
  m.def("merge_heads", &merge_heads, py::arg("model"), py::arg("factor"));
  m.def("_merge_report_json",
        [](const std::string& preset, std::int64_t factor) {
          const auto dims = preset_dims(preset);
          return dump_json(to_json(compression_report(dims, planned_dims(dims, plan_merge(dims, factor)))));
        },
        py::arg("preset"), py::arg("factor"));
  m.def("run_cli",
        [](const std::vector<std::string>& args) {
          std::ostringstream out, err;
          const int code = run_cli(args, out, err);
          return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"));
}
