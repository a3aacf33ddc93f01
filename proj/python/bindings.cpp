#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "naln/cli.hpp"
#include "naln/datapipe.hpp"
#include "naln/dsp.hpp"
#include "naln/error.hpp"
#include "naln/model.hpp"
#include "naln/training.hpp"

namespace py = pybind11;
using namespace naln;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

}  // namespace

PYBIND11_MODULE(_naln, m) {
  m.doc() = "Aligned EEG decoding: synthetic data, preprocessing, models and metrics";
  m.attr("__version__") = kToolVersion;

  py::register_exception<Error>(m, "NalnError", PyExc_ValueError);

  py::class_<TrialSet>(m, "TrialSet")
      .def(py::init<>())
      .def_property(
          "data", [](const TrialSet& t) { return to_array(t.data); },
          [](TrialSet& t, const Array& a) { t.data = to_tensor(a); })
      .def_readwrite("labels", &TrialSet::labels)
      .def_readwrite("subject_ids", &TrialSet::subject_ids)
      .def_readwrite("dataset_id", &TrialSet::dataset_id)
      .def_readwrite("fs_hz", &TrialSet::fs_hz)
      .def_readwrite("n_classes", &TrialSet::n_classes)
      .def_readwrite("channel_names", &TrialSet::channel_names)
      .def_property_readonly("n_trials", &TrialSet::n_trials)
      .def("subjects", &TrialSet::subjects)
      .def("validate", &TrialSet::validate)
      .def("__len__", &TrialSet::n_trials);

  m.def("read_eegt", &read_eegt, py::arg("path"));
  m.def("write_eegt", &write_eegt, py::arg("trials"), py::arg("path"));
  m.def(
      "synth",
      [](const std::string& spec_json, std::uint64_t seed) {
        return synth_generate(SynthSpec::from_json(spec_json), seed);
      },
      py::arg("spec_json") = "{}", py::arg("seed") = 0,
      "Generate a synthetic dataset from a JSON spec (missing keys take defaults).");

  m.def(
      "preprocess",
      [](const TrialSet& t, std::optional<std::vector<std::string>> channels, std::optional<double> resample_hz,
         std::optional<double> highpass_hz, std::vector<double> notch_hz, bool car) {
        dsp::PreprocessOptions o;
        o.channels = std::move(channels);
        o.resample_hz = resample_hz;
        o.highpass_hz = highpass_hz;
        o.notch_hz = std::move(notch_hz);
        o.car = car;
        return dsp::preprocess(t, o);
      },
      py::arg("trials"), py::arg("channels") = py::none(), py::arg("resample_hz") = py::none(),
      py::arg("highpass_hz") = py::none(), py::arg("notch_hz") = std::vector<double>{}, py::arg("car") = false);
  m.def(
      "preprocess_defaults", [](const TrialSet& t) { return dsp::preprocess(t, dsp::PreprocessOptions::defaults()); },
      py::arg("trials"));
  m.def(
      "highpass_response",
      [](int order, double cutoff, double fs, const std::vector<double>& freqs) {
        const auto c = dsp::design_butter_highpass(order, cutoff, fs);
        std::vector<double> mag;
        for (double f : freqs) mag.push_back(std::abs(c.response(f)));
        return mag;
      },
      py::arg("order"), py::arg("cutoff_hz"), py::arg("fs_hz"), py::arg("freqs"));
  m.def(
      "resample", [](const std::vector<double>& x, double fs_in, double fs_out) { return dsp::resample(x, fs_in, fs_out); },
      py::arg("signal"), py::arg("fs_in"), py::arg("fs_out"));

  py::class_<Model>(m, "Model")
      .def_static(
          "build", [](const std::string& config_json, std::uint64_t seed) {
            return Model::build(ModelConfig::from_json(config_json), seed);
          },
          py::arg("config_json"), py::arg("seed") = 0)
      .def_static("load", [](const std::string& path) { return Model::load(path); }, py::arg("path"))
      .def("save", [](const Model& self, const std::string& path) { self.save(path); }, py::arg("path"))
      .def_property_readonly("config_json", [](const Model& self) { return self.config().to_json(); })
      .def_property_readonly("parameter_count", &Model::parameter_count)
      .def(
          "forward",
          [](const Model& self, const Array& chunk, const std::vector<std::size_t>& bounds, std::size_t head) {
            return to_array(self.forward(to_tensor(chunk), bounds, head));
          },
          py::arg("chunk"), py::arg("bounds"), py::arg("head") = 0, "Eval-mode logits for [K, C, T] trials.")
      .def(
          "predict",
          [](const Model& self, const TrialSet& t, std::size_t head) { return to_array(predict_subjects(self, t, head)); },
          py::arg("trials"), py::arg("head") = 0);

  m.def("uar", &uar, py::arg("preds"), py::arg("labels"), py::arg("n_classes"));
  m.def("per_class_recall", &per_class_recall, py::arg("preds"), py::arg("labels"), py::arg("n_classes"));
  m.def(
      "combine_four_to_three", [](const Array& logits) { return to_array(combine_four_to_three(to_tensor(logits))); },
      py::arg("logits"));
  m.def(
      "ensemble_logits",
      [](const std::vector<Array>& folds) {
        std::vector<Tensor> ts;
        for (const auto& f : folds) ts.push_back(to_tensor(f));
        return to_array(ensemble_logits(ts));
      },
      py::arg("per_fold_logits"));
  m.def(
      "cross_entropy",
      [](const Array& logits, const std::vector<int>& targets, const std::vector<double>& weights, double smoothing) {
        return cross_entropy(to_tensor(logits), targets, weights, smoothing).item();
      },
      py::arg("logits"), py::arg("targets"), py::arg("class_weights"), py::arg("smoothing") = 0.0);

  m.def(
      "run_cli",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "naln");
        std::vector<const char*> argv;
        for (const auto& a : args) argv.push_back(a.c_str());
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Run a naln command in-process; returns (exit code, stdout, stderr).");
}
