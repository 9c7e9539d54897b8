#include "safeclip/experiment.hpp"
#include "safeclip/gmm.hpp"
#include "safeclip/losses.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

namespace py = pybind11;
using namespace safeclip;

namespace {

py::dict fit_to_dict(const GmmFit& f) {
  py::dict d;
  d["weights"] = std::vector<double>(f.weights.begin(), f.weights.end());
  d["means"] = std::vector<double>(f.means.begin(), f.means.end());
  d["variances"] = std::vector<double>(f.variances.begin(), f.variances.end());
  d["posteriors"] = f.posteriors;
  d["log_likelihood_trace"] = f.log_likelihood_trace;
  d["iterations"] = f.iterations;
  d["converged"] = f.converged;
  d["degenerate"] = f.degenerate;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Native core of the safeclip package";

  static py::exception<ConfigError> config_error(m, "ConfigError", PyExc_ValueError);
  static py::exception<InputError> input_error(m, "InputError", PyExc_ValueError);
  static py::exception<StateError> state_error(m, "StateError", PyExc_RuntimeError);
  static py::exception<TrainingFault> training_fault(m, "TrainingFault", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const ConfigError& e) {
      PyErr_SetString(config_error.ptr(), e.what());
    } catch (const InputError& e) {
      PyErr_SetString(input_error.ptr(), e.what());
    } catch (const StateError& e) {
      PyErr_SetString(state_error.ptr(), e.what());
    } catch (const TrainingFault& e) {
      PyErr_SetString(training_fault.ptr(), e.what());
    }
  });

  m.def("preset_names", &preset_names);
  m.def(
      "preset_config", [](const std::string& name) { return serialize_config(preset(name)); }, py::arg("name"),
      "Canonical JSON of a built-in preset.");
  m.def(
      "normalize_config", [](const std::string& text) { return serialize_config(parse_config(text)); },
      py::arg("text"), "Parse, validate and re-serialize a config.");
  m.def(
      "config_hash", [](const std::string& text) { return config_hash(parse_config(text)); }, py::arg("text"));
  m.def(
      "run_experiment",
      [](const std::string& text, const std::string& output_dir, int verbosity) {
        const auto config = parse_config(text);
        RunOptions opts;
        opts.verbosity = static_cast<Verbosity>(std::clamp(verbosity, 0, 2));
        py::gil_scoped_release release;
        return run_experiment(config, output_dir, opts).summary_json;
      },
      py::arg("text"), py::arg("output_dir"), py::arg("verbosity") = 0,
      "Run a config; returns the summary JSON text.");

  m.def(
      "clip_loss",
      [](const Matrix& image_reps, const Matrix& text_reps, double temperature) {
        const auto o = clip_loss(image_reps, text_reps, temperature);
        return py::make_tuple(o.value, o.grad_image_reps, o.grad_text_reps, o.grad_log_temperature);
      },
      py::arg("image_reps"), py::arg("text_reps"), py::arg("temperature"),
      "Returns (loss, d/d image_reps, d/d text_reps, d/d log tau).");
  m.def(
      "unimodal_self_loss",
      [](const Matrix& reps, const Matrix& augmented, double temperature) {
        const auto o = unimodal_self_loss(reps, augmented, temperature);
        return py::make_tuple(o.value, o.grad_reps, o.grad_augmented_reps, o.grad_log_temperature);
      },
      py::arg("reps"), py::arg("augmented_reps"), py::arg("temperature"));
  m.def(
      "em_fit",
      [](const std::vector<double>& x, int max_iters, double tol) {
        EmOptions o;
        o.max_iters = max_iters;
        o.tol = tol;
        return fit_to_dict(em_fit(x, o));
      },
      py::arg("similarities"), py::arg("max_iters") = 100, py::arg("tol") = 1e-6);
  m.def("top_count", &top_count, py::arg("percent"), py::arg("n"));
}
