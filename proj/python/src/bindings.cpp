#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <optional>
#include <string>
#include <vector>

#include "scaling_lab/config.hpp"
#include "scaling_lab/errors.hpp"
#include "scaling_lab/nanoformer.hpp"
#include "scaling_lab/rng.hpp"
#include "scaling_lab/runner.hpp"
#include "scaling_lab/sources.hpp"
#include "scaling_lab/stats.hpp"

namespace py = pybind11;
using namespace scaling_lab;

namespace {

py::dict fit_dict(const stats::PowerLawFit& f) {
  py::dict d;
  d["exponent"] = f.exponent;
  d["log_intercept"] = f.log_intercept;
  d["r_squared"] = f.r_squared;
  d["slope_stderr"] = f.slope_stderr;
  d["count"] = f.count;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Scaling lab core";
  m.attr("__version__") = runner::tool_version();

  // Config-like errors read as ValueError, file errors as OSError.
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const ConfigError& e) {
      PyErr_SetString(PyExc_ValueError, e.what());
    } catch (const PlanError& e) {
      PyErr_SetString(PyExc_ValueError, e.what());
    } catch (const ParameterError& e) {
      PyErr_SetString(PyExc_ValueError, e.what());
    } catch (const DomainError& e) {
      PyErr_SetString(PyExc_ValueError, e.what());
    } catch (const UsageError& e) {
      PyErr_SetString(PyExc_ValueError, e.what());
    } catch (const IoError& e) {
      PyErr_SetString(PyExc_OSError, e.what());
    }
  });

  py::class_<sources::Source>(m, "Source")
      .def_static("uniform", &sources::Source::uniform, py::arg("vocab_size"))
      .def_static("iid", &sources::Source::iid, py::arg("probs"))
      .def_static("markov", &sources::Source::markov, py::arg("transition"))
      .def_static("block_stationary", &sources::Source::block_stationary, py::arg("base"), py::arg("width"))
      .def_static("planted_copy", &sources::Source::planted_copy, py::arg("lag"), py::arg("copy_prob"),
                  py::arg("background"))
      .def_property_readonly("vocab_size", &sources::Source::vocab_size)
      .def_property_readonly("kind", [](const sources::Source& s) { return sources::to_string(s.kind()); })
      .def("__repr__", [](const sources::Source& s) { return "<Source " + s.id() + ">"; });

  m.def("entropy_rate", &sources::entropy_rate, py::arg("source"), "Exact entropy rate in nats per token.");
  m.def(
      "sample",
      [](const sources::Source& s, std::size_t n, std::uint64_t seed) { return sources::sample_sequence(s, n, seed).tokens; },
      py::arg("source"), py::arg("n"), py::arg("seed"));

  m.def(
      "derive_seed",
      [](std::uint64_t master, const std::vector<std::uint64_t>& coords) { return derive_seed(master, coords); },
      py::arg("master"), py::arg("coords"));

  m.def(
      "power_law_fit", [](const std::vector<double>& xs, const std::vector<double>& ys) { return fit_dict(stats::power_law_fit(xs, ys)); },
      py::arg("xs"), py::arg("ys"));
  m.def("hoeffding_tail", &stats::hoeffding_tail, py::arg("epsilon"), py::arg("block_size"), py::arg("m_prime"),
        py::arg("kappa"));
  m.def(
      "spearman", [](const std::vector<double>& xs, const std::vector<double>& ys) { return stats::spearman(xs, ys); },
      py::arg("xs"), py::arg("ys"));
  m.def(
      "bootstrap_mean_ci",
      [](const std::vector<double>& data, double level, int reps, std::uint64_t seed) {
        const auto ci = stats::bootstrap_ci(
            data, [](std::span<const double> xs) { return stats::mean(xs); }, level, reps, seed);
        return py::make_tuple(ci.lo, ci.hi);
      },
      py::arg("data"), py::arg("level") = 0.95, py::arg("reps") = 1000, py::arg("seed") = 0);

  m.def(
      "parameter_count",
      [](int vocab_size, int model_dim, int key_dim, int ffn_hidden_dim, int num_layers) {
        nanoformer::ModelConfig c;
        c.vocab_size = vocab_size;
        c.model_dim = model_dim;
        c.key_dim = key_dim;
        c.ffn_hidden_dim = ffn_hidden_dim;
        c.num_layers = num_layers;
        return nanoformer::init_model(c, 0).parameter_count();
      },
      py::arg("vocab_size"), py::arg("model_dim"), py::arg("key_dim"), py::arg("ffn_hidden_dim"),
      py::arg("num_layers") = 1);

  m.def(
      "validate_config",
      [](const std::string& text) {
        const auto r = config::parse_config(text);
        std::vector<std::pair<std::string, std::string>> issues;
        for (const auto& i : r.issues) issues.emplace_back(i.path, i.message);
        return issues;
      },
      py::arg("text"), "Issues as (path, message) pairs; empty when the config is valid.");

  m.def(
      "run",
      [](const std::filesystem::path& config_path, std::optional<std::uint64_t> seed, std::optional<int> jobs,
         std::optional<std::filesystem::path> out, bool plots) {
        runner::RunOptions opts;
        opts.seed = seed;
        opts.jobs = jobs;
        opts.out = out;
        opts.no_plots = !plots;
        auto cfg = runner::load_or_throw(config_path);
        py::gil_scoped_release release;
        return runner::run(std::move(cfg), opts).run_dir;
      },
      py::arg("config_path"), py::arg("seed") = py::none(), py::arg("jobs") = py::none(), py::arg("out") = py::none(),
      py::arg("plots") = true, "Runs a config or manifest and returns the run directory.");

  m.def(
      "render_plots",
      [](const std::filesystem::path& run_dir) { return runner::render_plots(run_dir); }, py::arg("run_dir"));
}
