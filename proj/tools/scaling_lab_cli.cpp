// scaling-lab: run, validate and plot experiments.
//
// Exit codes: 0 ok, 2 config error, 3 experiment failure, 4 IO error.

#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "scaling_lab/errors.hpp"
#include "scaling_lab/runner.hpp"

namespace {

constexpr int kConfigError = 2;
constexpr int kExperimentError = 3;
constexpr int kIoError = 4;

int guarded(const std::function<int()>& body) {
  using namespace scaling_lab;
  try {
    return body();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const PlanError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const ParameterError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kIoError;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kIoError;
  } catch (const std::exception& e) {
    std::cerr << "experiment failed: " << e.what() << "\n";
    return kExperimentError;
  }
}

}  // namespace

int main(int argc, char** argv) {
  using namespace scaling_lab;
  CLI::App app{"Scaling lab: noise scaling, bias/variance split and SNR emergence experiments"};
  app.set_version_flag("--version", runner::tool_version());
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  std::optional<std::string> out;
  bool no_plots = false;

  auto* run = app.add_subcommand("run", "Run the experiment described by a config or a run manifest");
  run->add_option("config", config_path, "YAML config, or manifest.json of an earlier run")->required();
  run->add_option("--seed", seed, "Master seed (overrides the config)");
  run->add_option("--jobs", jobs, "Worker threads (default: SCALING_LAB_JOBS, else 1)");
  run->add_option("--out", out, "Parent directory for the run directory");
  run->add_flag("--no-plots", no_plots, "Skip SVG rendering");

  auto* validate = app.add_subcommand("validate", "Check a config without running it");
  validate->add_option("config", config_path, "YAML config or manifest.json")->required();

  std::string run_dir;
  auto* plot = app.add_subcommand("plot", "Render the SVG plots of a finished run");
  plot->add_option("run-dir", run_dir, "Run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigError;
  }

  if (run->parsed()) {
    return guarded([&] {
      runner::RunOptions opts;
      opts.seed = seed;
      opts.jobs = jobs;
      if (out) opts.out = *out;
      opts.no_plots = no_plots;
      const auto result = runner::run(runner::load_or_throw(config_path), opts);
      std::cout << result.run_dir.string() << "\n";
      return 0;
    });
  }
  if (validate->parsed()) {
    return guarded([&] {
      const auto loaded = config::load_config(config_path);
      if (!loaded.ok()) {
        std::cerr << config_path << " is invalid:\n" << runner::format_issues(loaded.issues);
        return kConfigError;
      }
      std::cout << "ok: " << config::to_string(loaded.config->kind) << " config"
                << (loaded.from_manifest ? " (from manifest)" : "") << "\n";
      return 0;
    });
  }
  return guarded([&] {
    for (const auto& f : runner::render_plots(run_dir)) std::cout << f << "\n";
    return 0;
  });
}
