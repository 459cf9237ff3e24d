#pragma once

// Plain SVG plots rendered from the JSON reports of a run directory. Output
// depends only on the report contents.

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

namespace scaling_lab::svg {

using nlohmann::ordered_json;

/// log10 variance against log10 n per layer, with the fitted line and a
/// slope -1 guide.
std::string clt_variance_plot(const ordered_json& clt_report);
/// Accuracy against ln SNR with the sigmoid and the threshold.
std::string emergence_accuracy_plot(const ordered_json& emergence_report);
/// ln SNR against ln D per capacity with the fitted lines.
std::string emergence_scaling_plot(const ordered_json& emergence_report);
std::string biasvar_variance_plot(const ordered_json& biasvar_report);
std::string biasvar_bias_plot(const ordered_json& biasvar_report);

/// Renders every plot whose report exists in `run_dir`, writing the SVG files
/// next to it. Returns the file names. Throws IoError when there is nothing
/// to plot.
std::vector<std::string> render_run(const std::filesystem::path& run_dir);

}  // namespace scaling_lab::svg
