#include "doctest.h"

#include <clocale>
#include <cmath>
#include <filesystem>
#include <string>

#include "scaling_lab/errors.hpp"
#include "scaling_lab/report.hpp"
#include "scaling_lab/svg.hpp"

using namespace scaling_lab;
using nlohmann::ordered_json;

namespace {

std::size_t count(const std::string& hay, const std::string& needle) {
  std::size_t n = 0;
  for (auto pos = hay.find(needle); pos != std::string::npos; pos = hay.find(needle, pos + 1)) ++n;
  return n;
}

cltlab::CltReport five_point_report() {
  cltlab::CltReport r;
  for (std::size_t n : {64, 128, 256, 512, 1024}) {
    cltlab::VariancePoint p;
    p.n = n;
    p.variance = 2.0 / static_cast<double>(n);
    p.ci = {p.variance * 0.9, p.variance * 1.1, p.variance, 0.0};
    p.reject_frac = std::nan("");
    r.noise.points.push_back(p);
  }
  cltlab::LayerScaling f;
  f.fit = stats::PowerLawFit{-1.0, std::log(2.0), 1.0, 0.0, 5};
  r.noise.fits.push_back(f);
  return r;
}

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("scaling_lab_test_report_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

ordered_json emergence_json(bool detected) {
  emergence::EmergenceCurve c;
  c.chance = 0.25;
  for (int i = 0; i < 6; ++i) {
    emergence::Cell cell;
    cell.parameter_count = 100;
    cell.data_size = 1000 * (i + 1);
    cell.snr.snr = std::exp(0.5 * i - 1.0);
    cell.accuracy.accuracy = 0.25 + 0.1 * i;
    c.cells.push_back(cell);
  }
  c.sigmoid = {true, 0.25, 0.8, 0.2, 2.0, 0.95, {}};
  c.threshold.detected = detected;
  c.threshold.ln_theta = 0.2;
  c.threshold.theta = std::exp(0.2);
  c.threshold.reason = detected ? "" : "no rise above chance";
  return report::to_json(c);
}

}  // namespace

TEST_CASE("csv rows are checked and numbers ignore the locale") {
  report::Csv csv({"a", "b,c"});
  csv.cell(0.5).cell(std::int64_t{-3}).end_row();
  csv.cell(std::nan("")).cell(std::string("x\"y")).end_row();
  CHECK(csv.str() == "a,\"b,c\"\n0.5,-3\nnan,\"x\"\"y\"\n");
  CHECK(csv.rows() == 2);
  csv.cell(1.0);
  CHECK_THROWS_AS(csv.end_row(), UsageError);

  // A comma-decimal locale must not leak into the output.
  if (std::setlocale(LC_ALL, "de_DE.UTF-8")) {
    report::Csv german({"v"});
    german.cell(1.25).end_row();
    CHECK(german.str() == "v\n1.25\n");
    std::setlocale(LC_ALL, "C");
  }
}

TEST_CASE("clt variance csv has one row per point") {
  const auto r = five_point_report();
  const auto text = report::clt_variance_csv(r);
  CHECK(count(text, "\n") == 6);
  CHECK(text.rfind("layer,n,variance,ci_lo,ci_hi,reject_frac\n", 0) == 0);
  CHECK(text.find("0,64,0.03125,") != std::string::npos);
}

TEST_CASE("variance plot: five markers, a fit and a guide") {
  const auto svg = svg::clt_variance_plot(report::to_json(five_point_report()));
  CHECK(count(svg, "<circle class=\"point\"") == 5);
  CHECK(count(svg, "<line ") == 2);
  CHECK(count(svg, "class=\"fit\"") == 1);
  CHECK(count(svg, "class=\"guide\"") == 1);
  CHECK(count(svg, "<path class=\"axis\"") == 1);
  CHECK(svg == svg::clt_variance_plot(report::to_json(five_point_report())));
}

TEST_CASE("emergence plot marks the threshold only when detected") {
  const auto with = svg::emergence_accuracy_plot(emergence_json(true));
  CHECK(count(with, "class=\"threshold\"") == 1);
  CHECK(count(with, "no threshold") == 0);
  CHECK(count(with, "<circle class=\"point\"") == 6);
  const auto without = svg::emergence_accuracy_plot(emergence_json(false));
  CHECK(count(without, "class=\"threshold\"") == 0);
  CHECK(count(without, "no threshold") == 1);
  // No scaling fit in this report.
  CHECK(count(svg::emergence_scaling_plot(emergence_json(true)), "no scaling fit") == 1);
}

TEST_CASE("rendering a run directory is a pure function of its reports") {
  const auto dir = scratch("render");
  report::write_clt(five_point_report(), dir);
  const auto names = svg::render_run(dir);
  REQUIRE(names == std::vector<std::string>{"clt_variance.svg"});
  const auto first = report::read_text(dir / "clt_variance.svg");
  svg::render_run(dir);
  CHECK(report::read_text(dir / "clt_variance.svg") == first);
  std::filesystem::remove_all(dir);
}

TEST_CASE("missing or broken reports are IO errors") {
  const auto dir = scratch("missing");
  CHECK_THROWS_AS(svg::render_run(dir), IoError);
  CHECK_THROWS_AS(svg::render_run(dir / "nope"), IoError);
  report::write_text(dir / "clt_report.json", "{not json");
  CHECK_THROWS_AS(svg::render_run(dir), IoError);
  CHECK_THROWS_AS(report::write_text(dir / "nope" / "x.csv", "x"), IoError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("bias/variance tables include reference rows") {
  biasvar::BiasVarianceReport r;
  r.epsilon = 0.3;
  r.reference_size = 1000;
  biasvar::CapacityResult cap;
  cap.parameter_count = 10;
  cap.reference_runs.resize(1);
  cap.reference_runs[0].loss = 0.4;
  r.capacities = {cap};
  biasvar::Cell cell;
  cell.data_size = 100;
  cell.runs.resize(2);
  cell.runs[0].loss = 0.5;
  cell.runs[1].loss = 0.6;
  r.cells = {cell};
  biasvar::assemble(r);
  const auto text = report::biasvar_runs_csv(r);
  CHECK(count(text, "\n") == 4);
  CHECK(text.find("10,1000,0,0.4,") != std::string::npos);
  const auto j = report::to_json(r, biasvar::monotonicity_diagnostics(r), biasvar::orthogonality_diagnostics(r));
  CHECK(j["cells"][0]["variance"].get<double>() == doctest::Approx(0.15));
  CHECK(j["orthogonality"]["note"].get<std::string>().find("6") != std::string::npos);
}
