#pragma once

// Result tables (CSV) and summaries (JSON) for each experiment kind. Numbers
// go through format_double so reruns are byte-identical.

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "scaling_lab/biasvar.hpp"
#include "scaling_lab/cltlab.hpp"
#include "scaling_lab/emergence.hpp"
#include "scaling_lab/nanoformer.hpp"

namespace scaling_lab::report {

using nlohmann::ordered_json;

class Csv {
 public:
  explicit Csv(std::vector<std::string> header);
  Csv& cell(double v);
  Csv& cell(std::int64_t v);
  Csv& cell(std::uint64_t v);
  Csv& cell(int v) { return cell(static_cast<std::int64_t>(v)); }
  Csv& cell(bool v);
  Csv& cell(const std::string& v);
  /// Throws UsageError when the row width differs from the header.
  void end_row();
  std::string str() const { return text_; }
  std::size_t rows() const { return rows_; }

 private:
  std::size_t width_;
  std::size_t pending_ = 0;
  std::size_t rows_ = 0;
  std::string text_;
  std::string line_;
};

/// Writes the whole file or throws IoError.
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

/// JSON number, with non-finite values as null.
ordered_json number(double v);

ordered_json to_json(const cltlab::CltReport& r);
ordered_json to_json(const nanoformer::AssumptionReport& r);
ordered_json to_json(const biasvar::BiasVarianceReport& r, const biasvar::MonotonicityReport& m,
                     const biasvar::OrthogonalityReport& o);
ordered_json to_json(const emergence::EmergenceCurve& c);

std::string clt_variance_csv(const cltlab::CltReport& r);
std::string clt_concentration_csv(const cltlab::CltReport& r);
std::string clt_blocks_csv(const cltlab::CltReport& r);
std::string clt_ffn_csv(const cltlab::CltReport& r);
std::string biasvar_runs_csv(const biasvar::BiasVarianceReport& r);
std::string biasvar_cells_csv(const biasvar::BiasVarianceReport& r);
std::string emergence_csv(const emergence::EmergenceCurve& c);
std::string assumptions_csv(const nanoformer::AssumptionReport& r);

/// Each returns the file names written into `dir`.
std::vector<std::string> write_clt(const cltlab::CltReport& r, const std::filesystem::path& dir);
std::vector<std::string> write_biasvar(const biasvar::BiasVarianceReport& r, const std::filesystem::path& dir);
std::vector<std::string> write_emergence(const emergence::EmergenceCurve& c, const std::filesystem::path& dir);
std::vector<std::string> write_assumptions(const nanoformer::AssumptionReport& r, const std::filesystem::path& dir);

}  // namespace scaling_lab::report
