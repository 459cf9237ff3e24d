#include "scaling_lab/report.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "scaling_lab/errors.hpp"
#include "scaling_lab/format.hpp"

namespace scaling_lab::report {

namespace {

std::string quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

ordered_json interval(const stats::Interval& i) {
  return ordered_json{{"lo", number(i.lo)}, {"hi", number(i.hi)}, {"std_error", number(i.std_error)}};
}

std::vector<std::string> write_all(const std::filesystem::path& dir,
                                   const std::vector<std::pair<std::string, std::string>>& files) {
  std::vector<std::string> names;
  for (const auto& [name, text] : files) {
    write_text(dir / name, text);
    names.push_back(name);
  }
  return names;
}

std::string dump(const ordered_json& j) { return j.dump(2) + "\n"; }

}  // namespace

Csv::Csv(std::vector<std::string> header) : width_(header.size()) {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (i) text_ += ',';
    text_ += quote(header[i]);
  }
  text_ += '\n';
}

Csv& Csv::cell(const std::string& v) {
  if (pending_) line_ += ',';
  line_ += quote(v);
  ++pending_;
  return *this;
}

Csv& Csv::cell(double v) { return cell(format_double(v)); }
Csv& Csv::cell(std::int64_t v) { return cell(std::to_string(v)); }
Csv& Csv::cell(std::uint64_t v) { return cell(std::to_string(v)); }
Csv& Csv::cell(bool v) { return cell(std::string(v ? "true" : "false")); }

void Csv::end_row() {
  if (pending_ != width_) {
    throw UsageError("csv row has " + std::to_string(pending_) + " cells, header has " + std::to_string(width_));
  }
  text_ += line_ + '\n';
  line_.clear();
  pending_ = 0;
  ++rows_;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  out.close();
  if (!out) throw IoError("failed writing " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ordered_json number(double v) { return std::isfinite(v) ? ordered_json(v) : ordered_json(nullptr); }

// --- clt ---

ordered_json to_json(const nanoformer::AssumptionReport& r) {
  ordered_json per = ordered_json::array();
  for (double l : r.ffn_lipschitz_per_layer) per.push_back(number(l));
  return ordered_json{{"max_query_norm", number(r.max_query_norm)},
                      {"max_key_norm", number(r.max_key_norm)},
                      {"max_value_norm", number(r.max_value_norm)},
                      {"max_abs_logit", number(r.max_abs_logit)},
                      {"logit_bound", number(r.logit_bound)},
                      {"bounds_enforced", r.bounds_enforced},
                      {"bounds_hold", r.bounds_hold},
                      {"ffn_lipschitz", number(r.ffn_lipschitz)},
                      {"ffn_lipschitz_per_layer", per},
                      {"softmax_sensitivity", number(r.softmax_sensitivity)},
                      {"points", r.points}};
}

ordered_json to_json(const cltlab::CltReport& r) {
  ordered_json j;
  j["logit_scale"] = r.logit_scale;
  j["uniform_attention"] = r.uniform_attention;

  ordered_json points = ordered_json::array();
  for (const auto& p : r.noise.points) {
    points.push_back({{"layer", p.layer},
                      {"n", p.n},
                      {"variance", number(p.variance)},
                      {"ci", interval(p.ci)},
                      {"reject_frac", number(p.reject_frac)},
                      {"projections_tested", p.projections_tested},
                      {"projections_skipped", p.projections_skipped}});
  }
  j["points"] = points;

  ordered_json fits = ordered_json::array();
  for (const auto& f : r.noise.fits) {
    ordered_json e{{"layer", f.layer}, {"monotone", f.monotone}, {"note", f.note}};
    if (f.fit) {
      e["exponent"] = number(f.fit->exponent);
      e["log_intercept"] = number(f.fit->log_intercept);
      e["r_squared"] = number(f.fit->r_squared);
      e["slope_stderr"] = number(f.fit->slope_stderr);
      e["exponent_ci"] = interval(f.exponent_ci);
    } else {
      e["exponent"] = nullptr;
    }
    fits.push_back(e);
  }
  j["fits"] = fits;

  ordered_json conc = ordered_json::array();
  bool any_violation = false;
  for (const auto& t : r.concentration) {
    any_violation = any_violation || t.any_violation;
    ordered_json rows = ordered_json::array();
    for (const auto& row : t.rows) {
      rows.push_back({{"epsilon", number(row.epsilon)},
                      {"empirical", number(row.empirical)},
                      {"std_error", number(row.std_error)},
                      {"bound", number(row.bound)},
                      {"violated", row.violated}});
    }
    conc.push_back({{"n", t.n},
                    {"block_size", number(t.block_size)},
                    {"m_prime", number(t.m_prime)},
                    {"kappa", number(t.kappa)},
                    {"any_violation", t.any_violation},
                    {"rows", rows}});
  }
  j["concentration"] = {{"tables", conc}, {"any_violation", any_violation}, {"note", r.concentration_note}};

  ordered_json blocks = ordered_json::array();
  for (const auto& b : r.blocks) {
    blocks.push_back({{"n", b.n},
                      {"width", b.width},
                      {"blocks", b.blocks},
                      {"max_reconstruction_error", number(b.max_reconstruction_error)},
                      {"reconstruction_pass_frac", number(b.reconstruction_pass_frac)},
                      {"mean_abs_cross_corr", number(b.mean_abs_cross_corr)},
                      {"ks_statistic", number(b.normalized_total.statistic)},
                      {"ks_p_value", number(b.normalized_total.p_value)}});
  }
  j["blocks"] = {{"rows", blocks}, {"note", r.block_note}};

  ordered_json lip = ordered_json::array();
  for (double l : r.lipschitz) lip.push_back(number(l));
  ordered_json ffn = ordered_json::array();
  for (const auto& f : r.ffn) {
    ffn.push_back({{"layer", f.layer},
                   {"n", f.n},
                   {"pre_variance", number(f.pre_variance)},
                   {"post_variance", number(f.post_variance)},
                   {"ratio", number(f.ratio)},
                   {"bound", number(f.bound)},
                   {"std_error", number(f.std_error)},
                   {"holds", f.holds}});
  }
  j["ffn"] = {{"lipschitz", lip}, {"points", ffn}, {"all_hold", r.ffn_all_hold}};
  j["assumptions"] = to_json(r.assumptions);
  j["footnote"] =
      "The measured 1/n law is for representations averaged over growing contexts with bounded attention "
      "logits. Individual attention weights shrink like 1/n, so the block-sum view is the tested statement; "
      "a Lindeberg-style condition on single weights is not checked.";
  return j;
}

std::string clt_variance_csv(const cltlab::CltReport& r) {
  Csv csv({"layer", "n", "variance", "ci_lo", "ci_hi", "reject_frac"});
  for (const auto& p : r.noise.points) {
    csv.cell(p.layer).cell(p.n).cell(p.variance).cell(p.ci.lo).cell(p.ci.hi).cell(p.reject_frac).end_row();
  }
  return csv.str();
}

std::string clt_concentration_csv(const cltlab::CltReport& r) {
  Csv csv({"n", "epsilon", "empirical", "std_error", "bound", "violated"});
  for (const auto& t : r.concentration) {
    for (const auto& row : t.rows) {
      csv.cell(t.n).cell(row.epsilon).cell(row.empirical).cell(row.std_error).cell(row.bound).cell(row.violated);
      csv.end_row();
    }
  }
  return csv.str();
}

std::string clt_blocks_csv(const cltlab::CltReport& r) {
  Csv csv({"n", "width", "blocks", "max_reconstruction_error", "reconstruction_pass_frac", "mean_abs_cross_corr",
           "ks_statistic", "ks_p_value"});
  for (const auto& b : r.blocks) {
    csv.cell(b.n).cell(b.width).cell(b.blocks).cell(b.max_reconstruction_error).cell(b.reconstruction_pass_frac);
    csv.cell(b.mean_abs_cross_corr).cell(b.normalized_total.statistic).cell(b.normalized_total.p_value).end_row();
  }
  return csv.str();
}

std::string clt_ffn_csv(const cltlab::CltReport& r) {
  Csv csv({"layer", "n", "pre_variance", "post_variance", "ratio", "bound", "std_error", "holds"});
  for (const auto& f : r.ffn) {
    csv.cell(f.layer).cell(f.n).cell(f.pre_variance).cell(f.post_variance).cell(f.ratio).cell(f.bound);
    csv.cell(f.std_error).cell(f.holds).end_row();
  }
  return csv.str();
}

std::vector<std::string> write_clt(const cltlab::CltReport& r, const std::filesystem::path& dir) {
  return write_all(dir, {{"clt_variance.csv", clt_variance_csv(r)},
                         {"clt_concentration.csv", clt_concentration_csv(r)},
                         {"clt_blocks.csv", clt_blocks_csv(r)},
                         {"clt_ffn.csv", clt_ffn_csv(r)},
                         {"clt_report.json", dump(to_json(r))}});
}

// --- bias / variance ---

ordered_json to_json(const biasvar::BiasVarianceReport& r, const biasvar::MonotonicityReport& m,
                     const biasvar::OrthogonalityReport& o) {
  ordered_json j;
  j["epsilon"] = number(r.epsilon);
  j["reference_size"] = r.reference_size;
  j["eval_tokens"] = r.eval_tokens;
  j["total_runs"] = r.total_runs;
  j["failed_runs"] = r.failed_runs;
  j["max_abs_residual"] = number(r.max_abs_residual);
  j["min_excess_loss"] = number(r.min_excess_loss);
  ordered_json caps = ordered_json::array();
  for (const auto& c : r.capacities) {
    caps.push_back({{"parameter_count", c.parameter_count},
                    {"approx_loss", number(c.approx_loss)},
                    {"reference_seed_sd", number(c.reference_seed_sd)},
                    {"bias", number(c.bias)}});
  }
  j["capacities"] = caps;
  ordered_json cells = ordered_json::array();
  for (const auto& c : r.cells) {
    cells.push_back({{"parameter_count", r.capacities.at(c.capacity_index).parameter_count},
                     {"data_size", c.data_size},
                     {"mean_loss", number(c.mean_loss)},
                     {"seed_sd", number(c.seed_sd)},
                     {"bias", number(c.bias)},
                     {"variance", number(c.variance)},
                     {"negative_variance", c.negative_variance},
                     {"residual", number(c.residual)},
                     {"failed_runs", c.failed_runs},
                     {"usable", c.usable}});
  }
  j["cells"] = cells;
  auto trend = [](const biasvar::Trend& t) {
    return ordered_json{{"subject", t.subject},
                        {"spearman", number(t.spearman)},
                        {"direction", biasvar::to_string(t.direction)},
                        {"pass", t.pass}};
  };
  ordered_json vd = ordered_json::array();
  for (const auto& t : m.variance_vs_data) vd.push_back(trend(t));
  j["trends"] = {{"variance_vs_data", vd}, {"bias_vs_capacity", trend(m.bias_vs_capacity)}};
  j["orthogonality"] = {{"cells", o.cells},
                        {"correlation", number(o.correlation)},
                        {"ci", interval(o.ci)},
                        {"explained", number(o.explained)},
                        {"flagged", o.flagged},
                        {"note", o.note}};
  return j;
}

std::string biasvar_runs_csv(const biasvar::BiasVarianceReport& r) {
  Csv csv({"P", "D", "seed", "loss", "B", "V", "epsilon", "residual", "failed"});
  for (const auto& cap : r.capacities) {
    for (const auto& run : cap.reference_runs) {
      csv.cell(cap.parameter_count).cell(r.reference_size).cell(run.seed).cell(run.loss).cell(run.bias);
      csv.cell(run.variance).cell(r.epsilon).cell(run.residual).cell(run.failed).end_row();
    }
  }
  for (const auto& c : r.cells) {
    const auto p = r.capacities.at(c.capacity_index).parameter_count;
    for (const auto& run : c.runs) {
      csv.cell(p).cell(c.data_size).cell(run.seed).cell(run.loss).cell(run.bias).cell(run.variance);
      csv.cell(r.epsilon).cell(run.residual).cell(run.failed).end_row();
    }
  }
  return csv.str();
}

std::string biasvar_cells_csv(const biasvar::BiasVarianceReport& r) {
  Csv csv({"P", "D", "mean_loss", "seed_sd", "B", "V", "negative_V", "residual", "failed_runs", "usable"});
  for (const auto& c : r.cells) {
    csv.cell(r.capacities.at(c.capacity_index).parameter_count).cell(c.data_size).cell(c.mean_loss);
    csv.cell(c.seed_sd).cell(c.bias).cell(c.variance).cell(c.negative_variance).cell(c.residual);
    csv.cell(c.failed_runs).cell(c.usable).end_row();
  }
  return csv.str();
}

std::vector<std::string> write_biasvar(const biasvar::BiasVarianceReport& r, const std::filesystem::path& dir) {
  const auto m = biasvar::monotonicity_diagnostics(r);
  const auto o = biasvar::orthogonality_diagnostics(r);
  return write_all(dir, {{"biasvar.csv", biasvar_runs_csv(r)},
                         {"biasvar_cells.csv", biasvar_cells_csv(r)},
                         {"biasvar_report.json", dump(to_json(r, m, o))}});
}

// --- emergence ---

ordered_json to_json(const emergence::EmergenceCurve& c) {
  ordered_json j;
  j["chance"] = number(c.chance);
  j["criterion"] = number(c.criterion);
  ordered_json cells = ordered_json::array();
  for (const auto& cell : c.cells) {
    cells.push_back({{"parameter_count", cell.parameter_count},
                     {"data_size", cell.data_size},
                     {"seed", cell.seed},
                     {"failed", cell.failed},
                     {"failure", cell.failure},
                     {"steps", cell.steps},
                     {"final_loss", number(cell.final_loss)},
                     {"snr", number(cell.snr.snr)},
                     {"snr_ci", interval(cell.snr.ci)},
                     {"signal_power", number(cell.snr.signal_power)},
                     {"noise_power", number(cell.snr.noise_power)},
                     {"accuracy", number(cell.accuracy.accuracy)},
                     {"accuracy_ci", interval(cell.accuracy.ci)},
                     {"dominance_fraction", cell.dominance.available ? number(cell.dominance.fraction) : nullptr}});
  }
  j["cells"] = cells;
  const auto& s = c.sigmoid;
  j["sigmoid"] = {{"converged", s.converged},
                  {"lower", number(s.lower)},
                  {"upper", number(s.upper)},
                  {"midpoint", number(s.midpoint)},
                  {"slope", number(s.slope)},
                  {"r_squared", number(s.r_squared)}};
  const auto& t = c.threshold;
  j["threshold"] = {{"detected", t.detected},
                    {"theta", t.detected ? number(t.theta) : nullptr},
                    {"ln_theta", t.detected ? number(t.ln_theta) : nullptr},
                    {"criterion_accuracy", number(t.criterion_accuracy)},
                    {"reason", t.reason}};
  j["spearman"] = number(c.spearman);
  if (c.scaling) {
    const auto& f = *c.scaling;
    ordered_json offsets = ordered_json::array();
    for (std::size_t i = 0; i < f.offsets.size(); ++i) {
      offsets.push_back({{"parameter_count", f.capacities[i]}, {"offset", number(f.offsets[i])}});
    }
    j["scaling"] = {{"alpha", number(f.alpha)},
                    {"alpha_stderr", number(f.alpha_stderr)},
                    {"offsets", offsets},
                    {"offsets_nondecreasing", f.offsets_nondecreasing},
                    {"sigma2", number(f.sigma2)},
                    {"residual_variance", number(f.residual_variance)},
                    {"count", f.count}};
  } else {
    j["scaling"] = nullptr;
  }
  j["scaling_note"] = c.scaling_note;
  j["dominance_accuracy_corr"] = number(c.dominance_accuracy_corr);
  return j;
}

std::string emergence_csv(const emergence::EmergenceCurve& c) {
  Csv csv({"P", "D", "seed", "snr", "snr_ci_lo", "snr_ci_hi", "accuracy", "acc_ci_lo", "acc_ci_hi", "failed"});
  for (const auto& cell : c.cells) {
    csv.cell(cell.parameter_count).cell(cell.data_size).cell(cell.seed).cell(cell.snr.snr);
    csv.cell(cell.snr.ci.lo).cell(cell.snr.ci.hi).cell(cell.accuracy.accuracy).cell(cell.accuracy.ci.lo);
    csv.cell(cell.accuracy.ci.hi).cell(cell.failed).end_row();
  }
  return csv.str();
}

std::vector<std::string> write_emergence(const emergence::EmergenceCurve& c, const std::filesystem::path& dir) {
  return write_all(dir, {{"emergence.csv", emergence_csv(c)}, {"emergence_report.json", dump(to_json(c))}});
}

// --- assumptions ---

std::string assumptions_csv(const nanoformer::AssumptionReport& r) {
  Csv csv({"quantity", "value"});
  csv.cell(std::string("max_query_norm")).cell(r.max_query_norm).end_row();
  csv.cell(std::string("max_key_norm")).cell(r.max_key_norm).end_row();
  csv.cell(std::string("max_value_norm")).cell(r.max_value_norm).end_row();
  csv.cell(std::string("max_abs_logit")).cell(r.max_abs_logit).end_row();
  csv.cell(std::string("logit_bound")).cell(r.logit_bound).end_row();
  for (std::size_t l = 0; l < r.ffn_lipschitz_per_layer.size(); ++l) {
    csv.cell("ffn_lipschitz_layer" + std::to_string(l)).cell(r.ffn_lipschitz_per_layer[l]).end_row();
  }
  csv.cell(std::string("softmax_sensitivity")).cell(r.softmax_sensitivity).end_row();
  return csv.str();
}

std::vector<std::string> write_assumptions(const nanoformer::AssumptionReport& r, const std::filesystem::path& dir) {
  return write_all(dir, {{"assumptions.csv", assumptions_csv(r)}, {"assumptions.json", dump(to_json(r))}});
}

}  // namespace scaling_lab::report
