#include "scaling_lab/svg.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <optional>

#include "scaling_lab/errors.hpp"
#include "scaling_lab/report.hpp"

namespace scaling_lab::svg {

namespace {

constexpr double kWidth = 640, kHeight = 420;
constexpr double kLeft = 70, kRight = 20, kTop = 40, kBottom = 50;

std::string fixed(double v, int digits = 2) {
  if (std::abs(v) < 0.5 * std::pow(10.0, -digits)) v = 0.0;
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed, digits);
  return ec == std::errc{} ? std::string(buf, end) : "0";
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else if (c == '"') out += "&quot;";
    else out += c;
  }
  return out;
}

std::optional<double> num(const ordered_json& j) {
  if (!j.is_number()) return std::nullopt;
  const double v = j.get<double>();
  return std::isfinite(v) ? std::optional<double>(v) : std::nullopt;
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
const char* colour(std::size_t i) { return kPalette[i % 6]; }

// Collects marks in data coordinates; the range is fixed at render time.
class Plot {
 public:
  Plot(std::string title, std::string xlabel, std::string ylabel)
      : title_(std::move(title)), xlabel_(std::move(xlabel)), ylabel_(std::move(ylabel)) {}

  void point(double x, double y, std::size_t series, const std::string& label = "") {
    marks_.push_back({Kind::point, {x}, {y}, "point", series, label});
    extend(x, y);
  }
  void line(double x1, double y1, double x2, double y2, const std::string& cls, std::size_t series = 0) {
    marks_.push_back({Kind::line, {x1, x2}, {y1, y2}, cls, series, ""});
  }
  void polyline(std::vector<double> xs, std::vector<double> ys, const std::string& cls, std::size_t series = 0) {
    for (std::size_t i = 0; i < xs.size(); ++i) extend(xs[i], ys[i]);
    marks_.push_back({Kind::polyline, std::move(xs), std::move(ys), cls, series, ""});
  }
  void vline(double x, const std::string& cls) {
    extend_x(x);
    marks_.push_back({Kind::vline, {x}, {}, cls, 0, ""});
  }
  void hline(double y, const std::string& cls) {
    extend_y(y);
    marks_.push_back({Kind::hline, {}, {y}, cls, 0, ""});
  }
  void legend(std::size_t series, std::string label) { legend_[series] = std::move(label); }
  void caption(std::string text) { caption_ = std::move(text); }
  bool empty() const { return !have_x_; }
  double xmin() const { return x0_; }
  double xmax() const { return x1_; }

  std::string render() const {
    double x0 = x0_, x1 = x1_, y0 = y0_, y1 = y1_;
    if (!have_x_) x0 = 0, x1 = 1;
    if (!have_y_) y0 = 0, y1 = 1;
    if (x1 - x0 < 1e-12) x0 -= 0.5, x1 += 0.5;
    if (y1 - y0 < 1e-12) y0 -= 0.5, y1 += 0.5;
    const double px = 0.05 * (x1 - x0), py = 0.05 * (y1 - y0);
    x0 -= px, x1 += px, y0 -= py, y1 += py;
    const double w = kWidth - kLeft - kRight, h = kHeight - kTop - kBottom;
    auto sx = [&](double x) { return kLeft + (x - x0) / (x1 - x0) * w; };
    auto sy = [&](double y) { return kTop + (y1 - y) / (y1 - y0) * h; };
    auto clampy = [&](double y) { return std::clamp(y, y0, y1); };

    std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fixed(kWidth, 0) + "\" height=\"" +
                    fixed(kHeight, 0) + "\" viewBox=\"0 0 " + fixed(kWidth, 0) + " " + fixed(kHeight, 0) + "\">\n";
    s += "<style>.axis{stroke:#000;fill:none}.fit{stroke:#444;stroke-width:1.5}"
         ".guide{stroke:#999;stroke-dasharray:5,4}.threshold{stroke:#c00;stroke-dasharray:3,3}"
         ".curve{fill:none;stroke-width:1.5}text{font:12px sans-serif}</style>\n";
    s += "<rect width=\"100%\" height=\"100%\" fill=\"#fff\"/>\n";
    s += "<text class=\"title\" x=\"" + fixed(kWidth / 2) + "\" y=\"22\" text-anchor=\"middle\">" + escape(title_) +
         "</text>\n";
    s += "<path class=\"axis\" d=\"M" + fixed(kLeft) + "," + fixed(kTop) + " L" + fixed(kLeft) + "," +
         fixed(kTop + h) + " L" + fixed(kLeft + w) + "," + fixed(kTop + h) + "\"/>\n";
    for (int i = 0; i <= 4; ++i) {
      const double xv = x0 + (x1 - x0) * i / 4.0, yv = y0 + (y1 - y0) * i / 4.0;
      s += "<text class=\"tick\" x=\"" + fixed(sx(xv)) + "\" y=\"" + fixed(kTop + h + 16) +
           "\" text-anchor=\"middle\">" + fixed(xv) + "</text>\n";
      s += "<text class=\"tick\" x=\"" + fixed(kLeft - 6) + "\" y=\"" + fixed(sy(yv) + 4) +
           "\" text-anchor=\"end\">" + fixed(yv) + "</text>\n";
    }
    s += "<text class=\"label\" x=\"" + fixed(kLeft + w / 2) + "\" y=\"" + fixed(kHeight - 10) +
         "\" text-anchor=\"middle\">" + escape(xlabel_) + "</text>\n";
    s += "<text class=\"label\" transform=\"translate(16," + fixed(kTop + h / 2) +
         ") rotate(-90)\" text-anchor=\"middle\">" + escape(ylabel_) + "</text>\n";

    for (const auto& m : marks_) {
      switch (m.kind) {
        case Kind::point:
          s += "<circle class=\"point\" cx=\"" + fixed(sx(m.xs[0])) + "\" cy=\"" + fixed(sy(m.ys[0])) +
               "\" r=\"3\" fill=\"" + colour(m.series) + "\"/>\n";
          break;
        case Kind::line: {
          // Clip to the y range by walking the segment.
          double ax = m.xs[0], ay = m.ys[0], bx = m.xs[1], by = m.ys[1];
          auto clip = [&](double& px_, double& py_, double qx, double qy) {
            if (py_ > y1 || py_ < y0) {
              const double target = py_ > y1 ? y1 : y0;
              if (std::abs(qy - py_) > 1e-15) px_ = px_ + (target - py_) / (qy - py_) * (qx - px_);
              py_ = target;
            }
          };
          clip(ax, ay, bx, by);
          clip(bx, by, ax, ay);
          s += "<line class=\"" + m.cls + "\" x1=\"" + fixed(sx(ax)) + "\" y1=\"" + fixed(sy(clampy(ay))) +
               "\" x2=\"" + fixed(sx(bx)) + "\" y2=\"" + fixed(sy(clampy(by))) + "\"";
          if (m.cls != "guide") s += std::string(" stroke=\"") + colour(m.series) + "\"";
          s += "/>\n";
          break;
        }
        case Kind::polyline: {
          s += "<polyline class=\"" + m.cls + "\" stroke=\"" + colour(m.series) + "\" points=\"";
          for (std::size_t i = 0; i < m.xs.size(); ++i) {
            if (i) s += ' ';
            s += fixed(sx(m.xs[i])) + "," + fixed(sy(m.ys[i]));
          }
          s += "\"/>\n";
          break;
        }
        case Kind::vline:
          s += "<line class=\"" + m.cls + "\" x1=\"" + fixed(sx(m.xs[0])) + "\" y1=\"" + fixed(kTop) + "\" x2=\"" +
               fixed(sx(m.xs[0])) + "\" y2=\"" + fixed(kTop + h) + "\"/>\n";
          break;
        case Kind::hline:
          s += "<line class=\"" + m.cls + "\" x1=\"" + fixed(kLeft) + "\" y1=\"" + fixed(sy(m.ys[0])) + "\" x2=\"" +
               fixed(kLeft + w) + "\" y2=\"" + fixed(sy(m.ys[0])) + "\"/>\n";
          break;
      }
    }
    double ly = kTop + 8;
    for (const auto& [series, label] : legend_) {
      s += "<circle class=\"legend\" cx=\"" + fixed(kLeft + w - 120) + "\" cy=\"" + fixed(ly - 4) +
           "\" r=\"4\" fill=\"" + colour(series) + "\"/>\n";
      s += "<text class=\"legend\" x=\"" + fixed(kLeft + w - 110) + "\" y=\"" + fixed(ly) + "\">" + escape(label) +
           "</text>\n";
      ly += 16;
    }
    if (!caption_.empty()) {
      s += "<text class=\"caption\" x=\"" + fixed(kLeft + 8) + "\" y=\"" + fixed(kTop + 14) + "\">" +
           escape(caption_) + "</text>\n";
    }
    s += "</svg>\n";
    return s;
  }

 private:
  enum class Kind { point, line, polyline, vline, hline };
  struct Mark {
    Kind kind;
    std::vector<double> xs, ys;
    std::string cls;
    std::size_t series;
    std::string label;
  };

  void extend_x(double x) {
    if (!have_x_) x0_ = x1_ = x, have_x_ = true;
    x0_ = std::min(x0_, x), x1_ = std::max(x1_, x);
  }
  void extend_y(double y) {
    if (!have_y_) y0_ = y1_ = y, have_y_ = true;
    y0_ = std::min(y0_, y), y1_ = std::max(y1_, y);
  }
  void extend(double x, double y) {
    extend_x(x);
    extend_y(y);
  }

  std::string title_, xlabel_, ylabel_, caption_;
  std::vector<Mark> marks_;
  std::map<std::size_t, std::string> legend_;
  double x0_ = 0, x1_ = 1, y0_ = 0, y1_ = 1;
  bool have_x_ = false, have_y_ = false;
};

ordered_json load(const std::filesystem::path& path) {
  try {
    return ordered_json::parse(report::read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed report " + path.string() + ": " + e.what());
  }
}

}  // namespace

std::string clt_variance_plot(const ordered_json& rep) {
  Plot plot("Representation noise", "log10 n", "log10 Var");
  std::map<int, std::vector<std::pair<double, double>>> by_layer;
  for (const auto& p : rep.at("points")) {
    const auto v = num(p.at("variance"));
    if (!v || *v <= 0.0) continue;
    const int layer = p.at("layer").get<int>();
    const double x = std::log10(p.at("n").get<double>()), y = std::log10(*v);
    plot.point(x, y, static_cast<std::size_t>(layer));
    by_layer[layer].push_back({x, y});
  }
  for (const auto& f : rep.at("fits")) {
    const int layer = f.at("layer").get<int>();
    plot.legend(static_cast<std::size_t>(layer), "layer " + std::to_string(layer));
    const auto e = num(f.at("exponent"));
    const auto& pts = by_layer[layer];
    if (!e || pts.empty()) continue;
    const double c = f.at("log_intercept").get<double>();
    const double xa = pts.front().first, xb = pts.back().first;
    const double l10 = std::log(10.0);
    plot.line(xa, (c + *e * xa * l10) / l10, xb, (c + *e * xb * l10) / l10, "fit", static_cast<std::size_t>(layer));
  }
  if (!by_layer.empty()) {
    // Slope -1 through the centroid of the first layer.
    const auto& pts = by_layer.begin()->second;
    double mx = 0, my = 0;
    for (const auto& [x, y] : pts) mx += x, my += y;
    mx /= static_cast<double>(pts.size());
    my /= static_cast<double>(pts.size());
    const double xa = pts.front().first, xb = pts.back().first;
    plot.line(xa, my - (xa - mx), xb, my - (xb - mx), "guide");
  } else {
    plot.caption("no positive variances to plot");
  }
  return plot.render();
}

std::string emergence_accuracy_plot(const ordered_json& rep) {
  Plot plot("Capability against SNR", "ln SNR", "accuracy");
  std::map<std::uint64_t, std::size_t> series;
  for (const auto& c : rep.at("cells")) {
    const auto snr = num(c.at("snr"));
    const auto acc = num(c.at("accuracy"));
    if (c.at("failed").get<bool>() || !snr || *snr <= 0.0 || !acc) continue;
    const auto p = c.at("parameter_count").get<std::uint64_t>();
    const auto s = series.emplace(p, series.size()).first->second;
    plot.point(std::log(*snr), *acc, s);
  }
  for (const auto& [p, s] : series) plot.legend(s, "P = " + std::to_string(p));
  if (const auto chance = num(rep.at("chance"))) plot.hline(*chance, "guide");
  const auto& sig = rep.at("sigmoid");
  if (!plot.empty() && sig.at("converged").get<bool>()) {
    const double lo = sig.at("lower").get<double>(), hi = sig.at("upper").get<double>();
    const double mid = sig.at("midpoint").get<double>(), k = sig.at("slope").get<double>();
    std::vector<double> xs, ys;
    const double a = plot.xmin(), b = plot.xmax();
    for (int i = 0; i <= 60; ++i) {
      const double x = a + (b - a) * i / 60.0;
      xs.push_back(x);
      ys.push_back(lo + (hi - lo) / (1.0 + std::exp(-k * (x - mid))));
    }
    plot.polyline(xs, ys, "curve sigmoid", 5);
  }
  const auto& t = rep.at("threshold");
  if (t.at("detected").get<bool>()) {
    plot.vline(t.at("ln_theta").get<double>(), "threshold");
  } else {
    plot.caption("no threshold: " + t.at("reason").get<std::string>());
  }
  return plot.render();
}

std::string emergence_scaling_plot(const ordered_json& rep) {
  Plot plot("SNR against data", "ln D", "ln SNR");
  std::map<std::uint64_t, std::size_t> series;
  std::map<std::uint64_t, std::pair<double, double>> xrange;
  for (const auto& c : rep.at("cells")) {
    const auto snr = num(c.at("snr"));
    if (c.at("failed").get<bool>() || !snr || *snr <= 0.0) continue;
    const auto p = c.at("parameter_count").get<std::uint64_t>();
    const auto s = series.emplace(p, series.size()).first->second;
    const double x = std::log(c.at("data_size").get<double>());
    plot.point(x, std::log(*snr), s);
    auto [it, fresh] = xrange.emplace(p, std::make_pair(x, x));
    if (!fresh) it->second = {std::min(it->second.first, x), std::max(it->second.second, x)};
  }
  for (const auto& [p, s] : series) plot.legend(s, "P = " + std::to_string(p));
  const auto& f = rep.at("scaling");
  if (f.is_object()) {
    const double alpha = f.at("alpha").get<double>();
    for (const auto& o : f.at("offsets")) {
      const auto p = o.at("parameter_count").get<std::uint64_t>();
      if (!series.count(p)) continue;
      const double c = o.at("offset").get<double>();
      const auto [a, b] = xrange[p];
      plot.line(a, c + alpha * a, b, c + alpha * b, "fit", series[p]);
    }
  } else {
    plot.caption("no scaling fit: " + rep.value("scaling_note", std::string("not available")));
  }
  return plot.render();
}

std::string biasvar_variance_plot(const ordered_json& rep) {
  Plot plot("Variance term against data", "log10 D", "V");
  std::map<std::uint64_t, std::size_t> series;
  std::map<std::uint64_t, std::pair<std::vector<double>, std::vector<double>>> curves;
  for (const auto& c : rep.at("cells")) {
    const auto v = num(c.at("variance"));
    if (!c.at("usable").get<bool>() || !v) continue;
    const auto p = c.at("parameter_count").get<std::uint64_t>();
    const auto s = series.emplace(p, series.size()).first->second;
    const double x = std::log10(c.at("data_size").get<double>());
    plot.point(x, *v, s);
    curves[p].first.push_back(x);
    curves[p].second.push_back(*v);
  }
  for (auto& [p, xy] : curves) plot.polyline(xy.first, xy.second, "curve", series[p]);
  for (const auto& [p, s] : series) plot.legend(s, "P = " + std::to_string(p));
  plot.hline(0.0, "guide");
  return plot.render();
}

std::string biasvar_bias_plot(const ordered_json& rep) {
  Plot plot("Bias term against capacity", "log10 P", "B");
  std::vector<double> xs, ys;
  for (const auto& c : rep.at("capacities")) {
    const auto b = num(c.at("bias"));
    if (!b) continue;
    const double x = std::log10(c.at("parameter_count").get<double>());
    plot.point(x, *b, 0);
    xs.push_back(x);
    ys.push_back(*b);
  }
  if (xs.size() >= 2) plot.polyline(xs, ys, "curve", 0);
  plot.hline(0.0, "guide");
  return plot.render();
}

std::vector<std::string> render_run(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("not a run directory: " + dir.string());
  std::vector<std::pair<std::string, std::string>> out;
  if (std::filesystem::exists(dir / "clt_report.json")) {
    out.emplace_back("clt_variance.svg", clt_variance_plot(load(dir / "clt_report.json")));
  }
  if (std::filesystem::exists(dir / "emergence_report.json")) {
    const auto rep = load(dir / "emergence_report.json");
    out.emplace_back("emergence_accuracy.svg", emergence_accuracy_plot(rep));
    out.emplace_back("emergence_scaling.svg", emergence_scaling_plot(rep));
  }
  if (std::filesystem::exists(dir / "biasvar_report.json")) {
    const auto rep = load(dir / "biasvar_report.json");
    out.emplace_back("biasvar_variance.svg", biasvar_variance_plot(rep));
    out.emplace_back("biasvar_bias.svg", biasvar_bias_plot(rep));
  }
  if (out.empty()) throw IoError("no plottable report in " + dir.string());
  std::vector<std::string> names;
  for (const auto& [name, text] : out) {
    report::write_text(dir / name, text);
    names.push_back(name);
  }
  return names;
}

}  // namespace scaling_lab::svg
