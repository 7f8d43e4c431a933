#include "harness/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "common/error.hpp"

namespace nlimb::harness {

namespace {

constexpr double kW = 720, kH = 440;
constexpr double kLeft = 80, kRight = 170, kTop = 40, kBottom = 60;
const char* const kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick_label(double v) {
  char buf[32];
  const double a = std::fabs(v);
  if (a >= 1e6) std::snprintf(buf, sizeof buf, "%.3gM", v / 1e6);
  else if (a >= 1e3) std::snprintf(buf, sizeof buf, "%.3gk", v / 1e3);
  else std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

// Round step for about n ticks over [lo, hi].
double nice_step(double lo, double hi, int n) {
  const double raw = (hi - lo) / n;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  for (double m : {1.0, 2.0, 5.0, 10.0}) {
    if (raw <= m * mag) return m * mag;
  }
  return 10 * mag;
}

}  // namespace

std::string line_chart_svg(const ChartSpec& spec, const std::vector<Series>& series) {
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size() || (!s.spread.empty() && s.spread.size() != s.y.size())) {
      throw InvalidArgument("plot: series '" + s.label + "' has mismatched lengths");
    }
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      const double e = s.spread.empty() || !std::isfinite(s.spread[i]) ? 0.0 : s.spread[i];
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i] - e);
      y1 = std::max(y1, s.y[i] + e);
    }
  }
  if (!std::isfinite(x0)) throw InvalidArgument("plot: nothing to draw");
  if (std::isfinite(spec.y_reference)) {
    y0 = std::min(y0, spec.y_reference);
    y1 = std::max(y1, spec.y_reference);
  }
  if (x1 <= x0) {
    const double w = std::max(1.0, 0.1 * std::fabs(x0));
    x0 -= w;
    x1 += w;
  }
  if (y1 <= y0) {
    y0 -= 0.5;
    y1 += 0.5;
  }
  const double pad = 0.05 * (y1 - y0);
  y0 -= pad;
  y1 += pad;

  const double pw = kW - kLeft - kRight, ph = kH - kTop - kBottom;
  auto px = [&](double x) { return kLeft + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return kTop + (1.0 - (y - y0) / (y1 - y0)) * ph; };

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\" viewBox=\"0 0 "
    << kW << " " << kH << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << kW / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(spec.title)
    << "</text>\n";

  // axes and grid
  const double xs = nice_step(x0, x1, 6), ys = nice_step(y0, y1, 6);
  for (double t = std::ceil(x0 / xs) * xs; t <= x1 + 1e-9 * xs; t += xs) {
    o << "<line x1=\"" << fmt(px(t)) << "\" y1=\"" << kTop << "\" x2=\"" << fmt(px(t)) << "\" y2=\"" << kTop + ph
      << "\" stroke=\"#e6e6e6\"/>\n";
    o << "<text x=\"" << fmt(px(t)) << "\" y=\"" << kTop + ph + 18 << "\" text-anchor=\"middle\">" << tick_label(t)
      << "</text>\n";
  }
  for (double t = std::ceil(y0 / ys) * ys; t <= y1 + 1e-9 * ys; t += ys) {
    o << "<line x1=\"" << kLeft << "\" y1=\"" << fmt(py(t)) << "\" x2=\"" << kLeft + pw << "\" y2=\"" << fmt(py(t))
      << "\" stroke=\"#e6e6e6\"/>\n";
    o << "<text x=\"" << kLeft - 6 << "\" y=\"" << fmt(py(t) + 4) << "\" text-anchor=\"end\">"
      << tick_label(std::fabs(t) < 1e-12 * ys ? 0.0 : t) << "</text>\n";
  }
  o << "<rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"#333\"/>\n";
  o << "<text x=\"" << kLeft + pw / 2 << "\" y=\"" << kH - 16 << "\" text-anchor=\"middle\">" << escape(spec.x_label)
    << "</text>\n";
  o << "<text transform=\"translate(18 " << kTop + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
    << escape(spec.y_label) << "</text>\n";
  if (std::isfinite(spec.y_reference)) {
    o << "<line x1=\"" << kLeft << "\" y1=\"" << fmt(py(spec.y_reference)) << "\" x2=\"" << kLeft + pw << "\" y2=\""
      << fmt(py(spec.y_reference)) << "\" stroke=\"#555\" stroke-dasharray=\"5 4\"/>\n";
  }

  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* color = kColors[k % std::size(kColors)];
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (std::isfinite(s.x[i]) && std::isfinite(s.y[i])) idx.push_back(i);
    }
    if (!s.spread.empty() && idx.size() > 1) {
      o << "<polygon fill=\"" << color << "\" fill-opacity=\"0.18\" stroke=\"none\" points=\"";
      for (std::size_t i : idx) {
        const double e = std::isfinite(s.spread[i]) ? s.spread[i] : 0.0;
        o << fmt(px(s.x[i])) << "," << fmt(py(s.y[i] + e)) << " ";
      }
      for (auto it = idx.rbegin(); it != idx.rend(); ++it) {
        const double e = std::isfinite(s.spread[*it]) ? s.spread[*it] : 0.0;
        o << fmt(px(s.x[*it])) << "," << fmt(py(s.y[*it] - e)) << " ";
      }
      o << "\"/>\n";
    }
    o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.8\" points=\"";
    for (std::size_t i : idx) o << fmt(px(s.x[i])) << "," << fmt(py(s.y[i])) << " ";
    o << "\"/>\n";
    if (idx.size() == 1) {
      o << "<circle cx=\"" << fmt(px(s.x[idx[0]])) << "\" cy=\"" << fmt(py(s.y[idx[0]])) << "\" r=\"3\" fill=\""
        << color << "\"/>\n";
    }
    const double ly = kTop + 14 + 18.0 * static_cast<double>(k);
    o << "<line x1=\"" << kLeft + pw + 12 << "\" y1=\"" << ly << "\" x2=\"" << kLeft + pw + 32 << "\" y2=\"" << ly
      << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    o << "<text x=\"" << kLeft + pw + 38 << "\" y=\"" << ly + 4 << "\">" << escape(s.label) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

std::string reward_svg(const std::vector<RunMetrics>& runs) {
  if (runs.empty()) throw InvalidArgument("plot: no runs given");
  std::vector<Series> series;
  for (const auto& r : runs) {
    if (r.records.empty()) throw InvalidArgument("plot: metrics log for '" + r.label + "' has no iterations");
    Series s{r.label, {}, {}, {}};
    // Baseline logs hold several back-to-back trainings; accumulate T across them.
    double offset = 0.0, last = 0.0;
    for (const auto& m : r.records) {
      if (static_cast<double>(m.T) < last) offset += last;
      last = static_cast<double>(m.T);
      s.x.push_back(offset + last);
      s.y.push_back(m.mean_return);
      s.spread.push_back(m.std_return);
    }
    series.push_back(std::move(s));
  }
  return line_chart_svg({"Reward of sampled designs", "environment steps", "episode return (mean, std)"}, series);
}

std::string generalization_svg(const std::vector<GeneralizationCurve>& curves) {
  if (curves.empty()) throw InvalidArgument("plot: no generalization data");
  std::vector<Series> series;
  for (const auto& c : curves) {
    if (c.T.empty()) throw InvalidArgument("plot: generalization data for '" + c.label + "' is empty");
    series.push_back({c.label, c.T, c.fraction, {}});
  }
  ChartSpec spec{"Universal vs specialist controllers", "environment steps (warmup)", "fraction of specialist return"};
  spec.y_reference = 1.0;
  return line_chart_svg(spec, series);
}

}  // namespace nlimb::harness
