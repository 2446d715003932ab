#pragma once

// Curves from a metrics stream: a raw CSV plus one SVG line chart per
// quantity.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "marl/metrics.hpp"

namespace marl {

struct Series {
  std::string name;
  std::vector<double> x, y;
};

inline std::string metrics_csv(const std::vector<MetricsRecord>& recs) {
  std::ostringstream os;
  os.precision(10);
  os << "iteration,reward_mean,reward_max,heldout_reward,kl,objective,grad_norm,grad_variance,clip_fraction,"
        "kappa_fraction,mask_fraction\n";
  const auto opt = [](const std::optional<double>& v) { return v ? std::to_string(*v) : std::string(); };
  for (const auto& r : recs) {
    os << r.iteration << ',' << r.reward_mean << ',' << r.reward_max << ',' << opt(r.heldout_reward) << ',' << r.kl
       << ',' << r.objective << ',' << r.grad_norm << ',' << opt(r.grad_variance) << ',' << r.clip_fraction << ','
       << r.kappa_fraction << ',' << r.mask_fraction << '\n';
  }
  return os.str();
}

inline Series extract_series(const std::vector<MetricsRecord>& recs, const std::string& name,
                             const std::function<std::optional<double>(const MetricsRecord&)>& get) {
  Series s{name, {}, {}};
  for (const auto& r : recs) {
    if (const auto v = get(r)) {
      s.x.push_back(static_cast<double>(r.iteration));
      s.y.push_back(*v);
    }
  }
  return s;
}

/// Minimal line chart with axis labels at the extremes.
inline std::string svg_line_chart(const std::string& title, const std::vector<Series>& series) {
  constexpr double W = 640, H = 360, L = 70, R = 20, T = 40, B = 40;
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  if (!(x0 <= x1)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y0 -= 0.5, y1 += 0.5;
  const auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  const auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd"};
  std::ostringstream os;
  char buf[64];
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">"
     << title << "</text>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  const auto label = [&](double x, double y, const char* anchor, double v) {
    std::snprintf(buf, sizeof buf, "%.4g", v);
    os << "<text x=\"" << x << "\" y=\"" << y << "\" text-anchor=\"" << anchor
       << "\" font-family=\"sans-serif\" font-size=\"11\">" << buf << "</text>\n";
  };
  label(L - 6, H - B, "end", y0);
  label(L - 6, T + 4, "end", y1);
  label(L, H - B + 16, "middle", x0);
  label(W - R, H - B + 16, "middle", x1);
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* color = colors[k % 4];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.2f,%.2f ", px(s.x[i]), py(s.y[i]));
      os << buf;
    }
    os << "\"/>\n";
    os << "<text x=\"" << W - R - 4 << "\" y=\"" << T + 14 * (k + 1) << "\" text-anchor=\"end\" fill=\"" << color
       << "\" font-family=\"sans-serif\" font-size=\"12\">" << s.name << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

struct PlotResult {
  std::vector<std::filesystem::path> files;
  std::size_t records = 0;
  std::size_t skipped = 0;
};

/// Writes metrics.csv, reward.svg, kl.svg and grad_norm.svg into `out_dir`.
inline PlotResult plot_metrics(const std::filesystem::path& metrics, const std::filesystem::path& out_dir) {
  const auto mf = read_metrics(metrics);
  std::filesystem::create_directories(out_dir);
  PlotResult res;
  res.records = mf.records.size();
  res.skipped = mf.skipped;
  const auto& r = mf.records;
  const auto write = [&](const std::string& name, const std::string& text) {
    const auto p = out_dir / name;
    std::ofstream os(p);
    os << text;
    if (!os) throw IoError("cannot write '" + p.string() + "'");
    res.files.push_back(p);
  };
  write("metrics.csv", metrics_csv(r));
  write("reward.svg",
        svg_line_chart("reward", {extract_series(r, "group mean", [](const auto& m) { return std::optional(m.reward_mean); }),
                                  extract_series(r, "held-out", [](const auto& m) { return m.heldout_reward; })}));
  write("kl.svg", svg_line_chart("KL", {extract_series(r, "kl", [](const auto& m) { return std::optional(m.kl); })}));
  write("grad_norm.svg",
        svg_line_chart("gradient norm",
                       {extract_series(r, "grad norm", [](const auto& m) { return std::optional(m.grad_norm); })}));
  return res;
}

}  // namespace marl
