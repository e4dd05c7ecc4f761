#pragma once

// Report emission: per-row CSV, aggregated JSON, layerwise CSV, gradient-norm
// CSV, and static SVG plots. All floating-point output goes through fmt_g so
// reruns are byte-identical.

#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "iclgd/metrics.hpp"
#include "iclgd/optim.hpp"

namespace iclgd {

// Shortest round-trippable decimal rendering of a double.
inline std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct ReportRow {
  std::string metric;    // SimAOU | SimAOU_norm | SimAM | SimAM_delta | alpha
  std::string baseline;  // Trained | TrainedEmbeddings | NoTraining
  std::string method;    // GD | LCGD | GD+LCGD (alpha)
  std::string task;
  std::uint64_t seed = 0;
  std::string layer;  // numeric or "mean"
  std::string head;   // numeric or "mean"
  std::optional<double> value;  // empty when fully excluded
  std::size_t excluded_count = 0;
};

inline void write_rows_csv(const std::string& path,
                           const std::vector<ReportRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_rows_csv: cannot open " + path);
  out << "metric,baseline,method,task,seed,layer,head,value,excluded_count\n";
  for (const auto& r : rows) {
    out << r.metric << ',' << r.baseline << ',' << r.method << ',' << r.task
        << ',' << r.seed << ',' << r.layer << ',' << r.head << ','
        << (r.value ? fmt_g(*r.value) : "") << ',' << r.excluded_count << '\n';
  }
}

// Expand a SimilarityScore into rows: one per (layer, head) where heads
// apply, one per layer with head="mean", and one overall layer="mean" row.
inline void append_score_rows(std::vector<ReportRow>& rows,
                              const SimilarityScore& score,
                              const std::string& baseline,
                              const std::string& method,
                              const std::string& task, std::uint64_t seed) {
  ReportRow base;
  base.metric = score.metric;
  base.baseline = baseline;
  base.method = method;
  base.task = task;
  base.seed = seed;
  for (std::size_t l = 0; l < score.per_layer.size(); ++l) {
    if (!score.per_head.empty()) {
      for (std::size_t h = 0; h < score.per_head[l].size(); ++h) {
        ReportRow r = base;
        r.layer = std::to_string(l);
        r.head = std::to_string(h);
        r.value = score.per_head[l][h];
        r.excluded_count = score.per_head[l][h] ? 0 : 1;
        rows.push_back(r);
      }
    }
    ReportRow r = base;
    r.layer = std::to_string(l);
    r.head = "mean";
    r.value = score.per_layer[l];
    if (!score.per_head.empty()) {
      for (const auto& h : score.per_head[l])
        if (!h) ++r.excluded_count;
    } else if (!score.per_layer[l]) {
      r.excluded_count = 1;
    }
    rows.push_back(r);
  }
  ReportRow r = base;
  r.layer = "mean";
  r.head = "mean";
  r.value = score.all_excluded ? std::nullopt : std::optional<double>(score.mean);
  r.excluded_count = score.excluded_count;
  rows.push_back(r);
}

namespace detail {

struct Welford {
  double s = 0.0, s2 = 0.0;
  std::size_t n = 0;
  std::size_t excluded = 0;
  void add(const std::optional<double>& v) {
    if (!v) {
      ++excluded;
      return;
    }
    s += *v;
    s2 += *v * *v;
    ++n;
  }
  double mean() const { return n ? s / static_cast<double>(n) : 0.0; }
  double sample_std() const {
    if (n < 2) return 0.0;
    double var =
        (s2 - s * s / static_cast<double>(n)) / static_cast<double>(n - 1);
    return var > 0.0 ? std::sqrt(var) : 0.0;
  }
};

}  // namespace detail

// Aggregate JSON: per metric/baseline/method, mean and sample std of the
// per-episode "mean" rows, plus a non-asserted directional comparison of
// LCGD vs GD. The JSON mean of a cell equals the arithmetic mean of the
// matching CSV rows by construction.
inline nlohmann::json aggregate_json(const std::vector<ReportRow>& rows) {
  std::map<std::string, std::map<std::string, std::map<std::string, detail::Welford>>>
      cells;
  for (const auto& r : rows) {
    if (r.layer != "mean" || r.head != "mean") continue;
    auto& w = cells[r.metric][r.baseline][r.method];
    w.add(r.value);
    w.excluded += r.excluded_count;
  }
  nlohmann::json out;
  out["note"] =
      "finetuning is per test episode on that episode's demonstrations; "
      "absolute levels are not directly comparable to per-dataset finetuning";
  nlohmann::json metrics = nlohmann::json::object();
  for (const auto& [metric, by_baseline] : cells) {
    for (const auto& [baseline, by_method] : by_baseline) {
      for (const auto& [method, w] : by_method) {
        metrics[metric][baseline][method] = {{"mean", w.mean()},
                                             {"std", w.sample_std()},
                                             {"n", w.n},
                                             {"excluded", w.excluded}};
      }
    }
  }
  out["metrics"] = metrics;
  // directional context only, never asserted
  nlohmann::json directional = nlohmann::json::object();
  for (const char* metric : {"SimAOU", "SimAM_delta"}) {
    auto mit = cells.find(metric);
    if (mit == cells.end()) continue;
    for (const auto& [baseline, by_method] : mit->second) {
      auto g = by_method.find("GD");
      auto l = by_method.find("LCGD");
      if (g == by_method.end() || l == by_method.end()) continue;
      directional[metric][baseline] = {
          {"gd_mean", g->second.mean()},
          {"lcgd_mean", l->second.mean()},
          {"lcgd_ge_gd", l->second.mean() >= g->second.mean()}};
    }
  }
  out["directional"] = directional;
  return out;
}

struct LayerwiseCell {
  std::string metric, baseline, method;
  LayerwiseAggregate agg;
};

// Layerwise CSV: exactly L rows per (metric, baseline, method) cell.
inline void write_layerwise_csv(const std::string& path,
                                const std::vector<LayerwiseCell>& cells) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_layerwise_csv: cannot open " + path);
  out << "metric,baseline,method,layer,mean,std,count,excluded\n";
  for (const auto& c : cells) {
    for (std::size_t l = 0; l < c.agg.mean.size(); ++l) {
      out << c.metric << ',' << c.baseline << ',' << c.method << ',' << l << ','
          << fmt_g(c.agg.mean[l]) << ',' << fmt_g(c.agg.std_dev[l]) << ','
          << c.agg.counts[l] << ',' << c.agg.excluded[l] << '\n';
    }
  }
}

struct GradNormRow {
  std::string method;
  std::size_t layer = 0;
  std::size_t step = 0;
  double norm = 0.0;
};

inline void write_grad_norm_csv(const std::string& path,
                                const std::vector<GradNormRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_grad_norm_csv: cannot open " + path);
  out << "method,layer,step,norm\n";
  for (const auto& r : rows) {
    out << r.method << ',' << r.layer << ',' << r.step << ','
        << fmt_g(r.norm) << '\n';
  }
}

// --- SVG plots --------------------------------------------------------------

namespace detail {

inline std::string svg_color(std::size_t i) {
  static const char* palette[] = {"#4878cf", "#ee854a", "#6acc65",
                                  "#d65f5f", "#956cb4", "#8c613c"};
  return palette[i % 6];
}

}  // namespace detail

// Grouped per-layer bars with +-1 std error bars; one series per
// (baseline, method) cell of a single metric.
inline void write_layerwise_svg(const std::string& path,
                                const std::string& metric,
                                const std::vector<LayerwiseCell>& cells) {
  std::vector<const LayerwiseCell*> mine;
  for (const auto& c : cells)
    if (c.metric == metric) mine.push_back(&c);
  if (mine.empty()) return;
  std::size_t layers = mine[0]->agg.mean.size();
  const double bar_w = 18.0, group_gap = 24.0;
  double group_w = bar_w * static_cast<double>(mine.size()) + group_gap;
  double plot_w = group_w * static_cast<double>(layers);
  double width = 70.0 + plot_w + 220.0, height = 320.0;
  double x0 = 60.0, y_top = 30.0, y_mid = 160.0, y_bot = 290.0;
  double scale = (y_bot - y_top) / 2.0;  // value range [-1, 1]
  auto y_of = [&](double v) { return y_mid - v * scale; };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt_g(width)
      << "\" height=\"" << fmt_g(height) << "\">\n";
  svg << "<text x=\"10\" y=\"18\" font-family=\"sans-serif\" font-size=\"14\">"
      << metric << " per layer (mean +- std)</text>\n";
  for (double v : {-1.0, -0.5, 0.0, 0.5, 1.0}) {
    svg << "<line x1=\"" << fmt_g(x0) << "\" y1=\"" << fmt_g(y_of(v))
        << "\" x2=\"" << fmt_g(x0 + plot_w) << "\" y2=\"" << fmt_g(y_of(v))
        << "\" stroke=\"" << (v == 0.0 ? "#888888" : "#dddddd") << "\"/>\n"
        << "<text x=\"20\" y=\"" << fmt_g(y_of(v) + 4)
        << "\" font-family=\"sans-serif\" font-size=\"10\">" << fmt_g(v)
        << "</text>\n";
  }
  for (std::size_t l = 0; l < layers; ++l) {
    double gx = x0 + group_w * static_cast<double>(l);
    svg << "<text x=\"" << fmt_g(gx + group_w / 2 - 20) << "\" y=\""
        << fmt_g(y_bot + 16)
        << "\" font-family=\"sans-serif\" font-size=\"10\">layer " << l
        << "</text>\n";
    for (std::size_t s = 0; s < mine.size(); ++s) {
      double m = mine[s]->agg.mean[l], sd = mine[s]->agg.std_dev[l];
      double bx = gx + bar_w * static_cast<double>(s);
      double top = y_of(std::max(0.0, m)), bot = y_of(std::min(0.0, m));
      svg << "<rect x=\"" << fmt_g(bx) << "\" y=\"" << fmt_g(top)
          << "\" width=\"" << fmt_g(bar_w - 3) << "\" height=\""
          << fmt_g(std::max(0.5, bot - top)) << "\" fill=\""
          << detail::svg_color(s) << "\"/>\n";
      double cx = bx + (bar_w - 3) / 2;
      svg << "<line x1=\"" << fmt_g(cx) << "\" y1=\"" << fmt_g(y_of(m - sd))
          << "\" x2=\"" << fmt_g(cx) << "\" y2=\"" << fmt_g(y_of(m + sd))
          << "\" stroke=\"#222222\"/>\n";
    }
  }
  for (std::size_t s = 0; s < mine.size(); ++s) {
    double ly = 40.0 + 16.0 * static_cast<double>(s);
    svg << "<rect x=\"" << fmt_g(x0 + plot_w + 16) << "\" y=\""
        << fmt_g(ly - 9) << "\" width=\"10\" height=\"10\" fill=\""
        << detail::svg_color(s) << "\"/>\n<text x=\""
        << fmt_g(x0 + plot_w + 32) << "\" y=\"" << fmt_g(ly)
        << "\" font-family=\"sans-serif\" font-size=\"10\">"
        << mine[s]->baseline << " / " << mine[s]->method << "</text>\n";
  }
  svg << "</svg>\n";
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_layerwise_svg: cannot open " + path);
  out << svg.str();
}

// Gradient-norm heatmap [layers x steps]. log_scale colors by log10(norm)
// (used for LCGD, whose per-layer norms span orders of magnitude).
inline void write_grad_norm_svg(const std::string& path,
                                const std::string& method,
                                const GradNormTrace& trace, bool log_scale) {
  if (trace.n_layers == 0 || trace.n_steps == 0) return;
  auto value = [&](std::size_t l, std::size_t s) {
    double v = trace.at(l, s);
    return log_scale ? std::log10(std::max(v, 1e-30)) : v;
  };
  double lo = value(0, 0), hi = value(0, 0);
  for (std::size_t l = 0; l < trace.n_layers; ++l) {
    for (std::size_t s = 0; s < trace.n_steps; ++s) {
      lo = std::min(lo, value(l, s));
      hi = std::max(hi, value(l, s));
    }
  }
  if (hi <= lo) hi = lo + 1.0;
  double cell_w = std::max(4.0, std::min(20.0, 600.0 / trace.n_steps));
  double cell_h = 20.0;
  double x0 = 70.0, y0 = 40.0;
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\""
      << fmt_g(x0 + cell_w * static_cast<double>(trace.n_steps) + 20)
      << "\" height=\""
      << fmt_g(y0 + cell_h * static_cast<double>(trace.n_layers) + 40)
      << "\">\n<text x=\"10\" y=\"20\" font-family=\"sans-serif\" "
         "font-size=\"14\">"
      << method << " gradient norms (" << (log_scale ? "log10" : "linear")
      << " scale)</text>\n";
  for (std::size_t l = 0; l < trace.n_layers; ++l) {
    svg << "<text x=\"10\" y=\""
        << fmt_g(y0 + cell_h * static_cast<double>(l) + 14)
        << "\" font-family=\"sans-serif\" font-size=\"10\">layer " << l
        << "</text>\n";
    for (std::size_t s = 0; s < trace.n_steps; ++s) {
      double u = (value(l, s) - lo) / (hi - lo);
      int red = static_cast<int>(255.0 * u);
      int blue = static_cast<int>(255.0 * (1.0 - u));
      char color[8];
      std::snprintf(color, sizeof(color), "#%02x20%02x", red, blue);
      svg << "<rect x=\"" << fmt_g(x0 + cell_w * static_cast<double>(s))
          << "\" y=\"" << fmt_g(y0 + cell_h * static_cast<double>(l))
          << "\" width=\"" << fmt_g(cell_w) << "\" height=\"" << fmt_g(cell_h)
          << "\" fill=\"" << color << "\"/>\n";
    }
  }
  svg << "<text x=\"" << fmt_g(x0) << "\" y=\""
      << fmt_g(y0 + cell_h * static_cast<double>(trace.n_layers) + 20)
      << "\" font-family=\"sans-serif\" font-size=\"10\">steps 0.."
      << trace.n_steps - 1 << ", range [" << fmt_g(lo) << ", " << fmt_g(hi)
      << "]</text>\n</svg>\n";
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_grad_norm_svg: cannot open " + path);
  out << svg.str();
}

}  // namespace iclgd
