#include "histoprog/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace histoprog::svg {

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string hex_rgb(int r, int g, int b) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
  return buf;
}

const char* kHeader = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";

std::string open_svg(double w, double h) {
  return std::string(kHeader) + "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(w) + "\" height=\"" +
         num(h) + "\" viewBox=\"0 0 " + num(w) + " " + num(h) + "\">\n";
}

std::string group_color(const std::string& name, std::size_t i) {
  if (name == "higher" || name == "shorter") return "#d62728";
  if (name == "lower" || name == "longer") return "#1f77b4";
  static const char* palette[] = {"#2ca02c", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  return palette[i % 5];
}

}  // namespace

std::string score_color(double score, double max_abs) {
  if (!(max_abs > 0) || score == 0) return "#ffffff";
  const double t = std::clamp(std::abs(score) / max_abs, 0.0, 1.0);
  const int fade = int(std::lround(255.0 * (1.0 - t)));
  return score < 0 ? hex_rgb(255, fade, fade) : hex_rgb(fade, fade, 255);
}

std::string heatmap(std::span<const TileScore> tiles, int cell_px) {
  if (tiles.empty()) throw ValidationError("heatmap: empty bag");
  std::int32_t min_x = tiles[0].grid_x, max_x = min_x, min_y = tiles[0].grid_y, max_y = min_y;
  double max_abs = 0;
  for (const auto& t : tiles) {
    min_x = std::min(min_x, t.grid_x);
    max_x = std::max(max_x, t.grid_x);
    min_y = std::min(min_y, t.grid_y);
    max_y = std::max(max_y, t.grid_y);
    max_abs = std::max(max_abs, std::abs(double(t.decision_score)));
  }
  const double w = double(max_x - min_x + 1) * cell_px;
  const double h = double(max_y - min_y + 1) * cell_px;
  std::ostringstream out;
  out << open_svg(w, h);
  out << "<rect class=\"background\" x=\"0\" y=\"0\" width=\"" << num(w) << "\" height=\"" << num(h)
      << "\" fill=\"#f0f0f0\"/>\n";
  out << "<g class=\"tiles\">\n";
  for (const auto& t : tiles) {
    out << "<rect class=\"tile\" x=\"" << num(double(t.grid_x - min_x) * cell_px) << "\" y=\""
        << num(double(t.grid_y - min_y) * cell_px) << "\" width=\"" << cell_px << "\" height=\"" << cell_px
        << "\" fill=\"" << score_color(t.decision_score, max_abs) << "\"/>\n";
  }
  out << "</g>\n</svg>\n";
  return out.str();
}

std::string kaplan_meier(const std::map<std::string, SurvivalCurve>& curves) {
  if (curves.empty()) throw ValidationError("kaplan_meier svg: no curves");
  const double W = 640, H = 400, left = 60, right = 20, top = 20, bottom = 50;
  double t_max = 1;
  for (const auto& [name, c] : curves) {
    for (const double t : c.times) t_max = std::max(t_max, t);
    for (const double t : c.censor_times) t_max = std::max(t_max, t);
  }
  auto X = [&](double t) { return left + (W - left - right) * t / t_max; };
  auto Y = [&](double s) { return top + (H - top - bottom) * (1.0 - s); };

  std::ostringstream out;
  out << open_svg(W, H);
  out << "<g class=\"axes\" stroke=\"#000000\" fill=\"none\">\n";
  out << "<line x1=\"" << num(left) << "\" y1=\"" << num(Y(0)) << "\" x2=\"" << num(W - right) << "\" y2=\""
      << num(Y(0)) << "\"/>\n";
  out << "<line x1=\"" << num(left) << "\" y1=\"" << num(Y(0)) << "\" x2=\"" << num(left) << "\" y2=\"" << num(Y(1))
      << "\"/>\n</g>\n";
  out << "<text x=\"" << num((W + left) / 2) << "\" y=\"" << num(H - 10)
      << "\" text-anchor=\"middle\" font-size=\"12\">days</text>\n";
  out << "<text x=\"15\" y=\"" << num(H / 2) << "\" font-size=\"12\" transform=\"rotate(-90 15 " << num(H / 2)
      << ")\" text-anchor=\"middle\">survival probability</text>\n";

  std::size_t gi = 0;
  for (const auto& [name, c] : curves) {
    const std::string color = group_color(name, gi);
    std::ostringstream d;
    d << "M" << num(X(0)) << "," << num(Y(c.at(0.0)));
    for (std::size_t i = 1; i < c.times.size(); ++i) {
      d << " H" << num(X(c.times[i])) << " V" << num(Y(c.survival_prob[i]));
    }
    double t_end = c.times.empty() ? 0 : c.times.back();
    for (const double t : c.censor_times) t_end = std::max(t_end, t);
    d << " H" << num(X(t_end));
    out << "<g class=\"curve\" data-group=\"" << name << "\">\n";
    out << "<path class=\"km\" d=\"" << d.str() << "\" stroke=\"" << color << "\" fill=\"none\" stroke-width=\"2\"/>\n";
    for (const double t : c.censor_times) {
      const double y = Y(c.at(t));
      out << "<line class=\"censor\" x1=\"" << num(X(t)) << "\" y1=\"" << num(y - 4) << "\" x2=\"" << num(X(t))
          << "\" y2=\"" << num(y + 4) << "\" stroke=\"" << color << "\"/>\n";
    }
    out << "<text x=\"" << num(W - right - 100) << "\" y=\"" << num(top + 15 + 15 * double(gi)) << "\" fill=\""
        << color << "\" font-size=\"12\">" << name << " (n=" << c.n_subjects << ")</text>\n";
    out << "</g>\n";
    ++gi;
  }
  out << "</svg>\n";
  return out.str();
}

std::string pattern_bars(std::span<const SelectedPattern> patterns, std::span<const std::string> hospitals) {
  if (patterns.empty() || hospitals.empty()) throw ValidationError("pattern_bars: nothing to draw");
  double max_abs = 0;
  for (const auto& p : patterns) {
    if (p.hospital_diffs.size() != hospitals.size()) throw ValidationError("pattern_bars: hospital count mismatch");
    for (const double d : p.hospital_diffs) max_abs = std::max(max_abs, std::abs(d));
  }
  if (max_abs == 0) max_abs = 1;
  const double bar_w = 14, gap = 4, panel_h = 160, label_h = 24, left = 20;
  const double W = left * 2 + double(patterns.size()) * (bar_w + gap);
  const double H = double(hospitals.size()) * (panel_h + label_h) + 20;

  std::ostringstream out;
  out << open_svg(W, H);
  for (std::size_t h = 0; h < hospitals.size(); ++h) {
    const double top = 10 + double(h) * (panel_h + label_h);
    const double zero = top + label_h + panel_h / 2;
    out << "<g class=\"panel\" data-hospital=\"" << hospitals[h] << "\">\n";
    out << "<text x=\"" << num(left) << "\" y=\"" << num(top + 14) << "\" font-size=\"12\">" << hospitals[h]
        << "</text>\n";
    out << "<line x1=\"" << num(left) << "\" y1=\"" << num(zero) << "\" x2=\"" << num(W - left) << "\" y2=\""
        << num(zero) << "\" stroke=\"#000000\"/>\n";
    for (std::size_t i = 0; i < patterns.size(); ++i) {
      const auto& p = patterns[i];
      const double d = p.hospital_diffs[h];
      const double len = (panel_h / 2 - 4) * std::abs(d) / max_abs;
      const double x = left + double(i) * (bar_w + gap);
      const double y = d >= 0 ? zero - len : zero;
      const char* color = !p.direction ? "#7f7f7f" : (*p.direction == Direction::Longer ? "#1f77b4" : "#d62728");
      out << "<rect class=\"bar\" data-latent=\"" << p.latent << "\" data-rank=\"" << i << "\" x=\"" << num(x)
          << "\" y=\"" << num(y) << "\" width=\"" << num(bar_w) << "\" height=\"" << num(len) << "\" fill=\""
          << color << "\"/>\n";
    }
    out << "</g>\n";
  }
  out << "</svg>\n";
  return out.str();
}

}  // namespace histoprog::svg
