#include "maskft/plot.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <fmt/format.h>

namespace maskft::plot {

namespace {

constexpr double kWidth = 640, kHeight = 420;
constexpr double kLeft = 70, kRight = 20, kTop = 40, kBottom = 50;
constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"};

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

std::string num(double v) { return fmt::format("{:.2f}", v); }

struct Range {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  void add(double v) {
    if (!std::isfinite(v)) return;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  bool empty() const { return lo > hi; }
  // Widens degenerate ranges so mapping never divides by zero.
  void pad() {
    if (empty()) lo = 0, hi = 1;
    if (hi - lo < 1e-12) {
      const double m = std::max(1e-6, std::abs(lo) * 0.05);
      lo -= m;
      hi += m;
    }
  }
  double frac(double v) const { return (v - lo) / (hi - lo); }
};

std::string header(const std::string& title) {
  return fmt::format(
      "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{1}\" viewBox=\"0 0 {0} {1}\">\n"
      "<rect width=\"{0}\" height=\"{1}\" fill=\"white\"/>\n"
      "<text x=\"{2}\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\" text-anchor=\"middle\">{3}</text>\n",
      num(kWidth), num(kHeight), num(kWidth / 2), escape(title));
}

std::string axes(const Range& x, const Range& y, const std::string& xlabel, const std::string& ylabel) {
  const double x0 = kLeft, x1 = kWidth - kRight, y0 = kHeight - kBottom, y1 = kTop;
  std::string out = fmt::format("<g stroke=\"black\" stroke-width=\"1\"><line x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\"/>"
                                "<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{3}\"/></g>\n",
                                num(x0), num(y0), num(x1), num(y1));
  out += "<g font-family=\"sans-serif\" font-size=\"11\">\n";
  for (int i = 0; i <= 4; ++i) {
    const double fx = i / 4.0;
    out += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{:.4g}</text>\n", num(x0 + fx * (x1 - x0)),
                       num(y0 + 16), x.lo + fx * (x.hi - x.lo));
    out += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.4g}</text>\n", num(x0 - 6),
                       num(y0 - fx * (y0 - y1) + 4), y.lo + fx * (y.hi - y.lo));
  }
  out += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n", num((x0 + x1) / 2), num(kHeight - 12),
                     escape(xlabel));
  out += fmt::format("<text x=\"16\" y=\"{0}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {0})\">{1}</text>\n",
                     num((y0 + y1) / 2), escape(ylabel));
  out += "</g>\n";
  return out;
}

double px(const Range& r, double v) { return kLeft + r.frac(v) * (kWidth - kLeft - kRight); }
double py(const Range& r, double v) { return kHeight - kBottom - r.frac(v) * (kHeight - kTop - kBottom); }

}  // namespace

std::string training_curves_svg(const std::vector<train::RunRecord>& records, const std::string& title) {
  if (records.empty()) throw std::invalid_argument("no records to plot");
  Range xr, yr;
  for (const auto& r : records) {
    for (std::size_t i = 0; i < r.train_loss.size(); ++i) {
      xr.add(static_cast<double>(i + 1));
      yr.add(r.train_loss[i]);
    }
    for (std::size_t i = 0; i < r.val_loss.size(); ++i) {
      xr.add(static_cast<double>(r.eval_steps[i]));
      yr.add(r.val_loss[i]);
    }
  }
  xr.pad();
  yr.pad();
  std::string out = header(title) + axes(xr, yr, "step", "loss");
  for (std::size_t k = 0; k < records.size(); ++k) {
    const auto& r = records[k];
    const char* colour = kPalette[k % std::size(kPalette)];
    if (r.train_loss.size() > 1) {
      out += fmt::format("<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"", colour);
      for (std::size_t i = 0; i < r.train_loss.size(); ++i) {
        if (!std::isfinite(r.train_loss[i])) continue;
        out += fmt::format("{}{},{}", i ? " " : "", num(px(xr, static_cast<double>(i + 1))), num(py(yr, r.train_loss[i])));
      }
      out += "\"/>\n";
    } else if (r.train_loss.size() == 1 && std::isfinite(r.train_loss[0])) {
      out += fmt::format("<circle cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"{}\"/>\n", num(px(xr, 1.0)),
                         num(py(yr, r.train_loss[0])), colour);
    }
    for (std::size_t i = 0; i < r.val_loss.size(); ++i) {
      if (!std::isfinite(r.val_loss[i])) continue;
      const double cx = px(xr, static_cast<double>(r.eval_steps[i])), cy = py(yr, r.val_loss[i]);
      out += fmt::format("<rect x=\"{}\" y=\"{}\" width=\"6\" height=\"6\" fill=\"none\" stroke=\"{}\"/>\n", num(cx - 3),
                         num(cy - 3), colour);
    }
    out += fmt::format(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{}\" text-anchor=\"end\">{} "
        "(line: train, squares: val)</text>\n",
        num(kWidth - kRight), num(kTop + 14 * (k + 1)), colour, escape(r.stage.empty() ? r.run_id : r.stage));
  }
  return out + "</svg>\n";
}

std::string sweep_svg(const std::vector<eval::SweepRow>& rows, const std::string& title) {
  if (rows.empty()) throw std::invalid_argument("no sweep rows to plot");
  Range yr;
  for (const auto& r : rows) {
    yr.add(r.best_val_loss);
    yr.add(r.baseline_val_loss);
  }
  yr.pad();
  yr.lo -= 0.1 * (yr.hi - yr.lo);
  Range xr{0.0, static_cast<double>(rows.size())};
  std::string out = header(title) + axes(xr, yr, "sweep point", "best validation loss");
  const double slot = (kWidth - kLeft - kRight) / static_cast<double>(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    const double x = kLeft + slot * (static_cast<double>(i) + 0.2);
    const double w = slot * 0.6;
    const double base = kHeight - kBottom;
    if (!r.failed && std::isfinite(r.best_val_loss)) {
      const double top = py(yr, r.best_val_loss);
      out += fmt::format("<rect class=\"bar\" x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\"/>\n", num(x), num(top), num(w),
                         num(base - top), r.beats_baseline ? "#2ca02c" : "#1f77b4");
    } else {
      out += fmt::format("<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" "
                         "text-anchor=\"middle\">failed</text>\n",
                         num(x + w / 2), num(base - 8));
    }
    out += fmt::format("<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" "
                       "text-anchor=\"middle\">{}</text>\n",
                       num(x + w / 2), num(base + 30), escape(r.label));
  }
  const double by = py(yr, rows.front().baseline_val_loss);
  out += fmt::format("<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\" stroke-dasharray=\"6,4\"/>\n",
                     num(kLeft), num(by), num(kWidth - kRight), num(by));
  return out + "</svg>\n";
}

std::vector<Segment> contour_segments(const std::vector<double>& z, std::size_t nx, std::size_t ny, double level) {
  if (z.size() != nx * ny) throw std::invalid_argument("surface size does not match grid");
  std::vector<Segment> out;
  auto at = [&](std::size_t x, std::size_t y) { return z[y * nx + x]; };
  // Crossing point on the edge between corners a (value va) and b (value vb).
  auto lerp = [&](double ax, double ay, double va, double bx, double by, double vb) {
    const double t = (level - va) / (vb - va);
    return std::pair{ax + t * (bx - ax), ay + t * (by - ay)};
  };
  for (std::size_t y = 0; y + 1 < ny; ++y) {
    for (std::size_t x = 0; x + 1 < nx; ++x) {
      const double v[4] = {at(x, y), at(x + 1, y), at(x + 1, y + 1), at(x, y + 1)};
      if (!std::all_of(std::begin(v), std::end(v), [](double a) { return std::isfinite(a); })) continue;
      const double cx[4] = {double(x), double(x + 1), double(x + 1), double(x)};
      const double cy[4] = {double(y), double(y), double(y + 1), double(y + 1)};
      std::vector<std::pair<double, double>> pts;
      for (int e = 0; e < 4; ++e) {
        const int a = e, b = (e + 1) % 4;
        if ((v[a] < level) != (v[b] < level)) pts.push_back(lerp(cx[a], cy[a], v[a], cx[b], cy[b], v[b]));
      }
      // Two crossings: one segment. Four (saddle): pair edges in order.
      for (std::size_t k = 0; k + 1 < pts.size(); k += 2) {
        out.push_back({pts[k].first, pts[k].second, pts[k + 1].first, pts[k + 1].second});
      }
    }
  }
  return out;
}

std::string center_label(double value) { return fmt::format("center: {:.6f}", value); }

std::string landscape_svg(const eval::LandscapeScan& scan, bool test, const std::string& title) {
  const auto& g = scan.grid;
  const std::vector<double>& z = test ? scan.test_surface : scan.train_surface;
  if (z.size() != g.nx * g.ny || z.empty()) throw std::invalid_argument("landscape surface is empty");
  Range zr;
  for (double v : z) zr.add(v);
  zr.pad();
  const double side = std::min(kWidth - kLeft - kRight, kHeight - kTop - kBottom);
  const double cw = side / static_cast<double>(g.nx), ch = side / static_cast<double>(g.ny);
  const double ox = kLeft, oy = kTop;
  std::string out = header(title);
  for (std::size_t iy = 0; iy < g.ny; ++iy) {
    for (std::size_t ix = 0; ix < g.nx; ++ix) {
      const double v = z[iy * g.nx + ix];
      std::string fill = "#000000";
      if (std::isfinite(v)) {
        // Light for low loss, dark blue for high.
        const double f = std::clamp(zr.frac(v), 0.0, 1.0);
        const int r = static_cast<int>(std::lround(250 - 220 * f));
        const int gg = static_cast<int>(std::lround(250 - 170 * f));
        const int b = static_cast<int>(std::lround(255 - 95 * f));
        fill = fmt::format("#{:02x}{:02x}{:02x}", r, gg, b);
      }
      // y grows upward in parameter space.
      out += fmt::format("<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\"/>\n", num(ox + ix * cw),
                         num(oy + (g.ny - 1 - iy) * ch), num(cw), num(ch), fill);
    }
  }
  constexpr int kLevels = 8;
  out += "<g fill=\"none\" stroke=\"#333333\" stroke-width=\"1\">\n";
  for (int k = 1; k <= kLevels; ++k) {
    const double level = zr.lo + (zr.hi - zr.lo) * k / (kLevels + 1);
    for (const Segment& s : contour_segments(z, g.nx, g.ny, level)) {
      auto sx = [&](double x) { return ox + (x + 0.5) * cw; };
      auto sy = [&](double y) { return oy + (static_cast<double>(g.ny) - 0.5 - y) * ch; };
      out += fmt::format("<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\"/>\n", num(sx(s.x0)), num(sy(s.y0)),
                         num(sx(s.x1)), num(sy(s.y1)));
    }
  }
  out += "</g>\n";
  const double cx = ox + (g.nx / 2 + 0.5) * cw, cy = oy + (g.ny / 2 + 0.5) * ch;
  out += fmt::format("<circle cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"red\"/>\n", num(cx), num(cy));
  const double centre = test ? scan.center_test() : scan.center_train();
  out += fmt::format("<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>\n",
                     num(ox + side + 12), num(oy + 16), escape(center_label(centre)));
  out += fmt::format("<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">range [{:.4g}, {:.4g}]</text>\n",
                     num(ox + side + 12), num(oy + 34), zr.lo, zr.hi);
  out += fmt::format("<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">alpha, beta in [-{:.3g}, {:.3g}]</text>\n",
                     num(ox + side + 12), num(oy + 52), g.range, g.range);
  return out + "</svg>\n";
}

}  // namespace maskft::plot
