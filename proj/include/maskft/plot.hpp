#pragma once
// Plain SVG renderers. Output depends only on the inputs; numbers are printed
// with fixed precision so identical inputs give identical bytes.

#include <string>
#include <vector>

#include "maskft/eval.hpp"
#include "maskft/trainer.hpp"

namespace maskft::plot {

/// Train loss per step as a line, validation loss as markers. Several records
/// share the axes (one colour each).
std::string training_curves_svg(const std::vector<train::RunRecord>& records, const std::string& title);

/// One bar per sweep point (best validation loss) with the baseline as a
/// dashed line.
std::string sweep_svg(const std::vector<eval::SweepRow>& rows, const std::string& title);

/// Heatmap of a landscape surface with iso-loss contours and the center value
/// printed as "center: <value>".
std::string landscape_svg(const eval::LandscapeScan& scan, bool test, const std::string& title);

/// Text printed for the center label.
std::string center_label(double value);

/// Line segments of the iso-line at `level` through a row-major ny x nx grid,
/// in grid index coordinates. Cells touching a non-finite value are skipped.
struct Segment {
  double x0, y0, x1, y1;
};
std::vector<Segment> contour_segments(const std::vector<double>& z, std::size_t nx, std::size_t ny, double level);

}  // namespace maskft::plot
