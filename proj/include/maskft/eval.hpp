#pragma once
// Analysis instruments built on the trainer: one-axis MFT sweeps, 2-D loss
// landscape scans and the six-method comparison table.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "maskft/corpus.hpp"
#include "maskft/mask.hpp"
#include "maskft/model.hpp"
#include "maskft/trainer.hpp"

namespace maskft::eval {

// ---------------------------------------------------------------------------
// sweeps

enum class Axis { layer_group, mask_ratio, data_ratio };

std::string to_string(Axis a);
Axis parse_axis(const std::string& s);

/// Contiguous groups [first, last] of `width` layers covering the model.
std::vector<std::pair<std::size_t, std::size_t>> layer_groups(std::size_t n_layers, std::size_t width);

struct SweepGrid {
  Axis axis = Axis::mask_ratio;
  /// layer_group: first layer of each group; otherwise the swept value.
  std::vector<double> values;
  std::size_t group_width = 4;
  train::TrainPlan base;  // stage mft

  /// Every group of `width` layers over an n_layers model.
  static SweepGrid over_layer_groups(std::size_t n_layers, std::size_t width, train::TrainPlan base);

  void validate(const lm::TransformerConfig& model) const;
  /// Plan for point i.
  train::TrainPlan plan_at(std::size_t i) const;
  std::string label_at(std::size_t i) const;
};

struct SweepRow {
  std::string label;
  std::size_t first_layer = 0;
  std::size_t last_layer = 0;
  double mask_ratio = 0.0;  // 0 in threshold mode
  double data_ratio = 1.0;
  double best_val_loss = 0.0;
  double baseline_val_loss = 0.0;
  /// Improvement over the baseline: baseline_val_loss - best_val_loss.
  double metric = 0.0;
  bool beats_baseline = false;
  bool failed = false;
  std::string run_id;
};

struct SweepResult {
  std::vector<train::RunRecord> records;
  std::vector<mask::BinaryMask> masks;
  std::vector<SweepRow> rows;
  std::optional<std::size_t> best;  // argmax of metric over non-failed rows
};

struct SweepInputs {
  const lm::ModelParams* frozen = nullptr;  // fine-tuned weights shared by every point
  const corpus::Dataset* train = nullptr;
  const corpus::Windows* val = nullptr;
  std::size_t seq_len = 64;
  double baseline_val_loss = 0.0;  // the upper bound's validation loss
  std::size_t workers = 1;
};

/// One run_mft per grid point. A point that throws or diverges is recorded as
/// failed and the sweep carries on. Throws if the frozen weights change during the sweep.
SweepResult run_sweep(const SweepGrid& grid, const SweepInputs& in);

/// Argmax of the metric over non-failed rows; first row wins ties.
std::optional<std::size_t> best_row(const std::vector<SweepRow>& rows);

std::string summary_csv(const SweepResult& result);
/// Parses a summary written by summary_csv.
std::vector<SweepRow> parse_summary_csv(const std::string& csv);

// ---------------------------------------------------------------------------
// loss landscape

using Direction = std::map<std::string, Tensor>;

struct LandscapeGrid {
  std::size_t nx = 21;
  std::size_t ny = 21;
  double range = 1.0;  // both axes span [-range, range]

  void validate() const;
  /// Coordinate of grid index i on an axis of n points; exact 0 at the center.
  double coord(std::size_t i, std::size_t n) const;
};

struct LandscapeScan {
  LandscapeGrid grid;
  std::vector<std::string> paths;
  Direction d1, d2;
  // Row-major [iy * nx + ix]; non-finite losses are stored as +inf.
  std::vector<double> train_surface;
  std::vector<double> test_surface;

  double train_at(std::size_t ix, std::size_t iy) const { return train_surface[iy * grid.nx + ix]; }
  double test_at(std::size_t ix, std::size_t iy) const { return test_surface[iy * grid.nx + ix]; }
  double center_train() const { return train_at(grid.nx / 2, grid.ny / 2); }
  double center_test() const { return test_at(grid.nx / 2, grid.ny / 2); }
};

/// Largest |cos| accepted between the two directions.
inline constexpr double kMaxDirectionCosine = 0.5;

/// Seeded Gaussian directions over `paths`, each tensor rescaled to the norm
/// of the matching parameter tensor.
std::pair<Direction, Direction> random_directions(const lm::ModelParams& params,
                                                  const std::vector<std::string>& paths, std::uint64_t seed);

/// Throws std::invalid_argument for mismatched shapes, zero directions, or
/// |cos(d1, d2)| above kMaxDirectionCosine.
void validate_directions(const lm::ModelParams& params, const Direction& d1, const Direction& d2);

struct LandscapeInputs {
  const corpus::Windows* train = nullptr;
  const corpus::Windows* test = nullptr;
  std::size_t batch_size = 8;
  std::size_t max_windows = 0;
};

LandscapeScan scan_landscape(const lm::ModelParams& params, const mask::BinaryMask* mask, const Direction& d1,
                             const Direction& d2, const LandscapeGrid& grid, const LandscapeInputs& in);
/// Directions from random_directions over the mask's targets (or every
/// maskable linear weight when mask is null).
LandscapeScan scan_landscape(const lm::ModelParams& params, const mask::BinaryMask* mask, const LandscapeGrid& grid,
                             const LandscapeInputs& in, std::uint64_t seed);

/// Matrix of one surface: a header row of x coordinates, then one row per y.
std::string surface_csv(const LandscapeScan& scan, bool test);

// ---------------------------------------------------------------------------
// comparison

inline const std::vector<std::string>& protocol_methods() {
  static const std::vector<std::string> m{"pretrained", "fft_upper_bound", "continued_fft", "mft", "random_mask",
                                          "l1_mask"};
  return m;
}
inline constexpr const char* kUpperBound = "fft_upper_bound";

/// Held-out loss of one artifact on each evaluated domain.
struct MethodResult {
  std::map<std::string, double> loss;  // domain -> loss
};

struct ComparisonRow {
  std::string method;
  std::map<std::string, std::optional<double>> loss;
  std::map<std::string, std::optional<double>> delta;  // loss - upper bound loss
};

struct Comparison {
  std::string primary_domain;
  std::vector<std::string> domains;
  std::vector<ComparisonRow> rows;
  std::vector<std::string> missing;
};

/// Rows for every protocol method in order; absent methods and absent domains
/// are kept as explicit gaps.
Comparison compare_protocol(const std::map<std::string, MethodResult>& results, const std::string& primary_domain,
                            const std::vector<std::string>& domains);

std::string comparison_csv(const Comparison& c);

}  // namespace maskft::eval
