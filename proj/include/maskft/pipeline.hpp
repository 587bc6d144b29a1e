#pragma once
// Stage runner behind `maskft run`, plus the inspect and plot commands.
//
// Run directory layout (under output_dir/<run id>):
//   config.json  record.json  stages.json  timing.json
//   data/ checkpoints/ masks/ records/ surfaces/ tables/ plots/

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "maskft/config.hpp"

namespace maskft::pipeline {

/// Explicit run_id, or the first 12 hex digits of the normalized config hash.
std::string run_id(const config::ExperimentConfig& c);
std::filesystem::path run_directory(const config::ExperimentConfig& c);

struct Outcome {
  int exit_code = 0;  // 0 success, 1 stage failure
  std::filesystem::path run_dir;
  std::vector<std::string> executed;
  std::vector<std::string> skipped;  // up to date from an earlier run
  std::string error;
};

/// Runs the requested stages in order. Stages whose inputs and settings are
/// unchanged since their last successful run are skipped.
Outcome run(const config::ExperimentConfig& c, std::ostream& log);

/// Held by one writer per run directory; a lock left by a dead process is
/// taken over.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& run_dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
};

/// Human-readable report for a checkpoint, mask, record or sweep summary.
/// Throws io::FormatError for corrupt binary files.
std::string inspect(const std::filesystem::path& path);

/// Renders every SVG the run directory has inputs for; returns the files
/// written. Throws if the directory holds no records.
std::vector<std::filesystem::path> plot(const std::filesystem::path& run_dir);

/// Parses a surface written by eval::surface_csv back into grid and values.
struct Surface {
  std::vector<double> xs, ys, z;
};
Surface read_surface_csv(const std::string& csv);

}  // namespace maskft::pipeline
