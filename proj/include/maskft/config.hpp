#pragma once
// Experiment configuration: one JSON document with a schema version, parsed
// strictly (unknown keys and wrong types are errors naming the field path).

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "maskft/baselines.hpp"
#include "maskft/corpus.hpp"
#include "maskft/eval.hpp"
#include "maskft/io.hpp"
#include "maskft/model.hpp"
#include "maskft/trainer.hpp"

namespace maskft::config {

inline constexpr int kSchemaVersion = 1;

class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& what)
      : std::runtime_error(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

/// Pipeline stages in execution order.
inline const std::vector<std::string>& all_stages() {
  static const std::vector<std::string> s{"data",      "pretrain", "fft",       "continued_fft", "mft",
                                          "baselines", "sweeps",   "landscape", "compare",       "plot"};
  return s;
}

struct PretrainConfig {
  std::vector<std::string> domains;  // mixed together; empty = no pretraining
  train::TrainPlan plan;
};

struct BaselinesConfig {
  std::vector<baseline::Kind> kinds{baseline::Kind::random, baseline::Kind::l1};
  double ratio = 0.1;
};

struct SweepConfig {
  std::string name;
  eval::SweepGrid grid;  // base plan is filled from the mft plan
};

struct LandscapeConfig {
  eval::LandscapeGrid grid;
  std::size_t max_windows = 0;
};

struct EvalConfig {
  std::size_t batch_size = 8;
  std::size_t max_windows = 0;
};

struct ExperimentConfig {
  int schema_version = kSchemaVersion;
  std::string run_id;  // empty: derived from the normalized config
  std::filesystem::path output_dir = "runs";
  std::uint64_t seed = 0;
  std::vector<std::string> stages = all_stages();
  lm::TransformerConfig model;
  std::size_t seq_len = 64;
  std::size_t workers = 1;
  std::string primary_domain = "arith";
  std::map<std::string, corpus::DomainSpec> domains;
  PretrainConfig pretrain;
  train::TrainPlan fft, continued_fft, mft;
  BaselinesConfig baselines;
  std::vector<SweepConfig> sweeps;
  LandscapeConfig landscape;
  EvalConfig eval;

  bool wants(const std::string& stage) const;
};

/// Strict parse. Seeds of every domain and plan are derived from `seed`.
ExperimentConfig parse(const io::json& j);
ExperimentConfig load(const std::filesystem::path& path);

/// Normalized form; parse(to_json(c)) == c field for field.
io::json to_json(const ExperimentConfig& c);

/// Replaces the global seed and rederives every stage seed.
void apply_seed(ExperimentConfig& c, std::uint64_t seed);

/// Default configuration as JSON, usable as a template.
io::json default_json();

}  // namespace maskft::config
