#pragma once
// Training stages: full fine-tuning (all parameters), continued full
// fine-tuning from a selected checkpoint, and mask fine-tuning (scores only,
// weights frozen).

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "maskft/corpus.hpp"
#include "maskft/io.hpp"
#include "maskft/mask.hpp"
#include "maskft/model.hpp"

namespace maskft::train {

enum class Stage { fft, continued_fft, mft };
enum class OptimizerKind { adam, sgd_momentum };

std::string to_string(Stage s);
Stage parse_stage(const std::string& s);
std::string to_string(OptimizerKind k);
OptimizerKind parse_optimizer(const std::string& s);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double momentum = 0.9;  // sgd_momentum only
};

/// Per-parameter moment buffers keyed by path.
class OptimizerState {
 public:
  explicit OptimizerState(OptimizerConfig config) : config_(config) {}

  /// Advances the step counter; call once per optimizer step before update().
  void begin_step() { ++step_; }
  /// Applies the current grad of `param` (no-op without a grad).
  void update(const std::string& path, Tensor& param);

  std::uint64_t step() const { return step_; }
  const OptimizerConfig& config() const { return config_; }
  const std::vector<double>* first_moment(const std::string& path) const;

 private:
  OptimizerConfig config_;
  std::uint64_t step_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

struct TrainPlan {
  Stage stage = Stage::fft;
  std::size_t epochs = 1;
  std::size_t batch_size = 8;
  std::size_t max_steps = 0;  // 0 = run all epochs
  std::size_t eval_every = 10;
  std::size_t eval_max_windows = 0;  // 0 = whole validation split
  std::uint64_t seed = 0;
  double data_ratio = 1.0;
  OptimizerConfig optimizer;
  // mft only
  std::size_t first_layer = 0;
  std::size_t last_layer = 0;
  std::optional<mask::IndicatorSpec> indicator;
  mask::ScoreInit score_init = mask::ScoreInit::weight_magnitude;

  void validate(const lm::TransformerConfig& model) const;
};

io::json plan_to_json(const TrainPlan& p);
TrainPlan plan_from_json(const io::json& j);

struct RunRecord {
  std::string run_id;
  std::string stage;
  io::json config;
  std::vector<double> train_loss;                   // one per step
  std::vector<std::vector<std::size_t>> batches;    // window indices per step
  std::vector<std::size_t> eval_steps;
  std::vector<double> val_loss;
  std::size_t best_step = 0;
  double best_val_loss = 0.0;
  bool failed = false;
  std::string failure;
  std::string checkpoint_ref;
  std::string mask_ref;
  double wall_clock_seconds = 0.0;
  std::map<std::string, double> metrics;

  io::json to_json() const;
  static RunRecord from_json(const io::json& j);
};

/// Training windows for a plan: a seeded subset of plan.data_ratio of the
/// examples, cut into windows of seq_len + 1 tokens.
corpus::Windows plan_windows(const corpus::Dataset& data, const TrainPlan& plan, std::size_t seq_len);

/// Mean next-token loss over (up to max_windows) windows, batched.
double evaluate_loss(const lm::ModelParams& params, const lm::WeightOverlay* overlay, const corpus::Windows& windows,
                     std::size_t batch_size = 8, std::size_t max_windows = 0);

struct FftResult {
  lm::ModelParams best;   // lowest validation loss seen
  lm::ModelParams final;  // after the last step
  RunRecord record;
};

/// Full fine-tuning; every parameter is updated.
FftResult run_fft(const lm::ModelParams& start, const corpus::Windows& train, const corpus::Windows& val,
                  const TrainPlan& plan);

/// Same loop as run_fft, starting from a selected checkpoint.
FftResult run_continued_fft(const lm::ModelParams& upper_bound, const corpus::Windows& train,
                            const corpus::Windows& val, const TrainPlan& plan);

struct MftResult {
  mask::MaskState state;      // scores after the last step
  mask::BinaryMask best_mask;  // lowest validation loss among post-update evaluations
  mask::BinaryMask initial_mask;
  RunRecord record;
};

/// Mask fine-tuning: `frozen` is only ever read.
MftResult run_mft(const lm::ModelParams& frozen, const corpus::Windows& train, const corpus::Windows& val,
                  const TrainPlan& plan);

/// One straight-through update of the scores: derive the mask, evaluate
/// `loss` with the masked weights, backpropagate into the scores and step the
/// optimizer. Returns the loss value before the update.
using MaskedLoss = std::function<ad::Var(ad::Tape&, const lm::WeightOverlay&)>;
double mft_step(mask::MaskState& state, OptimizerState& opt, const MaskedLoss& loss);

/// Stable id derived from the stage and configuration.
std::string make_run_id(const std::string& stage, const io::json& config);

}  // namespace maskft::train
