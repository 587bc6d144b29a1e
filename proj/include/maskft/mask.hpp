#pragma once
// Learnable binary masks over frozen weights.
//
// Every maskable weight θ gets a real-valued score c. An indicator v maps the
// scores of one tensor to a keep/remove bitset, and the masked layer computes
// with θ ⊙ v(c). v has zero derivative almost everywhere, so training uses the
// straight-through estimator: the backward pass treats v as the identity and
// the score gradient becomes (dL/dW_eff) ⊙ θ for every element, kept or not.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "maskft/autodiff.hpp"
#include "maskft/model.hpp"

namespace maskft::mask {

enum class IndicatorMode { ratio, threshold };

/// Ratio mode removes the round(K * D) lowest-scoring elements of each target
/// tensor (K is the removed fraction). Threshold mode keeps c > T.
struct IndicatorSpec {
  IndicatorMode mode = IndicatorMode::ratio;
  double ratio = 0.1;
  double threshold = 0.0;

  static IndicatorSpec with_ratio(double k) { return {IndicatorMode::ratio, k, 0.0}; }
  static IndicatorSpec with_threshold(double t) { return {IndicatorMode::threshold, 0.0, t}; }
  void validate() const;
  bool operator==(const IndicatorSpec&) const = default;
};

enum class ScoreInit { weight_magnitude, uniform_random, zeros };

std::string to_string(IndicatorMode mode);
std::string to_string(ScoreInit init);
IndicatorMode parse_indicator_mode(const std::string& s);
ScoreInit parse_score_init(const std::string& s);

/// Packed keep bits, 1 = keep.
class Bitset {
 public:
  Bitset() = default;
  explicit Bitset(std::size_t n, bool value = false);

  std::size_t size() const { return size_; }
  bool test(std::size_t i) const { return (words_[i >> 6] >> (i & 63)) & 1U; }
  void set(std::size_t i, bool value) {
    const std::uint64_t bit = std::uint64_t{1} << (i & 63);
    if (value) words_[i >> 6] |= bit;
    else words_[i >> 6] &= ~bit;
  }
  std::size_t count() const;
  /// LSB-first packing into ceil(n / 8) bytes.
  std::string to_bytes() const;
  static Bitset from_bytes(std::string_view bytes, std::size_t n);
  bool operator==(const Bitset&) const = default;

 private:
  std::size_t size_ = 0;
  std::vector<std::uint64_t> words_;
};

struct MaskEntry {
  Shape shape;
  Bitset keep;
};

struct BinaryMask {
  IndicatorSpec spec;
  std::uint64_t seed = 0;
  std::string origin = "mft";  // mft | random | l1 | ...
  std::map<std::string, MaskEntry> entries;

  std::vector<std::string> paths() const;
  const MaskEntry& at(const std::string& path) const;
  std::size_t kept() const;
  std::size_t total() const;
  /// Fraction of targeted weights removed.
  double sparsity() const;
  bool same_bits(const BinaryMask& other) const;
  Tensor keep_tensor(const std::string& path) const;
};

struct MaskState {
  std::vector<std::string> targets;
  std::map<std::string, Tensor> scores;
  IndicatorSpec spec;
  ScoreInit init = ScoreInit::weight_magnitude;
  std::uint64_t seed = 0;

  void validate(const lm::ModelParams& params) const;
};

MaskState init_scores(const lm::ModelParams& params, const std::vector<std::string>& targets,
                      const IndicatorSpec& spec, ScoreInit init, std::uint64_t seed);

/// Keep bits of one score tensor.
Bitset ratio_indicator(std::span<const double> scores, double removed_fraction);
Bitset threshold_indicator(std::span<const double> scores, double threshold);
std::size_t removed_count(std::size_t elements, double removed_fraction);

BinaryMask apply_indicator(const MaskState& state);

/// Score gradient under the straight-through substitution: g_w ⊙ θ.
Tensor ste_backward(const Tensor& grad_effective_weight, const Tensor& theta);

/// Tape op W = θ ⊙ keep whose backward sends ste_backward(g, θ) to `scores`
/// and g ⊙ keep to θ when θ is differentiable.
ad::Var ste_masked_weight(ad::Var theta, ad::Var scores, const Bitset& keep);

/// I * (θ ⊙ v(c)) for a 2-D input I [n, d_in] and θ [d_in, d_out].
Tensor masked_linear_forward(const Tensor& input, const Tensor& theta, const Tensor& scores,
                             const IndicatorSpec& spec);

/// θ ⊙ M with a fixed mask; nothing is differentiated through the mask.
class FixedMaskOverlay : public lm::WeightOverlay {
 public:
  explicit FixedMaskOverlay(const BinaryMask& mask);
  std::vector<std::string> paths() const override;
  ad::Var effective_weight(ad::Tape& tape, const std::string& path, ad::Var theta) const override;

 private:
  std::map<std::string, Tensor> keep_;
};

/// Training overlay: forward with θ ⊙ v(c) for the given bits, gradients into
/// state.scores[path].grad via the straight-through estimator.
class StraightThroughOverlay : public lm::WeightOverlay {
 public:
  StraightThroughOverlay(MaskState& state, const BinaryMask& current);
  std::vector<std::string> paths() const override;
  ad::Var effective_weight(ad::Tape& tape, const std::string& path, ad::Var theta) const override;

 private:
  MaskState* state_;
  const BinaryMask* mask_;
};

/// The substituted objective W = θ ⊙ c with c differentiated exactly. Used to
/// cross-check the straight-through gradients.
class SubstitutedOverlay : public lm::WeightOverlay {
 public:
  explicit SubstitutedOverlay(MaskState& state) : state_(&state) {}
  std::vector<std::string> paths() const override { return state_->targets; }
  ad::Var effective_weight(ad::Tape& tape, const std::string& path, ad::Var theta) const override;

 private:
  MaskState* state_;
};

// Mask files (framing in io.hpp).
std::string encode_mask(const BinaryMask& mask);
BinaryMask decode_mask(std::string_view bytes);
void save_mask(const BinaryMask& mask, const std::filesystem::path& path);
BinaryMask load_mask(const std::filesystem::path& path);

}  // namespace maskft::mask
