#pragma once
// Decoder-only byte-level transformer: pre-norm blocks with RMS normalization,
// learned position embeddings, multi-head causal self-attention and a GELU
// MLP. Linear weights are stored [d_in, d_out] and applied as x * W.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "maskft/autodiff.hpp"
#include "maskft/tensor.hpp"

namespace maskft::lm {

struct TransformerConfig {
  std::size_t n_layers = 8;
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t d_ff = 512;
  std::size_t vocab_size = 256;
  std::size_t max_seq_len = 128;

  void validate() const;  // throws std::invalid_argument
  std::size_t head_dim() const { return d_model / n_heads; }
  bool operator==(const TransformerConfig&) const = default;
};

/// The six maskable linear maps of a block.
enum class LinearKind { attn_q, attn_k, attn_v, attn_o, mlp_up, mlp_down };
inline constexpr LinearKind kAllLinearKinds[] = {LinearKind::attn_q, LinearKind::attn_k, LinearKind::attn_v,
                                                 LinearKind::attn_o, LinearKind::mlp_up, LinearKind::mlp_down};

std::string linear_path(std::size_t layer, LinearKind kind);
/// Inverse of linear_path; nullopt for anything that is not a maskable linear.
std::optional<std::pair<std::size_t, LinearKind>> parse_linear_path(std::string_view path);

/// Named parameter set of one model.
struct ModelParams {
  TransformerConfig config;
  std::map<std::string, Tensor> tensors;

  const Tensor& at(const std::string& path) const;
  Tensor& at(const std::string& path);
  bool contains(const std::string& path) const { return tensors.count(path) != 0; }
  std::vector<std::string> paths() const;
  /// Maskable linear weights of layers [first, last], in path order.
  std::vector<std::string> linear_paths(std::size_t first_layer, std::size_t last_layer) const;
  std::size_t parameter_count() const;
  bool bit_equal(const ModelParams& other) const;
};

/// Seeded initialization: linear and embedding weights ~ N(0, 0.02^2),
/// normalization gains 1.
ModelParams init_params(const TransformerConfig& config, std::uint64_t seed);

struct TokenStream {
  std::vector<int> ids;
  std::string source;

  static TokenStream from_bytes(std::string_view bytes, std::string source = {});
  std::string to_bytes() const;
  void validate(std::size_t vocab_size) const;  // non-empty, ids in range
};

/// Supplies the effective weight for maskable linear maps (θ ⊙ v(c) and
/// friends). Implemented by the mask engine.
class WeightOverlay {
 public:
  virtual ~WeightOverlay() = default;
  virtual std::vector<std::string> paths() const = 0;
  /// Effective weight for `path`, given the frozen weight already on the tape.
  virtual ad::Var effective_weight(ad::Tape& tape, const std::string& path, ad::Var theta) const = 0;
};

/// Parameters placed on a tape.
class BoundParams {
 public:
  /// Read-only views; nothing is differentiated.
  static BoundParams frozen(ad::Tape& tape, const ModelParams& params);
  /// Every tensor with requires_grad set receives gradients.
  static BoundParams trainable(ad::Tape& tape, ModelParams& params);

  ad::Var get(const std::string& path) const;
  const TransformerConfig& config() const { return *config_; }

 private:
  const TransformerConfig* config_ = nullptr;
  std::map<std::string, ad::Var> vars_;
};

/// Logits [batch * seq_len, vocab] for `batch` sequences of equal length laid
/// out back to back in `inputs`.
ad::Var logits(ad::Tape& tape, const BoundParams& params, std::span<const int> inputs, std::size_t batch,
               const WeightOverlay* overlay = nullptr);

/// Mean next-token cross entropy over a batch of windows. Each window holds
/// seq_len + 1 tokens; positions [0, seq_len) predict [1, seq_len].
ad::Var window_loss(ad::Tape& tape, const BoundParams& params, std::span<const int> windows, std::size_t batch,
                    const WeightOverlay* overlay = nullptr);

/// Logits [len, vocab] for one sequence.
Tensor forward(const ModelParams& params, const TokenStream& tokens, const WeightOverlay* overlay = nullptr);

/// Mean over positions of -log P(u_i | u_<i).
Tensor autoregressive_loss(const ModelParams& params, const TokenStream& tokens,
                           const WeightOverlay* overlay = nullptr);

/// Greedy decoding of n tokens; ties go to the lower id. When the context
/// reaches max_seq_len the oldest tokens are dropped.
TokenStream generate(const ModelParams& params, const TokenStream& prompt, std::size_t n,
                     const WeightOverlay* overlay = nullptr);

/// Rejects overlays that name unknown or non-maskable paths.
void check_overlay(const ModelParams& params, const WeightOverlay& overlay);

}  // namespace maskft::lm
