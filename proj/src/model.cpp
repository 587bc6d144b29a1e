#include "maskft/model.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "maskft/rng.hpp"

namespace maskft::lm {

void TransformerConfig::validate() const {
  if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_ff < 1 || vocab_size < 1 || max_seq_len < 1) {
    throw std::invalid_argument("transformer config fields must all be >= 1");
  }
  if (d_model % n_heads != 0) {
    throw std::invalid_argument("d_model (" + std::to_string(d_model) + ") is not divisible by n_heads (" +
                                std::to_string(n_heads) + ")");
  }
}

namespace {

constexpr std::string_view kind_suffix(LinearKind kind) {
  switch (kind) {
    case LinearKind::attn_q: return "attn.q";
    case LinearKind::attn_k: return "attn.k";
    case LinearKind::attn_v: return "attn.v";
    case LinearKind::attn_o: return "attn.o";
    case LinearKind::mlp_up: return "mlp.up";
    case LinearKind::mlp_down: return "mlp.down";
  }
  return "";
}

std::string layer_path(std::size_t layer, std::string_view leaf) {
  return "layer." + std::to_string(layer) + "." + std::string(leaf);
}

}  // namespace

std::string linear_path(std::size_t layer, LinearKind kind) { return layer_path(layer, kind_suffix(kind)); }

std::optional<std::pair<std::size_t, LinearKind>> parse_linear_path(std::string_view path) {
  constexpr std::string_view prefix = "layer.";
  if (path.substr(0, prefix.size()) != prefix) return std::nullopt;
  path.remove_prefix(prefix.size());
  const auto dot = path.find('.');
  if (dot == std::string_view::npos || dot == 0) return std::nullopt;
  std::size_t layer = 0;
  for (char c : path.substr(0, dot)) {
    if (c < '0' || c > '9') return std::nullopt;
    layer = layer * 10 + static_cast<std::size_t>(c - '0');
  }
  const auto rest = path.substr(dot + 1);
  for (LinearKind kind : kAllLinearKinds) {
    if (rest == kind_suffix(kind)) return std::make_pair(layer, kind);
  }
  return std::nullopt;
}

const Tensor& ModelParams::at(const std::string& path) const {
  const auto it = tensors.find(path);
  if (it == tensors.end()) throw std::out_of_range("unknown parameter path '" + path + "'");
  return it->second;
}

Tensor& ModelParams::at(const std::string& path) {
  const auto it = tensors.find(path);
  if (it == tensors.end()) throw std::out_of_range("unknown parameter path '" + path + "'");
  return it->second;
}

std::vector<std::string> ModelParams::paths() const {
  std::vector<std::string> out;
  out.reserve(tensors.size());
  for (const auto& [path, _] : tensors) out.push_back(path);
  return out;
}

std::vector<std::string> ModelParams::linear_paths(std::size_t first_layer, std::size_t last_layer) const {
  if (first_layer > last_layer || last_layer >= config.n_layers) {
    throw std::out_of_range("layer range [" + std::to_string(first_layer) + ", " + std::to_string(last_layer) +
                            "] outside model depth " + std::to_string(config.n_layers));
  }
  std::vector<std::string> out;
  for (std::size_t l = first_layer; l <= last_layer; ++l) {
    for (LinearKind kind : kAllLinearKinds) out.push_back(linear_path(l, kind));
  }
  return out;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : tensors) n += t.size();
  return n;
}

bool ModelParams::bit_equal(const ModelParams& other) const {
  if (!(config == other.config) || tensors.size() != other.tensors.size()) return false;
  auto it = other.tensors.begin();
  for (const auto& [path, t] : tensors) {
    if (it->first != path || !t.bit_equal(it->second)) return false;
    ++it;
  }
  return true;
}

ModelParams init_params(const TransformerConfig& config, std::uint64_t seed) {
  config.validate();
  ModelParams p;
  p.config = config;
  Rng rng(seed);
  const std::size_t d = config.d_model;
  // Insertion order is fixed so the random stream maps to the same tensors.
  auto normal = [&](Shape shape) {
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = 0.02 * rng.normal();
    return t;
  };
  p.tensors["embed"] = normal({config.vocab_size, d});
  p.tensors["pos_embed"] = normal({config.max_seq_len, d});
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    p.tensors[layer_path(l, "attn_norm")] = Tensor(Shape{d}, 1.0);
    p.tensors[linear_path(l, LinearKind::attn_q)] = normal({d, d});
    p.tensors[linear_path(l, LinearKind::attn_k)] = normal({d, d});
    p.tensors[linear_path(l, LinearKind::attn_v)] = normal({d, d});
    p.tensors[linear_path(l, LinearKind::attn_o)] = normal({d, d});
    p.tensors[layer_path(l, "mlp_norm")] = Tensor(Shape{d}, 1.0);
    p.tensors[linear_path(l, LinearKind::mlp_up)] = normal({d, config.d_ff});
    p.tensors[linear_path(l, LinearKind::mlp_down)] = normal({config.d_ff, d});
  }
  p.tensors["final_norm"] = Tensor(Shape{d}, 1.0);
  p.tensors["lm_head"] = normal({d, config.vocab_size});
  return p;
}

TokenStream TokenStream::from_bytes(std::string_view bytes, std::string source) {
  TokenStream s;
  s.source = std::move(source);
  s.ids.reserve(bytes.size());
  for (char c : bytes) s.ids.push_back(static_cast<unsigned char>(c));
  return s;
}

std::string TokenStream::to_bytes() const {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  return out;
}

void TokenStream::validate(std::size_t vocab_size) const {
  if (ids.empty()) throw std::invalid_argument("token stream is empty");
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) {
      throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(vocab_size));
    }
  }
}

BoundParams BoundParams::frozen(ad::Tape& tape, const ModelParams& params) {
  BoundParams b;
  b.config_ = &params.config;
  for (const auto& [path, t] : params.tensors) b.vars_.emplace(path, tape.view(t));
  return b;
}

BoundParams BoundParams::trainable(ad::Tape& tape, ModelParams& params) {
  BoundParams b;
  b.config_ = &params.config;
  for (auto& [path, t] : params.tensors) b.vars_.emplace(path, tape.param(t));
  return b;
}

ad::Var BoundParams::get(const std::string& path) const {
  const auto it = vars_.find(path);
  if (it == vars_.end()) throw std::out_of_range("unknown parameter path '" + path + "'");
  return it->second;
}

namespace {

ad::Var linear(ad::Tape& tape, const BoundParams& p, ad::Var x, std::size_t layer, LinearKind kind,
               const WeightOverlay* overlay) {
  const std::string path = linear_path(layer, kind);
  ad::Var w = p.get(path);
  if (overlay) w = overlay->effective_weight(tape, path, w);
  return ad::matmul(x, w);
}

ad::Var attention(ad::Tape& tape, const BoundParams& p, ad::Var h, std::size_t layer, std::size_t batch,
                  std::size_t seq, const WeightOverlay* overlay) {
  const TransformerConfig& cfg = p.config();
  const std::size_t dh = cfg.head_dim();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  ad::Var q = linear(tape, p, h, layer, LinearKind::attn_q, overlay);
  ad::Var k = linear(tape, p, h, layer, LinearKind::attn_k, overlay);
  ad::Var v = linear(tape, p, h, layer, LinearKind::attn_v, overlay);
  std::vector<ad::Var> sequences;
  sequences.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    ad::Var qb = batch > 1 ? ad::slice(q, 0, b * seq, (b + 1) * seq) : q;
    ad::Var kb = batch > 1 ? ad::slice(k, 0, b * seq, (b + 1) * seq) : k;
    ad::Var vb = batch > 1 ? ad::slice(v, 0, b * seq, (b + 1) * seq) : v;
    std::vector<ad::Var> heads;
    heads.reserve(cfg.n_heads);
    for (std::size_t hd = 0; hd < cfg.n_heads; ++hd) {
      const std::size_t c0 = hd * dh, c1 = c0 + dh;
      ad::Var qh = cfg.n_heads > 1 ? ad::slice(qb, 1, c0, c1) : qb;
      ad::Var kh = cfg.n_heads > 1 ? ad::slice(kb, 1, c0, c1) : kb;
      ad::Var vh = cfg.n_heads > 1 ? ad::slice(vb, 1, c0, c1) : vb;
      ad::Var scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt);
      heads.push_back(ad::matmul(ad::causal_softmax(scores), vh));
    }
    sequences.push_back(heads.size() > 1 ? ad::concat(heads, 1) : heads[0]);
  }
  ad::Var merged = sequences.size() > 1 ? ad::concat(sequences, 0) : sequences[0];
  return linear(tape, p, merged, layer, LinearKind::attn_o, overlay);
}

}  // namespace

ad::Var logits(ad::Tape& tape, const BoundParams& p, std::span<const int> inputs, std::size_t batch,
               const WeightOverlay* overlay) {
  const TransformerConfig& cfg = p.config();
  if (batch == 0 || inputs.empty() || inputs.size() % batch != 0) {
    throw std::invalid_argument("input length " + std::to_string(inputs.size()) + " is not a multiple of batch " +
                                std::to_string(batch));
  }
  const std::size_t seq = inputs.size() / batch;
  if (seq > cfg.max_seq_len) {
    throw std::length_error("sequence length " + std::to_string(seq) + " exceeds max_seq_len " +
                            std::to_string(cfg.max_seq_len));
  }
  const std::size_t d = cfg.d_model;
  ad::Var tok = ad::embedding(p.get("embed"), inputs);
  ad::Var pos = ad::slice(p.get("pos_embed"), 0, 0, seq);
  ad::Var x = ad::reshape(ad::add(ad::reshape(tok, {batch, seq, d}), pos), {batch * seq, d});
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string prefix = "layer." + std::to_string(l) + ".";
    ad::Var h = ad::multiply(ad::rms_norm(x), p.get(prefix + "attn_norm"));
    x = ad::add(x, attention(tape, p, h, l, batch, seq, overlay));
    ad::Var h2 = ad::multiply(ad::rms_norm(x), p.get(prefix + "mlp_norm"));
    ad::Var up = ad::gelu(linear(tape, p, h2, l, LinearKind::mlp_up, overlay));
    x = ad::add(x, linear(tape, p, up, l, LinearKind::mlp_down, overlay));
  }
  ad::Var hf = ad::multiply(ad::rms_norm(x), p.get("final_norm"));
  return ad::matmul(hf, p.get("lm_head"));
}

ad::Var window_loss(ad::Tape& tape, const BoundParams& p, std::span<const int> windows, std::size_t batch,
                    const WeightOverlay* overlay) {
  if (batch == 0 || windows.size() % batch != 0) throw std::invalid_argument("window buffer not divisible by batch");
  const std::size_t width = windows.size() / batch;
  if (width < 2) throw std::invalid_argument("windows need at least 2 tokens");
  const std::size_t seq = width - 1;
  std::vector<int> inputs, targets;
  inputs.reserve(batch * seq);
  targets.reserve(batch * seq);
  for (std::size_t b = 0; b < batch; ++b) {
    const int* w = windows.data() + b * width;
    inputs.insert(inputs.end(), w, w + seq);
    targets.insert(targets.end(), w + 1, w + width);
  }
  return ad::cross_entropy(logits(tape, p, inputs, batch, overlay), targets);
}

void check_overlay(const ModelParams& params, const WeightOverlay& overlay) {
  for (const std::string& path : overlay.paths()) {
    if (!params.contains(path)) throw std::invalid_argument("overlay path '" + path + "' is not a model parameter");
    if (!parse_linear_path(path)) throw std::invalid_argument("overlay path '" + path + "' is not a maskable linear");
  }
}

Tensor forward(const ModelParams& params, const TokenStream& tokens, const WeightOverlay* overlay) {
  tokens.validate(params.config.vocab_size);
  if (tokens.ids.size() > params.config.max_seq_len) {
    throw std::length_error("sequence of " + std::to_string(tokens.ids.size()) + " tokens exceeds max_seq_len " +
                            std::to_string(params.config.max_seq_len));
  }
  if (overlay) check_overlay(params, *overlay);
  ad::Tape tape;
  const BoundParams bound = BoundParams::frozen(tape, params);
  return logits(tape, bound, tokens.ids, 1, overlay).value();
}

Tensor autoregressive_loss(const ModelParams& params, const TokenStream& tokens, const WeightOverlay* overlay) {
  if (tokens.ids.size() < 2) throw std::invalid_argument("autoregressive loss needs at least 2 tokens");
  tokens.validate(params.config.vocab_size);
  if (tokens.ids.size() - 1 > params.config.max_seq_len) {
    throw std::length_error("sequence of " + std::to_string(tokens.ids.size()) + " tokens exceeds max_seq_len + 1");
  }
  if (overlay) check_overlay(params, *overlay);
  ad::Tape tape;
  const BoundParams bound = BoundParams::frozen(tape, params);
  return window_loss(tape, bound, tokens.ids, 1, overlay).value();
}

TokenStream generate(const ModelParams& params, const TokenStream& prompt, std::size_t n,
                     const WeightOverlay* overlay) {
  if (n < 1) throw std::invalid_argument("generate needs n >= 1");
  prompt.validate(params.config.vocab_size);
  const std::size_t ctx = params.config.max_seq_len;
  if (prompt.ids.size() > ctx) {
    throw std::length_error("prompt of " + std::to_string(prompt.ids.size()) + " tokens exceeds max_seq_len " +
                            std::to_string(ctx));
  }
  if (overlay) check_overlay(params, *overlay);
  TokenStream out = prompt;
  const std::size_t vocab = params.config.vocab_size;
  for (std::size_t step = 0; step < n; ++step) {
    const std::size_t len = std::min(out.ids.size(), ctx);
    std::span<const int> window(out.ids.data() + (out.ids.size() - len), len);
    ad::Tape tape;
    const BoundParams bound = BoundParams::frozen(tape, params);
    const Tensor& z = logits(tape, bound, window, 1, overlay).value();
    const double* last = z.data().data() + (len - 1) * vocab;
    std::size_t best = 0;
    for (std::size_t j = 1; j < vocab; ++j) {
      if (last[j] > last[best]) best = j;
    }
    out.ids.push_back(static_cast<int>(best));
  }
  return out;
}

}  // namespace maskft::lm
