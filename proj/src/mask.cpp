#include "maskft/mask.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "maskft/io.hpp"
#include "maskft/rng.hpp"
#include "maskft/simd/kernels.hpp"

namespace maskft::mask {

void IndicatorSpec::validate() const {
  if (mode == IndicatorMode::ratio) {
    if (!(ratio > 0.0 && ratio < 1.0)) {
      throw std::invalid_argument("mask ratio K must lie in (0, 1), got " + std::to_string(ratio));
    }
  } else if (!std::isfinite(threshold)) {
    throw std::invalid_argument("mask threshold T must be finite");
  }
}

std::string to_string(IndicatorMode mode) { return mode == IndicatorMode::ratio ? "ratio" : "threshold"; }

std::string to_string(ScoreInit init) {
  switch (init) {
    case ScoreInit::weight_magnitude: return "weight_magnitude";
    case ScoreInit::uniform_random: return "uniform_random";
    case ScoreInit::zeros: return "zeros";
  }
  return "?";
}

IndicatorMode parse_indicator_mode(const std::string& s) {
  if (s == "ratio") return IndicatorMode::ratio;
  if (s == "threshold") return IndicatorMode::threshold;
  throw std::invalid_argument("unknown indicator mode '" + s + "'");
}

ScoreInit parse_score_init(const std::string& s) {
  if (s == "weight_magnitude") return ScoreInit::weight_magnitude;
  if (s == "uniform_random") return ScoreInit::uniform_random;
  if (s == "zeros") return ScoreInit::zeros;
  throw std::invalid_argument("unknown score init '" + s + "'");
}

// ---------------------------------------------------------------------------
// Bitset

Bitset::Bitset(std::size_t n, bool value) : size_(n), words_((n + 63) / 64, value ? ~std::uint64_t{0} : 0) {
  if (value && n % 64) words_.back() = (std::uint64_t{1} << (n % 64)) - 1;
}

std::size_t Bitset::count() const {
  std::size_t c = 0;
  for (auto w : words_) c += static_cast<std::size_t>(std::popcount(w));
  return c;
}

std::string Bitset::to_bytes() const {
  std::string out((size_ + 7) / 8, '\0');
  for (std::size_t b = 0; b < out.size(); ++b) {
    out[b] = static_cast<char>((words_[b / 8] >> (8 * (b % 8))) & 0xFF);
  }
  return out;
}

Bitset Bitset::from_bytes(std::string_view bytes, std::size_t n) {
  if (bytes.size() != (n + 7) / 8) {
    throw std::invalid_argument("bitset of " + std::to_string(n) + " bits needs " + std::to_string((n + 7) / 8) +
                                " bytes, got " + std::to_string(bytes.size()));
  }
  Bitset b(n);
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    b.words_[i / 8] |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[i])) << (8 * (i % 8));
  }
  if (n % 8 && (static_cast<unsigned char>(bytes.back()) >> (n % 8)) != 0) {
    throw std::invalid_argument("bitset padding bits are not zero");
  }
  return b;
}

// ---------------------------------------------------------------------------
// BinaryMask

std::vector<std::string> BinaryMask::paths() const {
  std::vector<std::string> out;
  for (const auto& [p, _] : entries) out.push_back(p);
  return out;
}

const MaskEntry& BinaryMask::at(const std::string& path) const {
  const auto it = entries.find(path);
  if (it == entries.end()) throw std::out_of_range("mask has no entry for '" + path + "'");
  return it->second;
}

std::size_t BinaryMask::kept() const {
  std::size_t n = 0;
  for (const auto& [_, e] : entries) n += e.keep.count();
  return n;
}

std::size_t BinaryMask::total() const {
  std::size_t n = 0;
  for (const auto& [_, e] : entries) n += e.keep.size();
  return n;
}

double BinaryMask::sparsity() const {
  const std::size_t t = total();
  return t ? static_cast<double>(t - kept()) / static_cast<double>(t) : 0.0;
}

bool BinaryMask::same_bits(const BinaryMask& other) const {
  if (entries.size() != other.entries.size()) return false;
  auto it = other.entries.begin();
  for (const auto& [p, e] : entries) {
    if (it->first != p || it->second.shape != e.shape || !(it->second.keep == e.keep)) return false;
    ++it;
  }
  return true;
}

Tensor BinaryMask::keep_tensor(const std::string& path) const {
  const MaskEntry& e = at(path);
  Tensor t(e.shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = e.keep.test(i) ? 1.0 : 0.0;
  return t;
}

// ---------------------------------------------------------------------------
// scores and indicators

void MaskState::validate(const lm::ModelParams& params) const {
  spec.validate();
  if (targets.empty()) throw std::invalid_argument("mask state has no targets");
  for (const std::string& path : targets) {
    const auto it = scores.find(path);
    if (it == scores.end()) throw std::invalid_argument("no scores for target '" + path + "'");
    if (it->second.shape() != params.at(path).shape()) {
      throw ShapeError("scores for '" + path + "' have shape " + shape_str(it->second.shape()) +
                       ", parameter has " + shape_str(params.at(path).shape()));
    }
  }
}

MaskState init_scores(const lm::ModelParams& params, const std::vector<std::string>& targets,
                      const IndicatorSpec& spec, ScoreInit init, std::uint64_t seed) {
  spec.validate();
  if (init == ScoreInit::zeros && spec.mode == IndicatorMode::ratio) {
    throw std::invalid_argument("zeros score init is degenerate in ratio mode (every score ties)");
  }
  MaskState state;
  state.targets = targets;
  state.spec = spec;
  state.init = init;
  state.seed = seed;
  Rng rng(seed);
  for (const std::string& path : targets) {
    const Tensor& theta = params.at(path);
    Tensor c(theta.shape());
    switch (init) {
      case ScoreInit::weight_magnitude:
        for (std::size_t i = 0; i < c.size(); ++i) c[i] = std::abs(theta[i]);
        break;
      case ScoreInit::uniform_random:
        for (double& v : c.data()) v = rng.uniform(-0.01, 0.01);
        break;
      case ScoreInit::zeros:
        break;
    }
    state.scores.emplace(path, std::move(c));
  }
  return state;
}

std::size_t removed_count(std::size_t elements, double removed_fraction) {
  return static_cast<std::size_t>(std::llround(removed_fraction * static_cast<double>(elements)));
}

Bitset ratio_indicator(std::span<const double> scores, double removed_fraction) {
  const std::size_t n = scores.size();
  const std::size_t r = removed_count(n, removed_fraction);
  for (double s : scores) {
    if (std::isnan(s)) throw std::domain_error("NaN score");
  }
  Bitset keep(n, true);
  if (r == 0) return keep;
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  // Removal order: lowest score first; among equal scores the higher index
  // goes first so the lower index is kept.
  auto removed_before = [&](std::size_t a, std::size_t b) {
    return scores[a] < scores[b] || (scores[a] == scores[b] && a > b);
  };
  std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(r - 1), idx.end(), removed_before);
  for (std::size_t i = 0; i < r; ++i) keep.set(idx[i], false);
  return keep;
}

Bitset threshold_indicator(std::span<const double> scores, double threshold) {
  Bitset keep(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) keep.set(i, scores[i] > threshold);
  return keep;
}

BinaryMask apply_indicator(const MaskState& state) {
  state.spec.validate();
  BinaryMask mask;
  mask.spec = state.spec;
  mask.seed = state.seed;
  for (const std::string& path : state.targets) {
    const Tensor& c = state.scores.at(path);
    Bitset keep = state.spec.mode == IndicatorMode::ratio ? ratio_indicator(c.data(), state.spec.ratio)
                                                          : threshold_indicator(c.data(), state.spec.threshold);
    mask.entries.emplace(path, MaskEntry{c.shape(), std::move(keep)});
  }
  return mask;
}

// ---------------------------------------------------------------------------
// straight-through estimator

Tensor ste_backward(const Tensor& grad_effective_weight, const Tensor& theta) {
  if (grad_effective_weight.shape() != theta.shape()) {
    throw ShapeError("ste_backward: gradient " + shape_str(grad_effective_weight.shape()) + " vs weight " +
                     shape_str(theta.shape()));
  }
  Tensor out(theta.shape());
  simd::active().mul(theta.size(), grad_effective_weight.data().data(), theta.data().data(), out.data().data());
  return out;
}

ad::Var ste_masked_weight(ad::Var theta, ad::Var scores, const Bitset& keep) {
  const Tensor& th = theta.value();
  if (scores.shape() != th.shape() || keep.size() != th.size()) {
    throw ShapeError("ste_masked_weight: weight " + shape_str(th.shape()) + " vs scores " +
                     shape_str(scores.shape()));
  }
  Tensor m(th.shape());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = keep.test(i) ? 1.0 : 0.0;
  Tensor w(th.shape());
  simd::active().mul(th.size(), th.data().data(), m.data().data(), w.data().data());
  return theta.tape->record(std::move(w), {theta, scores},
                            [theta, scores, m = std::move(m)](ad::Tape& t, std::span<const double> g) {
    const auto& K = simd::active();
    if (double* gc = t.grad_buffer(scores)) K.mul_acc(g.size(), g.data(), theta.value().data().data(), gc);
    if (double* gt = t.grad_buffer(theta)) K.mul_acc(g.size(), g.data(), m.data().data(), gt);
  });
}

Tensor masked_linear_forward(const Tensor& input, const Tensor& theta, const Tensor& scores,
                             const IndicatorSpec& spec) {
  if (theta.shape() != scores.shape()) {
    throw ShapeError("masked_linear_forward: weight " + shape_str(theta.shape()) + " vs scores " +
                     shape_str(scores.shape()));
  }
  const Bitset keep = spec.mode == IndicatorMode::ratio ? ratio_indicator(scores.data(), spec.ratio)
                                                        : threshold_indicator(scores.data(), spec.threshold);
  ad::Tape tape;
  ad::Var w = ste_masked_weight(tape.view(theta), tape.view(scores), keep);
  return ad::matmul(tape.view(input), w).value();
}

FixedMaskOverlay::FixedMaskOverlay(const BinaryMask& mask) {
  for (const auto& [path, _] : mask.entries) keep_.emplace(path, mask.keep_tensor(path));
}

std::vector<std::string> FixedMaskOverlay::paths() const {
  std::vector<std::string> out;
  for (const auto& [p, _] : keep_) out.push_back(p);
  return out;
}

ad::Var FixedMaskOverlay::effective_weight(ad::Tape& tape, const std::string& path, ad::Var theta) const {
  const auto it = keep_.find(path);
  if (it == keep_.end()) return theta;
  return ad::multiply(theta, tape.view(it->second));
}

StraightThroughOverlay::StraightThroughOverlay(MaskState& state, const BinaryMask& current)
    : state_(&state), mask_(&current) {}

std::vector<std::string> StraightThroughOverlay::paths() const { return state_->targets; }

ad::Var StraightThroughOverlay::effective_weight(ad::Tape& tape, const std::string& path, ad::Var theta) const {
  const auto it = state_->scores.find(path);
  if (it == state_->scores.end()) return theta;
  return ste_masked_weight(theta, tape.param(it->second), mask_->at(path).keep);
}

ad::Var SubstitutedOverlay::effective_weight(ad::Tape& tape, const std::string& path, ad::Var theta) const {
  const auto it = state_->scores.find(path);
  if (it == state_->scores.end()) return theta;
  return ad::multiply(theta, tape.param(it->second));
}

// ---------------------------------------------------------------------------
// files

namespace {

io::json spec_to_json(const IndicatorSpec& s) {
  io::json j{{"mode", to_string(s.mode)}};
  if (s.mode == IndicatorMode::ratio) j["ratio"] = s.ratio;
  else j["threshold"] = s.threshold;
  return j;
}

IndicatorSpec spec_from_json(const io::json& j) {
  IndicatorSpec s;
  s.mode = parse_indicator_mode(j.at("mode").get<std::string>());
  if (s.mode == IndicatorMode::ratio) s.ratio = j.at("ratio").get<double>();
  else s.threshold = j.at("threshold").get<double>();
  return s;
}

}  // namespace

std::string encode_mask(const BinaryMask& mask) {
  io::json targets = io::json::array();
  std::string blob;
  for (const auto& [path, e] : mask.entries) {
    const std::string bytes = e.keep.to_bytes();
    targets.push_back({{"path", path},
                       {"shape", e.shape},
                       {"count", e.keep.size()},
                       {"popcount", e.keep.count()},
                       {"offset", blob.size()},
                       {"bytes", bytes.size()}});
    blob += bytes;
  }
  const io::json manifest{{"format", "maskft-mask"}, {"version", 1},       {"spec", spec_to_json(mask.spec)},
                          {"seed", mask.seed},       {"origin", mask.origin}, {"targets", targets},
                          {"blob_bytes", blob.size()}};
  return io::frame(io::kMaskMagic, manifest, blob);
}

BinaryMask decode_mask(std::string_view bytes) {
  const io::Framed f = io::unframe(bytes, io::kMaskMagic);
  BinaryMask mask;
  try {
    mask.spec = spec_from_json(f.manifest.at("spec"));
    mask.seed = f.manifest.at("seed").get<std::uint64_t>();
    mask.origin = f.manifest.value("origin", std::string("mft"));
  } catch (const std::exception& e) {
    throw io::FormatError(std::string("invalid mask header: ") + e.what(), 16);
  }
  if (f.manifest.value("blob_bytes", std::uint64_t{0}) != f.blob.size()) {
    throw io::FormatError("bitset blob length does not match header", f.blob_offset);
  }
  std::uint64_t expected = 0;
  for (const io::json& rec : f.manifest.at("targets")) {
    const std::string path = rec.at("path").get<std::string>();
    const Shape shape = rec.at("shape").get<Shape>();
    const auto count = rec.at("count").get<std::uint64_t>();
    const auto offset = rec.at("offset").get<std::uint64_t>();
    const auto nbytes = rec.at("bytes").get<std::uint64_t>();
    const auto popcount = rec.at("popcount").get<std::uint64_t>();
    const std::uint64_t at = f.blob_offset + expected;
    if (offset != expected || shape_numel(shape) != count || nbytes != (count + 7) / 8 ||
        offset + nbytes > f.blob.size()) {
      throw io::FormatError("bitset for '" + path + "' inconsistent with header", at);
    }
    Bitset keep;
    try {
      keep = Bitset::from_bytes(std::string_view(f.blob).substr(offset, nbytes), count);
    } catch (const std::invalid_argument& e) {
      throw io::FormatError("bitset for '" + path + "': " + e.what(), at + nbytes - 1);
    }
    if (keep.count() != popcount) {
      throw io::FormatError("popcount of '" + path + "' is " + std::to_string(keep.count()) + ", header says " +
                                std::to_string(popcount),
                            at);
    }
    mask.entries.emplace(path, MaskEntry{shape, std::move(keep)});
    expected = offset + nbytes;
  }
  if (expected != f.blob.size()) throw io::FormatError("trailing bytes after last bitset", f.blob_offset + expected);
  return mask;
}

void save_mask(const BinaryMask& mask, const std::filesystem::path& path) { io::write_file(path, encode_mask(mask)); }

BinaryMask load_mask(const std::filesystem::path& path) { return decode_mask(io::read_file(path)); }

}  // namespace maskft::mask
