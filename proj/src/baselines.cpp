#include "maskft/baselines.hpp"

#include <cmath>
#include <stdexcept>

#include "maskft/rng.hpp"

namespace maskft::baseline {

std::string to_string(Kind k) { return k == Kind::random ? "random" : "l1"; }

Kind parse_kind(const std::string& s) {
  if (s == "random") return Kind::random;
  if (s == "l1") return Kind::l1;
  throw std::invalid_argument("unknown baseline kind '" + s + "'");
}

void BaselineSpec::validate() const {
  if (!(ratio > 0.0 && ratio < 1.0)) throw std::invalid_argument("baseline ratio K must lie in (0, 1)");
  if (targets.empty()) throw std::invalid_argument("baseline has no targets");
  for (const std::string& path : targets) {
    if (!lm::parse_linear_path(path)) throw std::invalid_argument("baseline target '" + path + "' is not a maskable linear");
  }
}

mask::BinaryMask random_mask(const lm::ModelParams& params, const BaselineSpec& spec) {
  spec.validate();
  mask::BinaryMask out;
  out.spec = mask::IndicatorSpec::with_ratio(spec.ratio);
  out.seed = spec.seed;
  out.origin = "random";
  Rng rng(spec.seed);
  for (const std::string& path : spec.targets) {
    const Tensor& theta = params.at(path);
    const std::size_t n = theta.size();
    const std::size_t r = mask::removed_count(n, spec.ratio);
    // Partial Fisher-Yates: the first r slots are a uniform r-subset.
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = 0; i < r; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
      std::swap(idx[i], idx[j]);
    }
    mask::Bitset keep(n, true);
    for (std::size_t i = 0; i < r; ++i) keep.set(idx[i], false);
    out.entries.emplace(path, mask::MaskEntry{theta.shape(), std::move(keep)});
  }
  return out;
}

mask::BinaryMask l1_mask(const lm::ModelParams& params, const BaselineSpec& spec) {
  spec.validate();
  mask::BinaryMask out;
  out.spec = mask::IndicatorSpec::with_ratio(spec.ratio);
  out.seed = spec.seed;
  out.origin = "l1";
  for (const std::string& path : spec.targets) {
    const Tensor& theta = params.at(path);
    std::vector<double> magnitude(theta.size());
    for (std::size_t i = 0; i < theta.size(); ++i) {
      magnitude[i] = spec.remove_largest ? -std::abs(theta[i]) : std::abs(theta[i]);
    }
    out.entries.emplace(path, mask::MaskEntry{theta.shape(), mask::ratio_indicator(magnitude, spec.ratio)});
  }
  return out;
}

mask::BinaryMask build(const lm::ModelParams& params, const BaselineSpec& spec) {
  return spec.kind == Kind::random ? random_mask(params, spec) : l1_mask(params, spec);
}

}  // namespace maskft::baseline
