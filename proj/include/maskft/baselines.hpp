#pragma once
// Masks that are not learned: uniform random removal and removal of the
// smallest-magnitude weights. Both remove round(K * D) elements per tensor.

#include <cstdint>
#include <string>
#include <vector>

#include "maskft/mask.hpp"
#include "maskft/model.hpp"

namespace maskft::baseline {

enum class Kind { random, l1 };

std::string to_string(Kind k);
Kind parse_kind(const std::string& s);

struct BaselineSpec {
  Kind kind = Kind::random;
  double ratio = 0.1;  // removed fraction K
  std::vector<std::string> targets;
  std::uint64_t seed = 0;  // random only
  // l1: remove the largest magnitudes instead of the smallest.
  bool remove_largest = false;

  void validate() const;
};

mask::BinaryMask random_mask(const lm::ModelParams& params, const BaselineSpec& spec);
mask::BinaryMask l1_mask(const lm::ModelParams& params, const BaselineSpec& spec);
mask::BinaryMask build(const lm::ModelParams& params, const BaselineSpec& spec);

}  // namespace maskft::baseline
