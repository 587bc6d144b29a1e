#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "maskft/baselines.hpp"
#include "support/tiny.hpp"

using namespace maskft;

namespace {

baseline::BaselineSpec spec(baseline::Kind k, double ratio, const lm::ModelParams& p, std::uint64_t seed = 1) {
  baseline::BaselineSpec s;
  s.kind = k;
  s.ratio = ratio;
  s.targets = p.linear_paths(0, 1);
  s.seed = seed;
  return s;
}

}  // namespace

TEST(Random, RemovesExactlyRoundKDPerTensor) {
  const auto p = lm::init_params(tiny::config(), 1);
  for (double k : {0.01, 0.1, 0.37, 0.9}) {
    const auto m = baseline::random_mask(p, spec(baseline::Kind::random, k, p));
    EXPECT_EQ(m.origin, "random");
    for (const auto& [path, e] : m.entries) {
      EXPECT_EQ(e.keep.size() - e.keep.count(), mask::removed_count(e.keep.size(), k)) << path;
    }
  }
}

TEST(Random, SeededAndSeedSensitive) {
  const auto p = lm::init_params(tiny::config(), 1);
  const auto a = baseline::random_mask(p, spec(baseline::Kind::random, 0.2, p, 5));
  const auto b = baseline::random_mask(p, spec(baseline::Kind::random, 0.2, p, 5));
  const auto c = baseline::random_mask(p, spec(baseline::Kind::random, 0.2, p, 6));
  EXPECT_TRUE(a.same_bits(b));
  EXPECT_FALSE(a.same_bits(c));
}

TEST(Random, RoughlyUniformOverPositions) {
  const auto p = lm::init_params(tiny::config(), 1);
  const std::string path = "layer.0.attn.q";
  std::vector<int> removed(p.at(path).size());
  const int draws = 400;
  for (int s = 0; s < draws; ++s) {
    const auto m = baseline::random_mask(p, spec(baseline::Kind::random, 0.25, p, s));
    for (std::size_t i = 0; i < removed.size(); ++i) removed[i] += !m.at(path).keep.test(i);
  }
  for (int r : removed) {
    EXPECT_GT(r, 40);  // mean 100, sd about 8.7
    EXPECT_LT(r, 160);
  }
}

TEST(L1, EqualsMagnitudeScoresThroughTheIndicator) {
  const auto p = lm::init_params(tiny::config(), 2);
  const auto s = spec(baseline::Kind::l1, 0.3, p);
  const auto m = baseline::l1_mask(p, s);
  const auto st = mask::init_scores(p, s.targets, mask::IndicatorSpec::with_ratio(0.3),
                                    mask::ScoreInit::weight_magnitude, 0);
  EXPECT_TRUE(m.same_bits(mask::apply_indicator(st)));
  EXPECT_EQ(m.origin, "l1");
}

TEST(L1, RemoveLargestFlipsTheOrder) {
  const auto p = lm::init_params(tiny::config(), 2);
  auto s = spec(baseline::Kind::l1, 0.1, p);
  s.remove_largest = true;
  const auto m = baseline::build(p, s);
  for (const auto& [path, e] : m.entries) {
    double max_kept = 0.0, min_removed = INFINITY;
    for (std::size_t i = 0; i < e.keep.size(); ++i) {
      const double a = std::abs(p.at(path)[i]);
      if (e.keep.test(i)) max_kept = std::max(max_kept, a);
      else min_removed = std::min(min_removed, a);
    }
    EXPECT_LE(max_kept, min_removed) << path;
  }
}

TEST(Spec, Validation) {
  const auto p = lm::init_params(tiny::config(), 2);
  auto s = spec(baseline::Kind::random, 0.0, p);
  EXPECT_THROW(baseline::build(p, s), std::invalid_argument);
  s = spec(baseline::Kind::random, 0.1, p);
  s.targets.clear();
  EXPECT_THROW(baseline::build(p, s), std::invalid_argument);
  s = spec(baseline::Kind::random, 0.1, p);
  s.targets = {"embed"};
  EXPECT_THROW(baseline::build(p, s), std::invalid_argument);
  EXPECT_EQ(baseline::parse_kind("l1"), baseline::Kind::l1);
  EXPECT_THROW(baseline::parse_kind("magnitude"), std::invalid_argument);
}
