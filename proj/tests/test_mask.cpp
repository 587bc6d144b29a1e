#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "maskft/mask.hpp"
#include "support/tiny.hpp"

using namespace maskft;
using mask::Bitset;

namespace {

std::vector<double> random_scores(Rng& rng, std::size_t n, bool with_ties) {
  std::vector<double> s(n);
  for (double& v : s) v = with_ties ? static_cast<double>(rng.below(5)) : rng.normal();
  return s;
}

// Scalar reference: keep bit i is off iff fewer than r elements precede it in
// removal order.
Bitset ratio_by_rank(const std::vector<double>& s, double k) {
  const std::size_t r = mask::removed_count(s.size(), k);
  Bitset keep(s.size(), true);
  for (std::size_t i = 0; i < s.size(); ++i) {
    std::size_t ahead = 0;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (s[j] < s[i] || (s[j] == s[i] && j > i)) ++ahead;
    }
    if (ahead < r) keep.set(i, false);
  }
  return keep;
}

}  // namespace

TEST(Indicator, RatioRemovesExactlyRoundKD) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(300);
    const double k = rng.uniform(0.001, 0.999);
    const auto s = random_scores(rng, n, trial % 2 == 0);
    const Bitset keep = mask::ratio_indicator(s, k);
    ASSERT_EQ(n - keep.count(), static_cast<std::size_t>(std::llround(k * static_cast<double>(n))));
  }
}

TEST(Indicator, RatioRemovesTheLowestScoresWithIndexTieBreak) {
  Rng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.below(80);
    const double k = rng.uniform(0.01, 0.99);
    const auto s = random_scores(rng, n, trial % 2 == 0);
    ASSERT_EQ(mask::ratio_indicator(s, k), ratio_by_rank(s, k)) << trial;
  }
}

TEST(Indicator, TiesKeepTheLowerIndex) {
  const std::vector<double> s(10, 1.0);
  const Bitset keep = mask::ratio_indicator(s, 0.3);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(keep.test(i), i < 7) << i;
}

TEST(Indicator, RatioRejectsNaN) {
  const std::vector<double> s{1.0, std::nan(""), 0.0};
  EXPECT_THROW(mask::ratio_indicator(s, 0.5), std::domain_error);
}

TEST(Indicator, ThresholdIsMonotoneInT) {
  Rng rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    const auto s = random_scores(rng, 1 + rng.below(200), trial % 3 == 0);
    std::vector<double> ts(8);
    for (double& t : ts) t = rng.uniform(-2.0, 2.0);
    std::sort(ts.begin(), ts.end());
    std::size_t prev = s.size() + 1;
    Bitset prev_bits;
    for (double t : ts) {
      const Bitset keep = mask::threshold_indicator(s, t);
      ASSERT_LE(keep.count(), prev);
      if (prev_bits.size() != 0) {
        for (std::size_t i = 0; i < s.size(); ++i) ASSERT_TRUE(!keep.test(i) || prev_bits.test(i));
      }
      prev = keep.count();
      prev_bits = keep;
    }
  }
}

TEST(Indicator, ThresholdIsStrict) {
  const std::vector<double> s{-0.035, -0.034, -0.036, 0.0};
  const Bitset keep = mask::threshold_indicator(s, -0.035);
  EXPECT_FALSE(keep.test(0));
  EXPECT_TRUE(keep.test(1));
  EXPECT_FALSE(keep.test(2));
  EXPECT_TRUE(keep.test(3));
}

TEST(Indicator, SpecValidation) {
  EXPECT_THROW(mask::IndicatorSpec::with_ratio(0.0).validate(), std::invalid_argument);
  EXPECT_THROW(mask::IndicatorSpec::with_ratio(1.0).validate(), std::invalid_argument);
  EXPECT_THROW(mask::IndicatorSpec::with_threshold(INFINITY).validate(), std::invalid_argument);
  EXPECT_NO_THROW(mask::IndicatorSpec::with_threshold(-0.035).validate());
  EXPECT_EQ(mask::parse_indicator_mode("threshold"), mask::IndicatorMode::threshold);
  EXPECT_EQ(mask::parse_score_init(mask::to_string(mask::ScoreInit::zeros)), mask::ScoreInit::zeros);
  EXPECT_THROW(mask::parse_score_init("ones"), std::invalid_argument);
}

TEST(Bitset, PacksLsbFirst) {
  Bitset b(10);
  b.set(0, true);
  b.set(9, true);
  const std::string bytes = b.to_bytes();
  ASSERT_EQ(bytes.size(), 2u);
  EXPECT_EQ(static_cast<unsigned char>(bytes[0]), 0x01);
  EXPECT_EQ(static_cast<unsigned char>(bytes[1]), 0x02);
  EXPECT_EQ(Bitset::from_bytes(bytes, 10), b);
  EXPECT_THROW(Bitset::from_bytes(std::string("\x01\x04", 2), 10), std::invalid_argument);  // padding bit
  EXPECT_THROW(Bitset::from_bytes(bytes, 17), std::invalid_argument);
}

TEST(Bitset, CountAcrossWords) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng.below(500);
    Bitset b(n);
    std::size_t expect = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const bool v = rng.below(2) == 1;
      b.set(i, v);
      expect += v;
    }
    EXPECT_EQ(b.count(), expect);
    EXPECT_EQ(Bitset::from_bytes(b.to_bytes(), n), b);
  }
}

TEST(Scores, InitModes) {
  const auto p = lm::init_params(tiny::config(), 1);
  const auto paths = p.linear_paths(0, 0);
  const auto mag = mask::init_scores(p, paths, mask::IndicatorSpec::with_ratio(0.1), mask::ScoreInit::weight_magnitude, 0);
  for (const auto& path : paths) {
    for (std::size_t i = 0; i < p.at(path).size(); ++i) ASSERT_EQ(mag.scores.at(path)[i], std::abs(p.at(path)[i]));
  }
  const auto u1 = mask::init_scores(p, paths, mask::IndicatorSpec::with_ratio(0.1), mask::ScoreInit::uniform_random, 4);
  const auto u2 = mask::init_scores(p, paths, mask::IndicatorSpec::with_ratio(0.1), mask::ScoreInit::uniform_random, 4);
  EXPECT_TRUE(u1.scores.at(paths[0]).bit_equal(u2.scores.at(paths[0])));
  EXPECT_THROW(mask::init_scores(p, paths, mask::IndicatorSpec::with_ratio(0.1), mask::ScoreInit::zeros, 0),
               std::invalid_argument);
  EXPECT_THROW(mask::init_scores(p, {"layer.7.attn.q"}, mask::IndicatorSpec::with_ratio(0.1),
                                 mask::ScoreInit::weight_magnitude, 0),
               std::out_of_range);
}

TEST(Scores, ZerosBelowNegativeThresholdKeepEverything) {
  const auto p = lm::init_params(tiny::config(), 1);
  const auto st = mask::init_scores(p, p.linear_paths(0, 1), mask::IndicatorSpec::with_threshold(-0.035),
                                    mask::ScoreInit::zeros, 0);
  const auto m = mask::apply_indicator(st);
  EXPECT_EQ(m.kept(), m.total());
  EXPECT_EQ(m.sparsity(), 0.0);
}

TEST(Scores, ApplyIndicatorPerTensor) {
  const auto p = lm::init_params(tiny::config(), 1);
  const auto st = mask::init_scores(p, p.linear_paths(0, 1), mask::IndicatorSpec::with_ratio(0.1),
                                    mask::ScoreInit::weight_magnitude, 0);
  const auto m = mask::apply_indicator(st);
  ASSERT_EQ(m.entries.size(), 12u);
  for (const auto& [path, e] : m.entries) {
    EXPECT_EQ(e.keep.size() - e.keep.count(), mask::removed_count(e.keep.size(), 0.1)) << path;
    // Magnitude scores remove the smallest weights.
    double max_removed = 0.0, min_kept = INFINITY;
    for (std::size_t i = 0; i < e.keep.size(); ++i) {
      const double a = std::abs(p.at(path)[i]);
      if (e.keep.test(i)) min_kept = std::min(min_kept, a);
      else max_removed = std::max(max_removed, a);
    }
    EXPECT_LE(max_removed, min_kept) << path;
  }
}

TEST(Ste, BackwardIsGradTimesTheta) {
  const Tensor g = Tensor::matrix({{1, -2}, {0.5, 3}});
  const Tensor th = Tensor::matrix({{2, 2}, {-4, 0}});
  const Tensor out = mask::ste_backward(g, th);
  EXPECT_EQ(out.values(), (std::vector<double>{2, -4, -2, 0}));
  EXPECT_THROW(mask::ste_backward(g, Tensor({3})), ShapeError);
}

TEST(Ste, RemovedElementsStillReceiveScoreGradient) {
  ad::Tape tape;
  Tensor th = Tensor::matrix({{1, 2}, {3, 4}});
  Tensor c({2, 2});
  c.set_requires_grad(true);
  Bitset keep(4, true);
  keep.set(1, false);
  const ad::Var w = mask::ste_masked_weight(tape.view(th), tape.param(c), keep);
  EXPECT_EQ(w.value().values(), (std::vector<double>{1, 0, 3, 4}));
  tape.backward(ad::sum(w));
  EXPECT_EQ(std::vector<double>(c.grad().begin(), c.grad().end()), (std::vector<double>{1, 2, 3, 4}));
}

// At binary scores (c in {0,1}, T = 0.5) the straight-through forward equals
// the substituted forward, so the score gradients must coincide.
TEST(Ste, MatchesSubstitutedGradientAtBinaryScores) {
  Rng rng(21);
  for (int trial = 0; trial < 5; ++trial) {
    auto p = lm::init_params(tiny::config(), 30 + trial);
    const auto targets = p.linear_paths(0, 1);
    auto st = mask::init_scores(p, targets, mask::IndicatorSpec::with_threshold(0.5), mask::ScoreInit::zeros, 0);
    for (auto& [_, c] : st.scores) {
      for (double& v : c.data()) v = rng.below(10) == 0 ? 0.0 : 1.0;
    }
    const auto bits = mask::apply_indicator(st);
    const auto toks = tiny::tokens(100 + trial, 2 * 9);

    auto grads_with = [&](const lm::WeightOverlay& ov) {
      for (auto& [_, c] : st.scores) {
        c.zero_grad();
        c.set_requires_grad(true);
      }
      ad::Tape tape;
      const auto bound = lm::BoundParams::frozen(tape, p);
      tape.backward(lm::window_loss(tape, bound, toks.ids, 2, &ov));
      std::map<std::string, std::vector<double>> out;
      for (auto& [path, c] : st.scores) out[path].assign(c.grad().begin(), c.grad().end());
      return out;
    };
    const mask::StraightThroughOverlay ste(st, bits);
    const mask::SubstitutedOverlay sub(st);
    const auto a = grads_with(ste), b = grads_with(sub);
    for (const auto& path : targets) {
      for (std::size_t i = 0; i < a.at(path).size(); ++i) {
        ASSERT_NEAR(a.at(path)[i], b.at(path)[i], 1e-12) << path << "[" << i << "]";
      }
    }
  }
}

TEST(MaskedLinear, MatchesExplicitProduct) {
  Rng rng(5);
  Tensor x({3, 4}), th({4, 5}), c({4, 5});
  for (double& v : x.data()) v = rng.normal();
  for (double& v : th.data()) v = rng.normal();
  for (double& v : c.data()) v = rng.normal();
  const auto spec = mask::IndicatorSpec::with_threshold(0.0);
  const Tensor y = mask::masked_linear_forward(x, th, c, spec);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 5; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < 4; ++k) acc += x.at(i, k) * (c.at(k, j) > 0.0 ? th.at(k, j) : 0.0);
      EXPECT_NEAR(y.at(i, j), acc, 1e-12);
    }
  }
}
