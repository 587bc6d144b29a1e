#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "maskft/mask.hpp"
#include "maskft/model.hpp"
#include "support/tiny.hpp"

using namespace maskft;

TEST(Config, ValidateRejectsBadShapes) {
  auto c = tiny::config();
  c.n_heads = 3;  // 16 not divisible by 3
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = tiny::config();
  c.n_layers = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = tiny::config();
  c.vocab_size = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Params, NamedLayoutAndCount) {
  const auto p = lm::init_params(tiny::config(), 1);
  const auto c = p.config;
  for (const char* path : {"embed", "pos_embed", "final_norm", "lm_head", "layer.0.attn.q", "layer.1.mlp.down",
                           "layer.1.attn_norm", "layer.0.mlp_norm"}) {
    EXPECT_TRUE(p.contains(path)) << path;
  }
  EXPECT_EQ(p.at("layer.0.attn.q").shape(), (Shape{c.d_model, c.d_model}));
  EXPECT_EQ(p.at("layer.0.mlp.up").shape(), (Shape{c.d_model, c.d_ff}));
  EXPECT_EQ(p.at("layer.0.mlp.down").shape(), (Shape{c.d_ff, c.d_model}));
  const std::size_t d = c.d_model, f = c.d_ff, v = c.vocab_size;
  const std::size_t per_layer = 4 * d * d + 2 * d * f + 2 * d;
  EXPECT_EQ(p.parameter_count(), 2 * v * d + c.max_seq_len * d + c.n_layers * per_layer + d);
}

TEST(Params, LinearPathsCoverRequestedLayers) {
  const auto p = lm::init_params(tiny::config(4), 1);
  EXPECT_EQ(p.linear_paths(1, 2).size(), 12u);
  EXPECT_EQ(p.linear_paths(0, 3).size(), 24u);
  EXPECT_THROW(p.linear_paths(2, 1), std::out_of_range);
  EXPECT_THROW(p.linear_paths(0, 4), std::out_of_range);
  const auto parsed = lm::parse_linear_path("layer.3.mlp.up");
  ASSERT_TRUE(parsed);
  EXPECT_EQ(parsed->first, 3u);
  EXPECT_FALSE(lm::parse_linear_path("embed"));
  EXPECT_FALSE(lm::parse_linear_path("layer.x.attn.q"));
}

TEST(Params, InitIsSeeded) {
  const auto a = lm::init_params(tiny::config(), 5), b = lm::init_params(tiny::config(), 5);
  const auto c = lm::init_params(tiny::config(), 6);
  EXPECT_TRUE(a.bit_equal(b));
  EXPECT_FALSE(a.bit_equal(c));
  EXPECT_EQ(a.at("final_norm")[0], 1.0);
}

TEST(Forward, DeterministicAndShaped) {
  const auto p = lm::init_params(tiny::config(), 2);
  const auto t = tiny::tokens(3, 10);
  const Tensor a = lm::forward(p, t), b = lm::forward(p, t);
  EXPECT_EQ(a.shape(), (Shape{10, 40}));
  EXPECT_TRUE(a.bit_equal(b));
}

TEST(Forward, CausalPrefixLogitsIgnoreTheFuture) {
  auto p = lm::init_params(tiny::config(), 2);
  for (auto& [_, t] : p.tensors) {
    for (double& v : t.data()) v *= 20.0;
  }
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto t = tiny::tokens(seed, 12);
    const Tensor full = lm::forward(p, t);
    for (std::size_t cut = 1; cut < 12; ++cut) {
      auto changed = t;
      for (std::size_t i = cut; i < 12; ++i) changed.ids[i] = (changed.ids[i] + 7) % 40;
      const Tensor other = lm::forward(p, changed);
      for (std::size_t r = 0; r < cut; ++r) {
        for (std::size_t c = 0; c < 40; ++c) ASSERT_EQ(full.at(r, c), other.at(r, c)) << "cut " << cut;
      }
    }
  }
}

TEST(Forward, UntrainedLossNearLogVocab) {
  const auto p = lm::init_params(tiny::config(), 2);
  const double l = lm::autoregressive_loss(p, tiny::tokens(1, 16)).item();
  EXPECT_NEAR(l, std::log(40.0), 0.1);
}

TEST(Forward, RejectsBadInputs) {
  const auto p = lm::init_params(tiny::config(), 2);
  EXPECT_THROW(lm::forward(p, tiny::tokens(1, 17)), std::length_error);
  lm::TokenStream bad;
  bad.ids = {1, 40};
  EXPECT_THROW(lm::forward(p, bad), std::exception);
  EXPECT_THROW(lm::forward(p, lm::TokenStream{}), std::exception);
  EXPECT_THROW(lm::autoregressive_loss(p, tiny::tokens(1, 1)), std::exception);
}

TEST(Forward, AllKeepMaskMatchesUnmaskedBitForBit) {
  const auto p = lm::init_params(tiny::config(), 4);
  mask::BinaryMask m;
  for (const auto& path : p.linear_paths(0, 1)) m.entries.emplace(path, mask::MaskEntry{p.at(path).shape(), mask::Bitset(p.at(path).size(), true)});
  const mask::FixedMaskOverlay ov(m);
  const auto t = tiny::tokens(8, 14);
  EXPECT_TRUE(lm::forward(p, t).bit_equal(lm::forward(p, t, &ov)));
}

TEST(Forward, ZeroingALayerChangesOutput) {
  const auto p = lm::init_params(tiny::config(), 4);
  mask::BinaryMask m;
  m.entries.emplace("layer.0.mlp.up", mask::MaskEntry{p.at("layer.0.mlp.up").shape(), mask::Bitset(p.at("layer.0.mlp.up").size(), false)});
  const mask::FixedMaskOverlay ov(m);
  const auto t = tiny::tokens(8, 14);
  EXPECT_FALSE(lm::forward(p, t).bit_equal(lm::forward(p, t, &ov)));
}

TEST(Overlay, UnknownOrNonMaskablePathRejected) {
  const auto p = lm::init_params(tiny::config(), 4);
  for (const char* path : {"embed", "layer.9.attn.q"}) {
    mask::BinaryMask m;
    m.entries.emplace(path, mask::MaskEntry{{2, 2}, mask::Bitset(4, true)});
    const mask::FixedMaskOverlay ov(m);
    EXPECT_THROW(lm::check_overlay(p, ov), std::invalid_argument) << path;
  }
}

TEST(Generate, GreedyIsDeterministicAndSlides) {
  const auto p = lm::init_params(tiny::config(), 9);
  const auto prompt = tiny::tokens(2, 5);
  const auto a = lm::generate(p, prompt, 30);
  const auto b = lm::generate(p, prompt, 30);
  EXPECT_EQ(a.ids, b.ids);
  EXPECT_EQ(a.ids.size(), 35u);
  EXPECT_TRUE(std::equal(prompt.ids.begin(), prompt.ids.end(), a.ids.begin()));
  EXPECT_THROW(lm::generate(p, prompt, 0), std::invalid_argument);
  EXPECT_THROW(lm::generate(p, tiny::tokens(2, 17), 1), std::length_error);
}

TEST(Generate, FirstTokenIsArgmaxOfLastLogits) {
  const auto p = lm::init_params(tiny::config(), 9);
  const auto prompt = tiny::tokens(4, 6);
  const Tensor l = lm::forward(p, prompt);
  std::size_t best = 0;
  for (std::size_t c = 1; c < 40; ++c) {
    if (l.at(5, c) > l.at(5, best)) best = c;
  }
  EXPECT_EQ(lm::generate(p, prompt, 1).ids.at(6), static_cast<int>(best));
}

TEST(TokenStream, BytesRoundTrip) {
  const std::string s = "12+34=46\n";
  const auto t = lm::TokenStream::from_bytes(s);
  EXPECT_EQ(t.ids.size(), s.size());
  EXPECT_EQ(t.to_bytes(), s);
  EXPECT_NO_THROW(t.validate(256));
  EXPECT_THROW(t.validate(50), std::exception);
}
