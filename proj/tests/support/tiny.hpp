#pragma once

#include "maskft/corpus.hpp"
#include "maskft/model.hpp"
#include "maskft/rng.hpp"

namespace tiny {

inline maskft::lm::TransformerConfig config(std::size_t layers = 2) {
  maskft::lm::TransformerConfig c;
  c.n_layers = layers;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.vocab_size = 40;
  c.max_seq_len = 16;
  return c;
}

inline maskft::lm::TokenStream tokens(std::uint64_t seed, std::size_t n, std::size_t vocab = 40) {
  maskft::Rng rng(seed);
  maskft::lm::TokenStream t;
  for (std::size_t i = 0; i < n; ++i) t.ids.push_back(static_cast<int>(rng.below(vocab)));
  return t;
}

/// Byte-level model and arithmetic windows small enough for unit tests.
struct Task {
  maskft::lm::ModelParams params;
  maskft::corpus::Splits splits;
  maskft::corpus::Windows train, val, test;
};

inline const Task& arith_task() {
  static const Task t = [] {
    auto cfg = config(2);
    cfg.vocab_size = 128;
    Task out;
    out.params = maskft::lm::init_params(cfg, 7);
    maskft::corpus::DomainSpec s;
    s.n_train = 40;
    s.n_val = 12;
    s.n_test = 12;
    s.seed = 3;
    out.splits = maskft::corpus::generate(s);
    out.train = maskft::corpus::Windows::of(out.splits.train, 16);
    out.val = maskft::corpus::Windows::of(out.splits.val, 16);
    out.test = maskft::corpus::Windows::of(out.splits.test, 16);
    return out;
  }();
  return t;
}

}  // namespace tiny
