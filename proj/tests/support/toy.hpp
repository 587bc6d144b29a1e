#pragma once
// Four-weight linear regression with one adversarially corrupted weight: the
// clean model ignores that feature and the corruption gives it a large value.
// Removing exactly one weight (K = 0.25) recovers the clean model, and with
// four candidates the best single removal is found by enumeration.

#include <cmath>
#include <limits>
#include <vector>

#include "maskft/autodiff.hpp"
#include "maskft/mask.hpp"
#include "maskft/rng.hpp"
#include "maskft/trainer.hpp"

namespace toy {

using namespace maskft;

struct Problem {
  Tensor x;      // [n, 4]
  Tensor y;      // [n, 1]
  Tensor theta;  // [4, 1], clean weights with one corrupted entry
  std::size_t corrupted = 0;
};

inline Problem make_problem(std::uint64_t seed, std::size_t n = 64) {
  Rng rng(seed);
  Problem p;
  std::vector<double> w(4);
  for (double& v : w) v = rng.normal();
  p.corrupted = static_cast<std::size_t>(rng.below(4));
  w[p.corrupted] = 0.0;
  p.theta = Tensor({4, 1});
  for (std::size_t i = 0; i < 4; ++i) p.theta[i] = w[i];
  // Larger than any clean weight, so magnitude scores start by keeping it.
  const double bump = 3.0 + 2.0 * rng.uniform();
  p.theta[p.corrupted] = rng.below(2) == 0 ? bump : -bump;
  p.x = Tensor({n, 4});
  p.y = Tensor({n, 1});
  for (std::size_t r = 0; r < n; ++r) {
    double t = 0.0;
    for (std::size_t c = 0; c < 4; ++c) {
      p.x.at(r, c) = rng.normal();
      t += p.x.at(r, c) * w[c];
    }
    p.y[r] = t;
  }
  return p;
}

inline ad::Var loss_with(ad::Tape& tape, const Problem& p, ad::Var weight) {
  const ad::Var pred = ad::matmul(tape.view(p.x), weight);
  const ad::Var diff = pred - tape.view(p.y);
  return ad::mean(diff * diff);
}

inline double loss_of(const Problem& p, const mask::Bitset& keep) {
  ad::Tape tape;
  Tensor w = p.theta;
  for (std::size_t i = 0; i < 4; ++i) {
    if (!keep.test(i)) w[i] = 0.0;
  }
  return loss_with(tape, p, tape.constant(w)).value()[0];
}

/// Index whose removal gives the lowest loss (lowest index on ties).
inline std::size_t brute_force(const Problem& p) {
  std::size_t best = 0;
  double best_loss = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < 4; ++k) {
    mask::Bitset keep(4, true);
    keep.set(k, false);
    const double l = loss_of(p, keep);
    if (l < best_loss) {
      best_loss = l;
      best = k;
    }
  }
  return best;
}

struct MftOutcome {
  std::size_t removed = 0;
  mask::BinaryMask mask;
};

/// Straight-through training of the scores with K = 0.25. SGD with momentum:
/// Adam rescales the sampling noise on the clean scores to full-size steps.
inline MftOutcome run_mft(const Problem& p, std::uint64_t seed, std::size_t steps = 200, double lr = 3e-3) {
  lm::ModelParams params;
  params.tensors.emplace("w", p.theta);
  mask::MaskState state =
      mask::init_scores(params, {"w"}, mask::IndicatorSpec::with_ratio(0.25), mask::ScoreInit::weight_magnitude, seed);
  train::OptimizerConfig oc;
  oc.kind = train::OptimizerKind::sgd_momentum;
  oc.lr = lr;
  train::OptimizerState opt(oc);
  for (std::size_t s = 0; s < steps; ++s) {
    train::mft_step(state, opt, [&](ad::Tape& tape, const lm::WeightOverlay& overlay) {
      return loss_with(tape, p, overlay.effective_weight(tape, "w", tape.view(p.theta)));
    });
  }
  MftOutcome out;
  out.mask = mask::apply_indicator(state);
  const auto& keep = out.mask.at("w").keep;
  for (std::size_t i = 0; i < 4; ++i) {
    if (!keep.test(i)) out.removed = i;
  }
  return out;
}

}  // namespace toy
