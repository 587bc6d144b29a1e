#include <gtest/gtest.h>

#include <cmath>

#include "maskft/trainer.hpp"
#include "support/tiny.hpp"
#include "support/toy.hpp"

using namespace maskft;

namespace {

struct Fixture {
  lm::ModelParams params;
  corpus::Windows train, val;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    auto cfg = tiny::config(2);
    cfg.vocab_size = 128;
    Fixture out;
    out.params = lm::init_params(cfg, 7);
    corpus::DomainSpec s;
    s.n_train = 40;
    s.n_val = 12;
    s.n_test = 4;
    s.seed = 3;
    const auto sp = corpus::generate(s);
    out.train = corpus::Windows::of(sp.train, 16);
    out.val = corpus::Windows::of(sp.val, 16);
    return out;
  }();
  return f;
}

train::TrainPlan fft_plan(double lr = 1e-2) {
  train::TrainPlan p;
  p.stage = train::Stage::fft;
  p.epochs = 1;
  p.batch_size = 4;
  p.max_steps = 6;
  p.eval_every = 2;
  p.seed = 11;
  p.optimizer.lr = lr;
  return p;
}

train::TrainPlan mft_plan(mask::IndicatorSpec spec, double lr = 1e-2) {
  auto p = fft_plan(lr);
  p.stage = train::Stage::mft;
  p.first_layer = 0;
  p.last_layer = 1;
  p.indicator = spec;
  return p;
}

}  // namespace

TEST(Fft, ZeroLearningRateLeavesParamsUnchanged) {
  const auto& f = fixture();
  const auto r = train::run_fft(f.params, f.train, f.val, fft_plan(0.0));
  EXPECT_TRUE(r.final.bit_equal(f.params));
  EXPECT_FALSE(r.record.failed);
  EXPECT_EQ(r.record.train_loss.size(), 6u);
}

TEST(Fft, RecordedLossesMatchRecordedBatches) {
  const auto& f = fixture();
  const auto r = train::run_fft(f.params, f.train, f.val, fft_plan(0.0));
  ASSERT_EQ(r.record.batches.size(), r.record.train_loss.size());
  for (std::size_t s = 0; s < r.record.batches.size(); ++s) {
    const auto buf = f.train.gather(r.record.batches[s]);
    ad::Tape tape;
    const double l = lm::window_loss(tape, lm::BoundParams::frozen(tape, f.params), buf, r.record.batches[s].size())
                         .value()[0];
    EXPECT_EQ(l, r.record.train_loss[s]) << s;
  }
  EXPECT_EQ(r.record.eval_steps, (std::vector<std::size_t>{0, 2, 4, 6}));
}

TEST(Fft, DeterministicAndReducesTrainingLoss) {
  const auto& f = fixture();
  auto plan = fft_plan(3e-3);
  plan.max_steps = 0;
  plan.epochs = 4;
  const auto a = train::run_fft(f.params, f.train, f.val, plan);
  const auto b = train::run_fft(f.params, f.train, f.val, plan);
  EXPECT_TRUE(a.final.bit_equal(b.final));
  EXPECT_EQ(a.record.train_loss, b.record.train_loss);
  EXPECT_LT(a.record.best_val_loss, a.record.val_loss.front());
  EXPECT_FALSE(a.final.bit_equal(f.params));
}

TEST(Fft, BestIsTheLowestValidationCheckpoint) {
  const auto& f = fixture();
  auto plan = fft_plan(3e-3);
  const auto r = train::run_fft(f.params, f.train, f.val, plan);
  const double v = train::evaluate_loss(r.best, nullptr, f.val, plan.batch_size);
  EXPECT_EQ(v, r.record.best_val_loss);
  for (double x : r.record.val_loss) EXPECT_LE(r.record.best_val_loss, x);
}

TEST(Fft, NonFiniteLossMarksTheRecordFailed) {
  const auto& f = fixture();
  auto broken = f.params;
  broken.at("lm_head")[0] = std::nan("");
  const auto r = train::run_fft(broken, f.train, f.val, fft_plan());
  EXPECT_TRUE(r.record.failed);
  EXPECT_NE(r.record.failure.find("non-finite"), std::string::npos);
  EXPECT_TRUE(r.record.train_loss.empty());
}

TEST(Fft, StageMismatchRejected) {
  const auto& f = fixture();
  auto plan = fft_plan();
  plan.stage = train::Stage::continued_fft;
  EXPECT_THROW(train::run_fft(f.params, f.train, f.val, plan), std::invalid_argument);
  EXPECT_NO_THROW(train::run_continued_fft(f.params, f.train, f.val, plan));
}

TEST(Mft, FrozenWeightsAreNeverWritten) {
  const auto& f = fixture();
  const std::string before = io::encode_checkpoint(f.params);
  const auto r = train::run_mft(f.params, f.train, f.val, mft_plan(mask::IndicatorSpec::with_ratio(0.1)));
  EXPECT_EQ(io::encode_checkpoint(f.params), before);
  EXPECT_FALSE(r.record.failed);
  for (const auto& [path, e] : r.best_mask.entries) {
    EXPECT_EQ(e.keep.size() - e.keep.count(), mask::removed_count(e.keep.size(), 0.1)) << path;
  }
}

TEST(Mft, ZeroLearningRateKeepsTheInitialMask) {
  const auto& f = fixture();
  const auto r = train::run_mft(f.params, f.train, f.val, mft_plan(mask::IndicatorSpec::with_ratio(0.1), 0.0));
  EXPECT_TRUE(r.best_mask.same_bits(r.initial_mask));
  EXPECT_TRUE(mask::apply_indicator(r.state).same_bits(r.initial_mask));
}

TEST(Mft, AllKeepStartEqualsUnmaskedLoss) {
  const auto& f = fixture();
  auto plan = mft_plan(mask::IndicatorSpec::with_threshold(-0.035));
  plan.score_init = mask::ScoreInit::zeros;
  const auto r = train::run_mft(f.params, f.train, f.val, plan);
  EXPECT_EQ(r.initial_mask.kept(), r.initial_mask.total());
  EXPECT_EQ(r.record.val_loss.front(), train::evaluate_loss(f.params, nullptr, f.val, plan.batch_size));
  EXPECT_EQ(r.record.eval_steps.front(), 0u);
}

TEST(Mft, BestSelectionSkipsTheStartingMask) {
  const auto& f = fixture();
  const auto r = train::run_mft(f.params, f.train, f.val, mft_plan(mask::IndicatorSpec::with_ratio(0.1)));
  EXPECT_GT(r.record.best_step, 0u);
  const mask::FixedMaskOverlay ov(r.best_mask);
  EXPECT_EQ(train::evaluate_loss(f.params, &ov, f.val, 4), r.record.best_val_loss);
}

TEST(Mft, Deterministic) {
  const auto& f = fixture();
  const auto plan = mft_plan(mask::IndicatorSpec::with_ratio(0.1));
  const auto a = train::run_mft(f.params, f.train, f.val, plan);
  const auto b = train::run_mft(f.params, f.train, f.val, plan);
  EXPECT_TRUE(a.best_mask.same_bits(b.best_mask));
  EXPECT_EQ(a.record.train_loss, b.record.train_loss);
}

TEST(Mft, PlanValidation) {
  const auto& f = fixture();
  auto plan = mft_plan(mask::IndicatorSpec::with_ratio(0.1));
  plan.last_layer = 5;
  EXPECT_THROW(train::run_mft(f.params, f.train, f.val, plan), std::invalid_argument);
  plan = mft_plan(mask::IndicatorSpec::with_ratio(0.1));
  plan.indicator.reset();
  EXPECT_THROW(train::run_mft(f.params, f.train, f.val, plan), std::invalid_argument);
  plan = mft_plan(mask::IndicatorSpec::with_ratio(0.1));
  plan.first_layer = 1;
  plan.last_layer = 0;
  EXPECT_THROW(train::run_mft(f.params, f.train, f.val, plan), std::invalid_argument);
}

TEST(Mft, ToyRecoversTheCorruptedWeight) {
  int agree = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto p = toy::make_problem(seed);
    const auto best = toy::brute_force(p);
    EXPECT_EQ(best, p.corrupted) << seed;
    agree += toy::run_mft(p, seed).removed == best;
  }
  EXPECT_GE(agree, 9);
}

TEST(Optimizer, AdamFirstStepMovesByLr) {
  train::OptimizerConfig oc;
  oc.lr = 0.1;
  train::OptimizerState opt(oc);
  Tensor w = Tensor::vector({1.0, -1.0});
  const std::vector<double> g{3.0, -0.5};
  w.accumulate_grad(g);
  EXPECT_THROW(opt.update("w", w), std::logic_error);
  opt.begin_step();
  opt.update("w", w);
  EXPECT_NEAR(w[0], 0.9, 1e-7);
  EXPECT_NEAR(w[1], -0.9, 1e-7);
}

TEST(Optimizer, SgdMomentum) {
  train::OptimizerConfig oc;
  oc.kind = train::OptimizerKind::sgd_momentum;
  oc.lr = 0.5;
  oc.momentum = 0.5;
  train::OptimizerState opt(oc);
  Tensor w = Tensor::vector({0.0});
  for (int i = 0; i < 2; ++i) {
    w.zero_grad();
    w.accumulate_grad(std::vector<double>{1.0});
    opt.begin_step();
    opt.update("w", w);
  }
  EXPECT_DOUBLE_EQ(w[0], -0.5 - 0.75);
}

TEST(Plan, JsonRoundTrip) {
  auto p = mft_plan(mask::IndicatorSpec::with_threshold(-0.035));
  p.score_init = mask::ScoreInit::zeros;
  p.data_ratio = 0.5;
  p.optimizer.kind = train::OptimizerKind::sgd_momentum;
  const auto q = train::plan_from_json(train::plan_to_json(p));
  EXPECT_EQ(train::plan_to_json(q), train::plan_to_json(p));
  EXPECT_EQ(q.indicator->threshold, -0.035);
}

TEST(Record, JsonRoundTrip) {
  const auto& f = fixture();
  const auto r = train::run_fft(f.params, f.train, f.val, fft_plan());
  const auto back = train::RunRecord::from_json(r.record.to_json());
  EXPECT_EQ(back.to_json(), r.record.to_json());
  EXPECT_EQ(back.train_loss, r.record.train_loss);
}

TEST(Data, PlanWindowsSubsetIsSeeded) {
  corpus::DomainSpec s;
  s.n_train = 100;
  s.n_val = 4;
  s.n_test = 4;
  const auto sp = corpus::generate(s);
  auto plan = fft_plan();
  plan.data_ratio = 0.5;
  const auto a = train::plan_windows(sp.train, plan, 16), b = train::plan_windows(sp.train, plan, 16);
  const auto full = corpus::Windows::of(sp.train, 16);
  EXPECT_EQ(a.count(), b.count());
  EXPECT_LT(a.count(), full.count());
}
