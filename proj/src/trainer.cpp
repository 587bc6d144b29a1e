#include "maskft/trainer.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "maskft/rng.hpp"
#include "maskft/simd/kernels.hpp"

namespace maskft::train {

std::string to_string(Stage s) {
  switch (s) {
    case Stage::fft: return "fft";
    case Stage::continued_fft: return "continued_fft";
    case Stage::mft: return "mft";
  }
  return "?";
}

Stage parse_stage(const std::string& s) {
  if (s == "fft") return Stage::fft;
  if (s == "continued_fft") return Stage::continued_fft;
  if (s == "mft") return Stage::mft;
  throw std::invalid_argument("unknown stage '" + s + "'");
}

std::string to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd_momentum"; }

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd_momentum") return OptimizerKind::sgd_momentum;
  throw std::invalid_argument("unknown optimizer '" + s + "'");
}

// ---------------------------------------------------------------------------
// optimizer

void OptimizerState::update(const std::string& path, Tensor& param) {
  if (!param.has_grad()) return;
  if (step_ == 0) throw std::logic_error("OptimizerState::update before begin_step");
  const auto g = param.grad();
  const std::size_t n = param.size();
  auto& m = m_[path];
  if (m.empty()) m.assign(n, 0.0);
  if (m.size() != n) throw ShapeError("moment buffer for '" + path + "' does not match parameter");
  const auto& K = simd::active();
  if (config_.kind == OptimizerKind::adam) {
    auto& v = v_[path];
    if (v.empty()) v.assign(n, 0.0);
    const double t = static_cast<double>(step_);
    const double bc1 = 1.0 - std::pow(config_.beta1, t);
    const double bc2 = 1.0 - std::pow(config_.beta2, t);
    K.adam(n, param.data().data(), g.data(), m.data(), v.data(), config_.lr, config_.beta1, config_.beta2,
           config_.eps, bc1, bc2);
  } else {
    K.scale(n, config_.momentum, m.data(), m.data());
    K.accumulate(n, g.data(), m.data());
    K.axpy(n, -config_.lr, m.data(), param.data().data());
  }
}

const std::vector<double>* OptimizerState::first_moment(const std::string& path) const {
  const auto it = m_.find(path);
  return it == m_.end() ? nullptr : &it->second;
}

// ---------------------------------------------------------------------------
// plans and records

void TrainPlan::validate(const lm::TransformerConfig& model) const {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (eval_every < 1) throw std::invalid_argument("eval_every must be >= 1");
  if (!(data_ratio > 0.0 && data_ratio <= 1.0)) throw std::invalid_argument("data_ratio must lie in (0, 1]");
  if (!(optimizer.lr >= 0.0)) throw std::invalid_argument("learning rate must be >= 0");
  if (stage == Stage::mft) {
    if (!indicator) throw std::invalid_argument("mft plan needs an indicator spec");
    indicator->validate();
    if (first_layer > last_layer || last_layer >= model.n_layers) {
      throw std::invalid_argument("mft target layers [" + std::to_string(first_layer) + ", " +
                                  std::to_string(last_layer) + "] outside [0, " + std::to_string(model.n_layers) +
                                  ")");
    }
  } else if (indicator) {
    throw std::invalid_argument("fft plans carry no indicator spec");
  }
}

io::json plan_to_json(const TrainPlan& p) {
  io::json j{{"stage", to_string(p.stage)},
             {"epochs", p.epochs},
             {"batch_size", p.batch_size},
             {"max_steps", p.max_steps},
             {"eval_every", p.eval_every},
             {"eval_max_windows", p.eval_max_windows},
             {"seed", p.seed},
             {"data_ratio", p.data_ratio},
             {"optimizer",
              {{"kind", to_string(p.optimizer.kind)},
               {"lr", p.optimizer.lr},
               {"beta1", p.optimizer.beta1},
               {"beta2", p.optimizer.beta2},
               {"eps", p.optimizer.eps},
               {"momentum", p.optimizer.momentum}}}};
  if (p.stage == Stage::mft) {
    j["layers"] = {p.first_layer, p.last_layer};
    j["score_init"] = mask::to_string(p.score_init);
    if (p.indicator) {
      j["indicator"] = {{"mode", mask::to_string(p.indicator->mode)}};
      if (p.indicator->mode == mask::IndicatorMode::ratio) j["indicator"]["ratio"] = p.indicator->ratio;
      else j["indicator"]["threshold"] = p.indicator->threshold;
    }
  }
  return j;
}

TrainPlan plan_from_json(const io::json& j) {
  TrainPlan p;
  p.stage = parse_stage(j.at("stage").get<std::string>());
  p.epochs = j.at("epochs").get<std::size_t>();
  p.batch_size = j.at("batch_size").get<std::size_t>();
  p.max_steps = j.at("max_steps").get<std::size_t>();
  p.eval_every = j.at("eval_every").get<std::size_t>();
  p.eval_max_windows = j.at("eval_max_windows").get<std::size_t>();
  p.seed = j.at("seed").get<std::uint64_t>();
  p.data_ratio = j.at("data_ratio").get<double>();
  const auto& o = j.at("optimizer");
  p.optimizer.kind = parse_optimizer(o.at("kind").get<std::string>());
  p.optimizer.lr = o.at("lr").get<double>();
  p.optimizer.beta1 = o.at("beta1").get<double>();
  p.optimizer.beta2 = o.at("beta2").get<double>();
  p.optimizer.eps = o.at("eps").get<double>();
  p.optimizer.momentum = o.at("momentum").get<double>();
  if (p.stage == Stage::mft) {
    p.first_layer = j.at("layers").at(0).get<std::size_t>();
    p.last_layer = j.at("layers").at(1).get<std::size_t>();
    p.score_init = mask::parse_score_init(j.at("score_init").get<std::string>());
    const auto& ind = j.at("indicator");
    const auto mode = mask::parse_indicator_mode(ind.at("mode").get<std::string>());
    p.indicator = mode == mask::IndicatorMode::ratio ? mask::IndicatorSpec::with_ratio(ind.at("ratio").get<double>())
                                                     : mask::IndicatorSpec::with_threshold(ind.at("threshold").get<double>());
  }
  return p;
}

io::json RunRecord::to_json() const {
  io::json j{{"run_id", run_id},
             {"stage", stage},
             {"config", config},
             {"train_loss", train_loss},
             {"batches", batches},
             {"eval_steps", eval_steps},
             {"val_loss", val_loss},
             {"best_step", best_step},
             {"best_val_loss", best_val_loss},
             {"failed", failed},
             {"failure", failure},
             {"checkpoint_ref", checkpoint_ref},
             {"mask_ref", mask_ref},
             {"wall_clock_seconds", wall_clock_seconds},
             {"metrics", metrics}};
  return j;
}

RunRecord RunRecord::from_json(const io::json& j) {
  RunRecord r;
  r.run_id = j.at("run_id").get<std::string>();
  r.stage = j.at("stage").get<std::string>();
  r.config = j.at("config");
  r.train_loss = j.at("train_loss").get<std::vector<double>>();
  r.batches = j.at("batches").get<std::vector<std::vector<std::size_t>>>();
  r.eval_steps = j.at("eval_steps").get<std::vector<std::size_t>>();
  r.val_loss = j.at("val_loss").get<std::vector<double>>();
  r.best_step = j.at("best_step").get<std::size_t>();
  r.best_val_loss = j.at("best_val_loss").get<double>();
  r.failed = j.at("failed").get<bool>();
  r.failure = j.at("failure").get<std::string>();
  r.checkpoint_ref = j.at("checkpoint_ref").get<std::string>();
  r.mask_ref = j.at("mask_ref").get<std::string>();
  r.wall_clock_seconds = j.at("wall_clock_seconds").get<double>();
  r.metrics = j.at("metrics").get<std::map<std::string, double>>();
  return r;
}

std::string make_run_id(const std::string& stage, const io::json& config) {
  return io::sha256_hex(stage + "\n" + config.dump()).substr(0, 12);
}

// ---------------------------------------------------------------------------
// loops

corpus::Windows plan_windows(const corpus::Dataset& data, const TrainPlan& plan, std::size_t seq_len) {
  return corpus::Windows::of(corpus::subset(data, plan.data_ratio, Rng::derive(plan.seed, 77)), seq_len);
}

double evaluate_loss(const lm::ModelParams& params, const lm::WeightOverlay* overlay, const corpus::Windows& windows,
                     std::size_t batch_size, std::size_t max_windows) {
  const std::size_t n = max_windows ? std::min(max_windows, windows.count()) : windows.count();
  double total = 0.0;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t b = std::min(batch_size, n - start);
    std::vector<std::size_t> idx(b);
    for (std::size_t i = 0; i < b; ++i) idx[i] = start + i;
    const std::vector<int> buf = windows.gather(idx);
    ad::Tape tape;
    const auto bound = lm::BoundParams::frozen(tape, params);
    total += lm::window_loss(tape, bound, buf, b, overlay).value()[0] * static_cast<double>(b);
  }
  return total / static_cast<double>(n);
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Seeded per-epoch batch order over window indices.
class BatchSchedule {
 public:
  BatchSchedule(std::size_t windows, const TrainPlan& plan) : windows_(windows), plan_(plan) {}

  // Calls fn(step, batch) for every step until fn returns false.
  template <class Fn>
  void run(Fn&& fn) const {
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < plan_.epochs; ++epoch) {
      Rng rng(Rng::derive(plan_.seed, 1000 + epoch));
      const std::vector<std::size_t> perm = rng.permutation(windows_);
      for (std::size_t s = 0; s < windows_; s += plan_.batch_size) {
        if (plan_.max_steps && step >= plan_.max_steps) return;
        const std::size_t e = std::min(windows_, s + plan_.batch_size);
        std::vector<std::size_t> batch(perm.begin() + static_cast<std::ptrdiff_t>(s),
                                       perm.begin() + static_cast<std::ptrdiff_t>(e));
        if (!fn(++step, batch)) return;
      }
    }
  }

 private:
  std::size_t windows_;
  const TrainPlan& plan_;
};

FftResult full_finetune(const lm::ModelParams& start, const corpus::Windows& train, const corpus::Windows& val,
                        const TrainPlan& plan, Stage stage) {
  if (plan.stage != stage) {
    throw std::invalid_argument("plan stage '" + to_string(plan.stage) + "' passed to " + to_string(stage));
  }
  plan.validate(start.config);
  const auto t0 = Clock::now();
  FftResult res;
  res.final = start;
  for (auto& [_, t] : res.final.tensors) {
    t.zero_grad();
    t.set_requires_grad(true);
  }
  RunRecord& rec = res.record;
  rec.stage = to_string(stage);
  rec.config = plan_to_json(plan);
  rec.run_id = make_run_id(rec.stage, rec.config);

  auto evaluate = [&](std::size_t step) {
    const double v = evaluate_loss(res.final, nullptr, val, plan.batch_size, plan.eval_max_windows);
    rec.eval_steps.push_back(step);
    rec.val_loss.push_back(v);
    if (rec.val_loss.size() == 1 || v < rec.best_val_loss) {
      rec.best_val_loss = v;
      rec.best_step = step;
      res.best = res.final;
    }
  };
  evaluate(0);

  OptimizerState opt(plan.optimizer);
  std::size_t last_step = 0;
  BatchSchedule(train.count(), plan).run([&](std::size_t step, const std::vector<std::size_t>& batch) {
    const std::vector<int> buf = train.gather(batch);
    ad::Tape tape;
    const auto bound = lm::BoundParams::trainable(tape, res.final);
    const ad::Var loss = lm::window_loss(tape, bound, buf, batch.size());
    const double value = loss.value()[0];
    if (!std::isfinite(value)) {
      rec.failed = true;
      rec.failure = "non-finite training loss at step " + std::to_string(step);
      return false;
    }
    tape.backward(loss);
    opt.begin_step();
    for (auto& [path, t] : res.final.tensors) {
      opt.update(path, t);
      t.zero_grad();
    }
    rec.train_loss.push_back(value);
    rec.batches.push_back(batch);
    last_step = step;
    if (step % plan.eval_every == 0) evaluate(step);
    return true;
  });
  if (!rec.failed && last_step > 0 && last_step % plan.eval_every != 0) evaluate(last_step);

  for (auto* p : {&res.final, &res.best}) {
    for (auto& [_, t] : p->tensors) {
      t.zero_grad();
      t.set_requires_grad(false);
    }
  }
  rec.wall_clock_seconds = seconds_since(t0);
  return res;
}

}  // namespace

FftResult run_fft(const lm::ModelParams& start, const corpus::Windows& train, const corpus::Windows& val,
                  const TrainPlan& plan) {
  return full_finetune(start, train, val, plan, Stage::fft);
}

FftResult run_continued_fft(const lm::ModelParams& upper_bound, const corpus::Windows& train,
                            const corpus::Windows& val, const TrainPlan& plan) {
  return full_finetune(upper_bound, train, val, plan, Stage::continued_fft);
}

double mft_step(mask::MaskState& state, OptimizerState& opt, const MaskedLoss& loss) {
  const mask::BinaryMask current = mask::apply_indicator(state);
  for (auto& [_, c] : state.scores) {
    c.zero_grad();
    c.set_requires_grad(true);
  }
  const mask::StraightThroughOverlay overlay(state, current);
  ad::Tape tape;
  const ad::Var l = loss(tape, overlay);
  const double value = l.value()[0];
  if (!std::isfinite(value)) return value;
  tape.backward(l);
  opt.begin_step();
  for (const std::string& path : state.targets) {
    Tensor& c = state.scores.at(path);
    opt.update(path, c);
    c.zero_grad();
  }
  return value;
}

MftResult run_mft(const lm::ModelParams& frozen, const corpus::Windows& train, const corpus::Windows& val,
                  const TrainPlan& plan) {
  if (plan.stage != Stage::mft) throw std::invalid_argument("plan stage '" + to_string(plan.stage) + "' passed to mft");
  plan.validate(frozen.config);
  const std::vector<std::string> targets = frozen.linear_paths(plan.first_layer, plan.last_layer);
  if (targets.empty()) throw std::invalid_argument("mft target set is empty");
  const auto t0 = Clock::now();

  MftResult res;
  res.state = mask::init_scores(frozen, targets, *plan.indicator, plan.score_init, plan.seed);
  res.initial_mask = mask::apply_indicator(res.state);
  res.best_mask = res.initial_mask;
  RunRecord& rec = res.record;
  rec.stage = to_string(Stage::mft);
  rec.config = plan_to_json(plan);
  rec.run_id = make_run_id(rec.stage, rec.config);

  bool have_best = false;
  auto evaluate = [&](std::size_t step) {
    const mask::BinaryMask m = mask::apply_indicator(res.state);
    const mask::FixedMaskOverlay overlay(m);
    const double v = evaluate_loss(frozen, &overlay, val, plan.batch_size, plan.eval_max_windows);
    rec.eval_steps.push_back(step);
    rec.val_loss.push_back(v);
    // The starting mask is reported but is not a candidate: the selected mask
    // must come out of score training.
    if (step > 0 && (!have_best || v < rec.best_val_loss)) {
      have_best = true;
      rec.best_val_loss = v;
      rec.best_step = step;
      res.best_mask = m;
    }
  };
  evaluate(0);
  if (!have_best) rec.best_val_loss = rec.val_loss.front();

  OptimizerState opt(plan.optimizer);
  std::size_t last_step = 0;
  BatchSchedule(train.count(), plan).run([&](std::size_t step, const std::vector<std::size_t>& batch) {
    const std::vector<int> buf = train.gather(batch);
    const double value = mft_step(res.state, opt, [&](ad::Tape& tape, const lm::WeightOverlay& overlay) {
      const auto bound = lm::BoundParams::frozen(tape, frozen);
      return lm::window_loss(tape, bound, buf, batch.size(), &overlay);
    });
    if (!std::isfinite(value)) {
      rec.failed = true;
      rec.failure = "non-finite training loss at step " + std::to_string(step);
      return false;
    }
    rec.train_loss.push_back(value);
    rec.batches.push_back(batch);
    last_step = step;
    if (step % plan.eval_every == 0) evaluate(step);
    return true;
  });
  if (!rec.failed && last_step > 0 && last_step % plan.eval_every != 0) evaluate(last_step);
  for (auto& [_, c] : res.state.scores) {
    c.zero_grad();
    c.set_requires_grad(false);
  }
  res.best_mask.seed = plan.seed;
  res.best_mask.origin = "mft";
  rec.wall_clock_seconds = seconds_since(t0);
  return res;
}

}  // namespace maskft::train
