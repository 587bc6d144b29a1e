// Acceptance suite: one PASS/FAIL line per criterion A1..A9.
//
//   acceptance --workdir DIR [--only A5,A6] [--seeds 5]
//
// Exit status is 0 only when every selected criterion passes. Per-seed numbers
// go to DIR/acceptance_report.json.

#include <algorithm>
#include <chrono>
#include <cstring>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ranges.h>

#include "maskft/baselines.hpp"
#include "maskft/config.hpp"
#include "maskft/eval.hpp"
#include "maskft/gradcheck.hpp"
#include "maskft/io.hpp"
#include "maskft/mask.hpp"
#include "maskft/pipeline.hpp"
#include "maskft/trainer.hpp"
#include "support/grad_cases.hpp"
#include "support/tiny.hpp"
#include "support/toy.hpp"

using namespace maskft;
namespace fs = std::filesystem;
using io::json;

namespace {

// Pinned tolerances and budgets.
constexpr double kGradRelErr = 1e-4;
constexpr int kGradInstances = 20;
constexpr double kGradBudgetSeconds = 120.0;
constexpr int kMaskConfigs = 10;
constexpr std::size_t kFrozenSteps = 200;
constexpr int kToySeeds = 10;
constexpr int kToyRequired = 9;
constexpr double kToyBudgetSeconds = 60.0;
constexpr int kProtocolRequired = 4;  // of 5 seeds
constexpr double kSeedBudgetSeconds = 30.0 * 60.0;
constexpr double kCenterTolerance = 1e-10;

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  bool pass = false;
  std::string detail;
};

// ---------------------------------------------------------------------------

Verdict a1_gradients() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string worst_family;
  const auto families = gradcases::families();
  for (const auto& fam : families) {
    Rng rng(Rng::derive(1234, std::hash<std::string>{}(fam.name)));
    for (int i = 0; i < kGradInstances; ++i) {
      const auto inst = fam.make(rng);
      const double err = ad::finite_difference_check(inst.f, inst.x);
      if (!(err <= worst)) {
        worst = err;
        worst_family = fam.name;
      }
    }
  }
  const double secs = since(t0);
  return {worst < kGradRelErr && secs < kGradBudgetSeconds,
          fmt::format("{} families x {} instances, max rel err {:.2e} ({}) < {:.0e}, {:.2f} s", families.size(),
                      kGradInstances, worst, worst_family, kGradRelErr, secs)};
}

Verdict a2_mask_exactness() {
  Rng rng(2024);
  std::size_t tensors = 0, mismatches = 0, monotone_violations = 0;
  for (int cfg_i = 0; cfg_i < kMaskConfigs; ++cfg_i) {
    lm::TransformerConfig c;
    c.n_layers = 1 + rng.below(4);
    c.n_heads = 1 + rng.below(4);
    c.d_model = c.n_heads * (2 + rng.below(6));
    c.d_ff = 8 + rng.below(40);
    c.vocab_size = 32;
    c.max_seq_len = 8;
    const auto p = lm::init_params(c, rng.next_u64());
    const std::size_t first = rng.below(c.n_layers);
    const std::size_t last = first + rng.below(c.n_layers - first);
    const auto targets = p.linear_paths(first, last);
    const double k = rng.uniform(0.01, 0.99);
    const auto init = rng.below(2) == 0 ? mask::ScoreInit::weight_magnitude : mask::ScoreInit::uniform_random;
    const auto st = mask::init_scores(p, targets, mask::IndicatorSpec::with_ratio(k), init, rng.next_u64());
    const auto m = mask::apply_indicator(st);
    for (const auto& [path, e] : m.entries) {
      ++tensors;
      const auto d = static_cast<double>(e.keep.size());
      mismatches += e.keep.size() - e.keep.count() != static_cast<std::size_t>(std::llround(k * d));
    }
    std::vector<double> ts(6);
    for (double& t : ts) t = rng.uniform(-0.05, 0.05);
    std::sort(ts.begin(), ts.end());
    for (const auto& path : targets) {
      const auto& scores = st.scores.at(path);
      mask::Bitset prev(scores.size(), true);
      for (double t : ts) {
        const auto keep = mask::threshold_indicator(scores.data(), t);
        for (std::size_t i = 0; i < keep.size(); ++i) monotone_violations += keep.test(i) && !prev.test(i);
        prev = keep;
      }
    }
  }
  return {mismatches == 0 && monotone_violations == 0,
          fmt::format("{} configs, {} tensors: {} ratio popcount mismatches, {} threshold monotonicity violations",
                      kMaskConfigs, tensors, mismatches, monotone_violations)};
}

Verdict a3_frozen_weights() {
  const auto& t = tiny::arith_task();
  const std::string before = io::encode_checkpoint(t.params);
  const auto snapshot = t.params;
  train::TrainPlan plan;
  plan.stage = train::Stage::mft;
  plan.epochs = 1000;
  plan.max_steps = kFrozenSteps;
  plan.batch_size = 4;
  plan.eval_every = 50;
  plan.optimizer.lr = 1e-2;
  plan.first_layer = 0;
  plan.last_layer = 1;
  plan.indicator = mask::IndicatorSpec::with_ratio(0.1);
  const auto r = train::run_mft(t.params, t.train, t.val, plan);
  std::size_t changed = 0;
  for (const auto& [path, tensor] : t.params.tensors) changed += !tensor.bit_equal(snapshot.at(path));
  const bool bytes_same = io::encode_checkpoint(t.params) == before;
  const bool mask_moved = !r.best_mask.same_bits(r.initial_mask);

  // All-keep start: threshold mode with zero scores and T < 0.
  auto keep_all = plan;
  keep_all.max_steps = 1;
  keep_all.indicator = mask::IndicatorSpec::with_threshold(-0.035);
  keep_all.score_init = mask::ScoreInit::zeros;
  const auto k = train::run_mft(t.params, t.train, t.val, keep_all);
  const double fft_loss = train::evaluate_loss(t.params, nullptr, t.val, keep_all.batch_size);
  const double step0 = k.record.val_loss.front();
  const bool zero_ulp = std::memcmp(&fft_loss, &step0, sizeof(double)) == 0;
  return {r.record.train_loss.size() == kFrozenSteps && changed == 0 && bytes_same && zero_ulp,
          fmt::format("{} steps, {} tensors changed, checkpoint bytes {}, mask {}; all-keep step-0 loss {:.17g} vs "
                      "unmasked {:.17g} ({} ulp)",
                      r.record.train_loss.size(), changed, bytes_same ? "identical" : "DIFFER",
                      mask_moved ? "moved" : "unchanged", step0, fft_loss, zero_ulp ? 0 : 1)};
}

Verdict a4_toy_oracle() {
  const auto t0 = Clock::now();
  int agree = 0;
  for (int s = 0; s < kToySeeds; ++s) {
    const auto p = toy::make_problem(static_cast<std::uint64_t>(s));
    agree += toy::run_mft(p, static_cast<std::uint64_t>(s)).removed == toy::brute_force(p);
  }
  const double secs = since(t0);
  return {agree >= kToyRequired && secs < kToyBudgetSeconds,
          fmt::format("MFT matches exhaustive search in {}/{} seeds (need {}), {:.2f} s", agree, kToySeeds,
                      kToyRequired, secs)};
}

// ---------------------------------------------------------------------------
// protocol runs shared by A5, A6, A8

struct SeedRun {
  std::uint64_t seed = 0;
  fs::path dir;
  double seconds = 0.0;
  int exit_code = 0;
  std::string error;
  std::map<std::string, double> test_loss;  // method -> primary-domain loss
  double center_mft = NAN, center_continued = NAN;
};

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(line);
  while (std::getline(in, cur, ',')) out.push_back(cur);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::map<std::string, double> read_comparison(const fs::path& csv, const std::string& domain) {
  std::istringstream in(io::read_file(csv));
  std::string line;
  std::getline(in, line);
  const auto header = split_csv(line);
  const auto col = std::find(header.begin(), header.end(), "loss_" + domain) - header.begin();
  std::map<std::string, double> out;
  while (std::getline(in, line)) {
    const auto f = split_csv(line);
    if (static_cast<std::size_t>(col) < f.size() && !f[col].empty()) out[f[0]] = std::stod(f[col]);
  }
  return out;
}

std::vector<SeedRun> protocol_runs(const fs::path& config_path, const fs::path& workdir, int seeds) {
  std::vector<SeedRun> runs;
  auto cfg = config::load(config_path);
  cfg.output_dir = workdir / "protocol";
  for (int s = 0; s < seeds; ++s) {
    SeedRun sr;
    sr.seed = static_cast<std::uint64_t>(s);
    config::apply_seed(cfg, sr.seed);
    std::ostringstream log;
    const auto t0 = Clock::now();
    const auto out = pipeline::run(cfg, log);
    sr.seconds = since(t0);
    sr.dir = out.run_dir;
    sr.exit_code = out.exit_code;
    sr.error = out.error;
    if (out.exit_code == 0) {
      sr.test_loss = read_comparison(out.run_dir / "tables" / "comparison.csv", cfg.primary_domain);
      const json centers = json::parse(io::read_file(out.run_dir / "surfaces" / "centers.json"));
      sr.center_mft = centers.at("mft").at("center_test").get<double>();
      sr.center_continued = centers.at("continued_fft").at("center_test").get<double>();
    }
    std::cerr << fmt::format("  seed {}: {:.1f} s{}\n", s, sr.seconds, out.exit_code ? " FAILED: " + out.error : "");
    runs.push_back(std::move(sr));
  }
  return runs;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

bool runs_ok(const std::vector<SeedRun>& runs, std::string& why) {
  for (const auto& r : runs) {
    if (r.exit_code != 0) {
      why = fmt::format("seed {} failed: {}", r.seed, r.error);
      return false;
    }
  }
  return !runs.empty();
}

Verdict a5_protocol(const std::vector<SeedRun>& runs) {
  std::string why;
  if (!runs_ok(runs, why)) return {false, why};
  std::vector<double> mft, ub, cont;
  int mft_beats_cont = 0;
  double slowest = 0.0;
  for (const auto& r : runs) {
    mft.push_back(r.test_loss.at("mft"));
    ub.push_back(r.test_loss.at("fft_upper_bound"));
    cont.push_back(r.test_loss.at("continued_fft"));
    mft_beats_cont += mft.back() < cont.back();
    slowest = std::max(slowest, r.seconds);
  }
  const double m = median(mft), u = median(ub), c = median(cont);
  const bool pass = m < u && u <= c && mft_beats_cont >= kProtocolRequired && slowest < kSeedBudgetSeconds;
  return {pass, fmt::format("median test loss MFT {:.4f} < upper bound {:.4f} <= continued FFT {:.4f}: {}; MFT beats "
                            "continued FFT in {}/{} seeds (need {}); slowest seed {:.0f} s",
                            m, u, c, (m < u && u <= c) ? "yes" : "no", mft_beats_cont, runs.size(),
                            kProtocolRequired, slowest)};
}

Verdict a6_baselines(const std::vector<SeedRun>& runs) {
  std::string why;
  if (!runs_ok(runs, why)) return {false, why};
  int random_worse = 0, l1_worse = 0;
  for (const auto& r : runs) {
    const double ub = r.test_loss.at("fft_upper_bound");
    random_worse += r.test_loss.at("random_mask") > ub;
    l1_worse += r.test_loss.at("l1_mask") > ub;
  }
  return {random_worse >= kProtocolRequired && l1_worse >= kProtocolRequired,
          fmt::format("held-out loss above the upper bound: random mask {}/{}, L1 mask {}/{} seeds (need {} each)",
                      random_worse, runs.size(), l1_worse, runs.size(), kProtocolRequired)};
}

Verdict a7_sweep() {
  using G = std::vector<std::pair<std::size_t, std::size_t>>;
  const bool groups = eval::layer_groups(8, 4) == G{{0, 3}, {4, 7}} && eval::layer_groups(8, 8) == G{{0, 7}};

  // An 8-layer model swept over its two 4-layer groups.
  auto cfg = tiny::config(8);
  cfg.vocab_size = 128;
  const auto params = lm::init_params(cfg, 8);
  const auto& t = tiny::arith_task();
  train::TrainPlan base;
  base.stage = train::Stage::mft;
  base.epochs = 1;
  base.max_steps = 6;
  base.batch_size = 4;
  base.eval_every = 2;
  base.seed = 3;
  base.optimizer.lr = 1e-2;
  base.indicator = mask::IndicatorSpec::with_ratio(0.1);
  const auto grid = eval::SweepGrid::over_layer_groups(8, 4, base);
  eval::SweepInputs in;
  in.frozen = &params;
  in.train = &t.splits.train;
  in.val = &t.val;
  in.seq_len = 16;
  in.baseline_val_loss = train::evaluate_loss(params, nullptr, t.val, 4);
  const auto res = eval::run_sweep(grid, in);
  std::vector<std::string> labels;
  for (const auto& r : res.rows) labels.push_back(r.label);
  const bool enumerated = labels == std::vector<std::string>{"0-3", "4-7"};

  // Recompute the argmax from the raw records and from the parsed CSV.
  const auto rows = eval::parse_summary_csv(eval::summary_csv(res));
  std::size_t from_records = 0, from_csv = 0, discrepancies = 0;
  for (std::size_t i = 0; i < res.records.size(); ++i) {
    const double metric = in.baseline_val_loss - res.records[i].best_val_loss;
    discrepancies += metric != rows[i].metric;
    if (metric > in.baseline_val_loss - res.records[from_records].best_val_loss) from_records = i;
    if (rows[i].metric > rows[from_csv].metric) from_csv = i;
  }
  discrepancies += !res.best || *res.best != from_records || from_csv != from_records;
  return {groups && enumerated && discrepancies == 0,
          fmt::format("width 4 -> {{0-3, 4-7}}, width 8 -> {{0-7}}: {}; sweep labels [{}]; argmax {} from records, {} "
                      "from CSV, {} discrepancies",
                      groups ? "yes" : "no", fmt::join(labels, ", "), from_records, from_csv, discrepancies)};
}

Verdict a8_landscape(const std::vector<SeedRun>& runs) {
  std::string why;
  if (!runs_ok(runs, why)) return {false, why};
  // Center identity and reproducibility on the first seed's artifacts.
  const fs::path dir = runs.front().dir;
  const auto ub = io::load_checkpoint(dir / "checkpoints" / "fft_upper_bound.ckpt");
  const auto m = mask::load_mask(dir / "masks" / "mft.mask");
  const auto train_w = corpus::Windows::of(corpus::read_tsv(dir / "data" / "arith_train.tsv", corpus::Domain::arith),
                                           ub.config.max_seq_len);
  const auto test_w = corpus::Windows::of(corpus::read_tsv(dir / "data" / "arith_test.tsv", corpus::Domain::arith),
                                          ub.config.max_seq_len);
  const eval::LandscapeGrid grid{3, 3, 0.5};
  const eval::LandscapeInputs in{&train_w, &test_w, 8, 0};
  const auto a = eval::scan_landscape(ub, &m, grid, in, 77);
  const auto b = eval::scan_landscape(ub, &m, grid, in, 77);
  const mask::FixedMaskOverlay ov(m);
  const double center_err = std::max(std::abs(a.center_train() - train::evaluate_loss(ub, &ov, train_w, 8)),
                                     std::abs(a.center_test() - train::evaluate_loss(ub, &ov, test_w, 8)));
  const bool repro = eval::surface_csv(a, true) == eval::surface_csv(b, true) &&
                     eval::surface_csv(a, false) == eval::surface_csv(b, false);
  // The pipeline's centers agree with its comparison table.
  double pipeline_err = 0.0;
  int mft_le_cont = 0;
  for (const auto& r : runs) {
    pipeline_err = std::max(pipeline_err, std::abs(r.center_mft - r.test_loss.at("mft")));
    pipeline_err = std::max(pipeline_err, std::abs(r.center_continued - r.test_loss.at("continued_fft")));
    mft_le_cont += r.center_mft <= r.center_continued;
  }
  return {center_err <= kCenterTolerance && pipeline_err <= kCenterTolerance && repro &&
              mft_le_cont >= kProtocolRequired,
          fmt::format("center identity err {:.1e} (pipeline {:.1e}) <= {:.0e}; reproducible {}; MFT center test loss "
                      "<= continued FFT in {}/{} seeds (need {})",
                      center_err, pipeline_err, kCenterTolerance, repro ? "byte-exact" : "NO", mft_le_cont,
                      runs.size(), kProtocolRequired)};
}

std::map<std::string, std::string> tree_hashes(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), dir).string();
    if (rel == "timing.json") continue;  // wall clock only
    out[rel] = io::sha256_hex(io::read_file(e.path()));
  }
  return out;
}

Verdict a9_determinism(const fs::path& config_path, const fs::path& workdir) {
  auto cfg = config::load(config_path);
  cfg.output_dir = workdir / "rerun";
  fs::remove_all(cfg.output_dir);
  std::ostringstream log;
  const auto first = pipeline::run(cfg, log);
  if (first.exit_code != 0) return {false, "first run failed: " + first.error};
  const auto before = tree_hashes(first.run_dir);
  fs::remove_all(first.run_dir);
  const auto second = pipeline::run(cfg, log);
  if (second.exit_code != 0) return {false, "rerun failed: " + second.error};
  const auto after = tree_hashes(second.run_dir);
  std::size_t differ = 0, ckpts = 0, masks = 0, csvs = 0, svgs = 0, lossy = 0;
  for (const auto& [rel, h] : before) {
    const auto it = after.find(rel);
    differ += it == after.end() || it->second != h;
    const auto ext = fs::path(rel).extension();
    csvs += ext == ".csv";
    svgs += ext == ".svg";
    const fs::path p = second.run_dir / rel;
    if (ext == ".ckpt") {
      ++ckpts;
      lossy += io::encode_checkpoint(io::load_checkpoint(p)) != io::read_file(p);
    } else if (ext == ".mask") {
      ++masks;
      lossy += mask::encode_mask(mask::load_mask(p)) != io::read_file(p);
    }
  }
  differ += after.size() != before.size();
  return {differ == 0 && lossy == 0 && ckpts > 0 && masks > 0 && csvs > 0 && svgs > 0,
          fmt::format("{} files ({} checkpoints, {} masks, {} CSVs, {} SVGs): {} differ after a clean rerun; {} "
                      "lossy round trips",
                      before.size(), ckpts, masks, csvs, svgs, differ, lossy)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria A1..A9"};
  fs::path workdir = "acceptance_runs";
  fs::path protocol_config = MASKFT_PROTOCOL_CONFIG;
  fs::path rerun_config = MASKFT_RERUN_CONFIG;
  std::vector<std::string> only;
  int seeds = 5;
  app.add_option("--workdir", workdir, "Scratch directory for pipeline runs");
  app.add_option("--protocol-config", protocol_config, "Config for the A5/A6/A8 seeds");
  app.add_option("--rerun-config", rerun_config, "Config for the A9 rerun");
  app.add_option("--only", only, "Subset of criteria, e.g. A1,A4")->delimiter(',');
  app.add_option("--seeds", seeds, "Protocol seeds")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(workdir);

  const auto wanted = [&](const std::string& id) { return only.empty() || std::count(only.begin(), only.end(), id); };
  std::vector<SeedRun> runs;
  if (wanted("A5") || wanted("A6") || wanted("A8")) {
    std::cerr << "protocol runs (" << seeds << " seeds)\n";
    try {
      runs = protocol_runs(protocol_config, workdir, seeds);
    } catch (const std::exception& e) {
      std::cerr << "protocol runs aborted: " << e.what() << "\n";
    }
  }

  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"A1", a1_gradients},
      {"A2", a2_mask_exactness},
      {"A3", a3_frozen_weights},
      {"A4", a4_toy_oracle},
      {"A5", [&] { return a5_protocol(runs); }},
      {"A6", [&] { return a6_baselines(runs); }},
      {"A7", a7_sweep},
      {"A8", [&] { return a8_landscape(runs); }},
      {"A9", [&] { return a9_determinism(rerun_config, workdir); }},
  };
  int failures = 0;
  json report = json::object();
  for (const auto& [id, check] : criteria) {
    if (!wanted(id)) continue;
    Verdict v;
    try {
      v = check();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    failures += !v.pass;
    std::cout << id << " " << (v.pass ? "PASS" : "FAIL") << "  " << v.detail << std::endl;
    report[id] = {{"pass", v.pass}, {"detail", v.detail}};
  }
  json seeds_json = json::array();
  for (const auto& r : runs) {
    seeds_json.push_back({{"seed", r.seed},
                          {"run_dir", r.dir.string()},
                          {"seconds", r.seconds},
                          {"test_loss", r.test_loss},
                          {"center_test_mft", r.center_mft},
                          {"center_test_continued_fft", r.center_continued}});
  }
  report["protocol_seeds"] = seeds_json;
  io::write_file(workdir / "acceptance_report.json", report.dump(2) + "\n");
  return failures == 0 ? 0 : 1;
}
