#include "maskft/pipeline.hpp"

#include <fcntl.h>
#include <signal.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>

#include <fmt/format.h>

#include "maskft/baselines.hpp"
#include "maskft/plot.hpp"
#include "maskft/rng.hpp"

namespace maskft::pipeline {

namespace fs = std::filesystem;
using io::json;

std::string run_id(const config::ExperimentConfig& c) {
  if (!c.run_id.empty()) return c.run_id;
  json j = config::to_json(c);
  // Where the run lives and which stages are asked for do not change what it
  // computes.
  j.erase("output_dir");
  j.erase("stages");
  j.erase("workers");
  return io::sha256_hex(j.dump()).substr(0, 12);
}

fs::path run_directory(const config::ExperimentConfig& c) { return c.output_dir / run_id(c); }

// ---------------------------------------------------------------------------
// lock

RunLock::RunLock(const fs::path& run_dir) : path_(run_dir / ".lock") {
  fs::create_directories(run_dir);
  for (int attempt = 0; attempt < 2; ++attempt) {
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd >= 0) {
      const std::string pid = std::to_string(::getpid()) + "\n";
      const bool ok = ::write(fd, pid.data(), pid.size()) == static_cast<ssize_t>(pid.size());
      ::close(fd);
      if (!ok) throw std::runtime_error("cannot write lock file " + path_.string());
      return;
    }
    if (errno != EEXIST) throw std::runtime_error("cannot create lock file " + path_.string());
    std::ifstream in(path_);
    long pid = 0;
    in >> pid;
    if (pid > 0 && (::kill(static_cast<pid_t>(pid), 0) == 0 || errno == EPERM)) {
      throw std::runtime_error(fmt::format("run directory {} is locked by process {}", run_dir.string(), pid));
    }
    fs::remove(path_);
  }
  throw std::runtime_error("cannot take lock " + path_.string());
}

RunLock::~RunLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

namespace {

// ---------------------------------------------------------------------------
// artifacts

std::string file_hash(const fs::path& p) { return io::sha256_hex(io::read_file(p)); }

std::string data_file(const std::string& domain, const std::string& split) {
  return "data/" + domain + "_" + split + ".tsv";
}

constexpr const char* kPretrained = "checkpoints/pretrained.ckpt";
constexpr const char* kUpperBound = "checkpoints/fft_upper_bound.ckpt";
constexpr const char* kFftFinal = "checkpoints/fft_final.ckpt";
constexpr const char* kContinued = "checkpoints/continued_fft.ckpt";
constexpr const char* kMftMask = "masks/mft.mask";
constexpr const char* kFftRecord = "records/fft.json";

struct Context {
  const config::ExperimentConfig& cfg;
  fs::path dir;
  std::ostream& log;
  json timing = json::object();

  fs::path at(const std::string& rel) const { return dir / rel; }
  bool has(const std::string& rel) const { return fs::exists(at(rel)); }

  corpus::Dataset dataset(const std::string& domain, const std::string& split) const {
    return corpus::read_tsv(at(data_file(domain, split)), corpus::parse_domain(domain));
  }
  corpus::Windows windows(const std::string& domain, const std::string& split) const {
    return corpus::Windows::of(dataset(domain, split), cfg.seq_len);
  }
  lm::ModelParams checkpoint(const std::string& rel) const {
    lm::ModelParams p = io::load_checkpoint(at(rel));
    if (!(p.config == cfg.model)) throw std::runtime_error(rel + " was written for a different model config");
    return p;
  }
  void write(const std::string& rel, const std::string& bytes) const { io::write_file(at(rel), bytes); }
  void write_record(const std::string& rel, train::RunRecord rec) {
    timing[rec.stage.empty() ? rel : rel] = rec.wall_clock_seconds;
    // Wall-clock time is kept out of the record so reruns are byte-identical.
    rec.wall_clock_seconds = 0.0;
    write(rel, rec.to_json().dump(2) + "\n");
  }
};

struct StageResult {
  std::vector<std::string> outputs;
  std::string failure;  // non-empty: stage failed after persisting what it had
};

struct Stage {
  std::string name;
  std::function<std::vector<std::string>(const Context&)> inputs;
  std::function<json(const config::ExperimentConfig&)> settings;
  std::function<StageResult(Context&)> run;
};

std::vector<std::string> primary_data(const Context& ctx, std::initializer_list<const char*> splits) {
  std::vector<std::string> out;
  for (const char* s : splits) out.push_back(data_file(ctx.cfg.primary_domain, s));
  return out;
}

json model_and_data(const config::ExperimentConfig& c) {
  const json j = config::to_json(c);
  return json{{"model", j["model"]}, {"seq_len", c.seq_len}, {"primary_domain", c.primary_domain}};
}

StageResult stage_data(Context& ctx) {
  StageResult r;
  for (const auto& [name, spec] : ctx.cfg.domains) {
    const corpus::Splits s = corpus::generate(spec);
    for (const auto* part : {&s.train, &s.val, &s.test}) {
      for (const corpus::Example& ex : *part) {
        if (!corpus::verify(ex)) throw std::runtime_error("generated example fails verification: " + ex.prompt);
      }
    }
    const std::pair<const char*, const corpus::Dataset*> parts[] = {{"train", &s.train}, {"val", &s.val}, {"test", &s.test}};
    for (const auto& [split, data] : parts) {
      ctx.write(data_file(name, split), corpus::to_tsv(*data));
      r.outputs.push_back(data_file(name, split));
    }
    ctx.log << fmt::format("  {}: {} / {} / {} examples\n", name, s.train.size(), s.val.size(), s.test.size());
  }
  return r;
}

StageResult stage_pretrain(Context& ctx) {
  StageResult r;
  const auto& c = ctx.cfg;
  lm::ModelParams init = lm::init_params(c.model, Rng::derive(c.seed, 1));
  if (c.pretrain.domains.empty() || c.pretrain.plan.epochs == 0) {
    io::save_checkpoint(init, ctx.at(kPretrained));
    r.outputs.push_back(kPretrained);
    ctx.log << "  no pretraining configured; using the initialization\n";
    return r;
  }
  std::vector<corpus::Dataset> train, val;
  for (const auto& d : c.pretrain.domains) {
    train.push_back(ctx.dataset(d, "train"));
    val.push_back(ctx.dataset(d, "val"));
  }
  const auto tw = train::plan_windows(corpus::mixup(train, Rng::derive(c.seed, 2)), c.pretrain.plan, c.seq_len);
  const auto vw = corpus::Windows::of(corpus::mixup(val, Rng::derive(c.seed, 3)), c.seq_len);
  train::FftResult res = train::run_fft(init, tw, vw, c.pretrain.plan);
  res.record.stage = "pretrain";
  res.record.checkpoint_ref = kPretrained;
  ctx.write_record("records/pretrain.json", res.record);
  r.outputs.push_back("records/pretrain.json");
  if (res.record.failed) {
    r.failure = res.record.failure;
    return r;
  }
  io::save_checkpoint(res.best, ctx.at(kPretrained));
  r.outputs.push_back(kPretrained);
  ctx.log << fmt::format("  best validation loss {:.4f} at step {}\n", res.record.best_val_loss, res.record.best_step);
  return r;
}

StageResult stage_fft(Context& ctx) {
  StageResult r;
  const auto& c = ctx.cfg;
  const lm::ModelParams start = ctx.checkpoint(kPretrained);
  const auto tw = train::plan_windows(ctx.dataset(c.primary_domain, "train"), c.fft, c.seq_len);
  const auto vw = ctx.windows(c.primary_domain, "val");
  train::FftResult res = train::run_fft(start, tw, vw, c.fft);
  res.record.checkpoint_ref = kUpperBound;
  ctx.write_record(kFftRecord, res.record);
  r.outputs.push_back(kFftRecord);
  if (res.record.failed) {
    r.failure = res.record.failure;
    return r;
  }
  io::save_checkpoint(res.best, ctx.at(kUpperBound));
  io::save_checkpoint(res.final, ctx.at(kFftFinal));
  r.outputs.insert(r.outputs.end(), {kUpperBound, kFftFinal});
  ctx.log << fmt::format("  upper bound: validation loss {:.4f} at step {}\n", res.record.best_val_loss,
                         res.record.best_step);
  return r;
}

StageResult stage_continued(Context& ctx) {
  StageResult r;
  const auto& c = ctx.cfg;
  const lm::ModelParams ub = ctx.checkpoint(kUpperBound);
  const auto tw = train::plan_windows(ctx.dataset(c.primary_domain, "train"), c.continued_fft, c.seq_len);
  const auto vw = ctx.windows(c.primary_domain, "val");
  train::FftResult res = train::run_continued_fft(ub, tw, vw, c.continued_fft);
  res.record.checkpoint_ref = kContinued;
  ctx.write_record("records/continued_fft.json", res.record);
  r.outputs.push_back("records/continued_fft.json");
  if (res.record.failed) {
    r.failure = res.record.failure;
    return r;
  }
  // The final parameters are the comparison artifact: continued training is
  // the overfitting check, so early stopping would hide what it measures.
  io::save_checkpoint(res.final, ctx.at(kContinued));
  r.outputs.push_back(kContinued);
  ctx.log << fmt::format("  final validation loss {:.4f}\n", res.record.val_loss.back());
  return r;
}

StageResult stage_mft(Context& ctx) {
  StageResult r;
  const auto& c = ctx.cfg;
  const lm::ModelParams ub = ctx.checkpoint(kUpperBound);
  const auto tw = train::plan_windows(ctx.dataset(c.primary_domain, "train"), c.mft, c.seq_len);
  const auto vw = ctx.windows(c.primary_domain, "val");
  train::MftResult res = train::run_mft(ub, tw, vw, c.mft);
  res.record.checkpoint_ref = kUpperBound;
  res.record.mask_ref = kMftMask;
  res.record.metrics["sparsity"] = res.best_mask.sparsity();
  ctx.write_record("records/mft.json", res.record);
  r.outputs.push_back("records/mft.json");
  if (res.record.failed) {
    r.failure = res.record.failure;
    return r;
  }
  mask::save_mask(res.best_mask, ctx.at(kMftMask));
  r.outputs.push_back(kMftMask);
  ctx.log << fmt::format("  best validation loss {:.4f} at step {}, sparsity {:.2f}%\n", res.record.best_val_loss,
                         res.record.best_step, 100.0 * res.best_mask.sparsity());
  return r;
}

StageResult stage_baselines(Context& ctx) {
  StageResult r;
  const auto& c = ctx.cfg;
  const lm::ModelParams ub = ctx.checkpoint(kUpperBound);
  for (baseline::Kind k : c.baselines.kinds) {
    baseline::BaselineSpec spec;
    spec.kind = k;
    spec.ratio = c.baselines.ratio;
    spec.targets = ub.linear_paths(c.mft.first_layer, c.mft.last_layer);
    spec.seed = Rng::derive(c.seed, 300);
    const mask::BinaryMask m = baseline::build(ub, spec);
    const std::string rel = "masks/" + baseline::to_string(k) + ".mask";
    mask::save_mask(m, ctx.at(rel));
    r.outputs.push_back(rel);
  }
  return r;
}

StageResult stage_sweeps(Context& ctx) {
  StageResult r;
  const auto& c = ctx.cfg;
  const lm::ModelParams ub = ctx.checkpoint(kUpperBound);
  const auto fft = train::RunRecord::from_json(json::parse(io::read_file(ctx.at(kFftRecord))));
  const corpus::Dataset train = ctx.dataset(c.primary_domain, "train");
  const corpus::Windows val = ctx.windows(c.primary_domain, "val");
  for (const auto& s : c.sweeps) {
    eval::SweepInputs in;
    in.frozen = &ub;
    in.train = &train;
    in.val = &val;
    in.seq_len = c.seq_len;
    in.baseline_val_loss = fft.best_val_loss;
    in.workers = c.workers;
    eval::SweepResult res = eval::run_sweep(s.grid, in);
    for (std::size_t i = 0; i < res.rows.size(); ++i) {
      const std::string base = fmt::format("sweeps/{}/{:03d}", s.name, i);
      if (!res.records[i].failed) {
        mask::save_mask(res.masks[i], ctx.at("masks/" + base + ".mask"));
        r.outputs.push_back("masks/" + base + ".mask");
        res.records[i].mask_ref = "masks/" + base + ".mask";
      }
      ctx.write_record("records/" + base + ".json", res.records[i]);
      r.outputs.push_back("records/" + base + ".json");
    }
    const std::string table = "tables/sweep_" + s.name + ".csv";
    ctx.write(table, eval::summary_csv(res));
    r.outputs.push_back(table);
    std::size_t failed = 0;
    for (const auto& row : res.rows) failed += row.failed;
    ctx.log << fmt::format("  {}: {} points, {} failed, best {}\n", s.name, res.rows.size(), failed,
                           res.best ? res.rows[*res.best].label : std::string("none"));
  }
  return r;
}

constexpr const char* kLandscapeModels[] = {"mft", "continued_fft"};

StageResult stage_landscape(Context& ctx) {
  StageResult r;
  const auto& c = ctx.cfg;
  const lm::ModelParams ub = ctx.checkpoint(kUpperBound);
  const lm::ModelParams cont = ctx.checkpoint(kContinued);
  const mask::BinaryMask m = mask::load_mask(ctx.at(kMftMask));
  const corpus::Windows tw = ctx.windows(c.primary_domain, "train");
  const corpus::Windows te = ctx.windows(c.primary_domain, "test");
  eval::LandscapeInputs in;
  in.train = &tw;
  in.test = &te;
  in.batch_size = c.eval.batch_size;
  in.max_windows = c.landscape.max_windows;
  json summary = json::object();
  for (const char* name : kLandscapeModels) {
    const bool is_mft = std::string(name) == "mft";
    const lm::ModelParams& params = is_mft ? ub : cont;
    // Both scans use the same seed and span the masked tensors only.
    const auto [d1, d2] = eval::random_directions(params, m.paths(), Rng::derive(c.seed, 400));
    const eval::LandscapeScan scan =
        eval::scan_landscape(params, is_mft ? &m : nullptr, d1, d2, c.landscape.grid, in);
    for (bool test : {false, true}) {
      const std::string rel = fmt::format("surfaces/{}_{}.csv", name, test ? "test" : "train");
      ctx.write(rel, eval::surface_csv(scan, test));
      r.outputs.push_back(rel);
    }
    summary[name] = {{"center_train", scan.center_train()}, {"center_test", scan.center_test()}};
    ctx.log << fmt::format("  {}: center train {:.4f}, test {:.4f}\n", name, scan.center_train(), scan.center_test());
  }
  ctx.write("surfaces/centers.json", summary.dump(2) + "\n");
  r.outputs.push_back("surfaces/centers.json");
  return r;
}

// Artifacts of the six protocol methods: checkpoint plus optional mask.
struct Artifact {
  const char* method;
  const char* checkpoint;
  const char* mask;
};
constexpr Artifact kArtifacts[] = {
    {"pretrained", kPretrained, nullptr},     {"fft_upper_bound", kUpperBound, nullptr},
    {"continued_fft", kContinued, nullptr},   {"mft", kUpperBound, kMftMask},
    {"random_mask", kUpperBound, "masks/random.mask"}, {"l1_mask", kUpperBound, "masks/l1.mask"},
};

std::vector<std::string> compare_inputs(const Context& ctx) {
  std::vector<std::string> in;
  for (const auto& [name, _] : ctx.cfg.domains) in.push_back(data_file(name, "test"));
  for (const Artifact& a : kArtifacts) {
    if (ctx.has(a.checkpoint)) in.push_back(a.checkpoint);
    if (a.mask && ctx.has(a.mask)) in.push_back(a.mask);
  }
  std::sort(in.begin(), in.end());
  in.erase(std::unique(in.begin(), in.end()), in.end());
  return in;
}

StageResult stage_compare(Context& ctx) {
  StageResult r;
  const auto& c = ctx.cfg;
  std::map<std::string, corpus::Windows> tests;
  std::vector<std::string> domains;
  for (const auto& [name, _] : c.domains) {
    tests.emplace(name, ctx.windows(name, "test"));
    domains.push_back(name);
  }
  std::map<std::string, eval::MethodResult> results;
  std::map<std::string, lm::ModelParams> loaded;
  for (const Artifact& a : kArtifacts) {
    if (!ctx.has(a.checkpoint) || (a.mask && !ctx.has(a.mask))) continue;
    if (!loaded.count(a.checkpoint)) loaded.emplace(a.checkpoint, ctx.checkpoint(a.checkpoint));
    const lm::ModelParams& p = loaded.at(a.checkpoint);
    std::optional<mask::BinaryMask> m;
    std::optional<mask::FixedMaskOverlay> ov;
    if (a.mask) {
      m = mask::load_mask(ctx.at(a.mask));
      ov.emplace(*m);
    }
    eval::MethodResult mr;
    for (const auto& [d, w] : tests) {
      mr.loss[d] = train::evaluate_loss(p, ov ? &*ov : nullptr, w, c.eval.batch_size, c.eval.max_windows);
    }
    results.emplace(a.method, std::move(mr));
  }
  const eval::Comparison cmp = eval::compare_protocol(results, c.primary_domain, domains);
  ctx.write("tables/comparison.csv", eval::comparison_csv(cmp));
  r.outputs.push_back("tables/comparison.csv");
  for (const auto& row : cmp.rows) {
    const auto& v = row.loss.at(c.primary_domain);
    const auto& d = row.delta.at(c.primary_domain);
    ctx.log << fmt::format("  {:<16} {}  {}\n", row.method, v ? fmt::format("{:.4f}", *v) : std::string("   -  "),
                           d ? fmt::format("{:+.4f}", *d) : std::string(""));
  }
  return r;
}

std::vector<std::string> existing(const Context& ctx, const fs::path& sub, const std::string& ext) {
  std::vector<std::string> out;
  if (!fs::exists(ctx.at(sub.string()))) return out;
  for (const auto& e : fs::recursive_directory_iterator(ctx.at(sub.string()))) {
    if (e.is_regular_file() && e.path().extension() == ext) out.push_back(fs::relative(e.path(), ctx.dir).string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

StageResult stage_plot(Context& ctx) {
  StageResult r;
  for (const fs::path& p : plot(ctx.dir)) r.outputs.push_back(fs::relative(p, ctx.dir).string());
  return r;
}

std::vector<Stage> stages() {
  auto none = [](const Context&) { return std::vector<std::string>{}; };
  return {
      {"data", none,
       [](const config::ExperimentConfig& c) { return json{{"domains", config::to_json(c)["domains"]}}; }, stage_data},
      {"pretrain",
       [](const Context& ctx) {
         std::vector<std::string> in;
         for (const auto& d : ctx.cfg.pretrain.domains) {
           in.push_back(data_file(d, "train"));
           in.push_back(data_file(d, "val"));
         }
         return in;
       },
       [](const config::ExperimentConfig& c) {
         json j = model_and_data(c);
         j["pretrain"] = config::to_json(c)["pretrain"];
         j["seed"] = c.seed;
         return j;
       },
       stage_pretrain},
      {"fft", [](const Context& ctx) {
         auto in = primary_data(ctx, {"train", "val"});
         in.push_back(kPretrained);
         return in;
       },
       [](const config::ExperimentConfig& c) {
         json j = model_and_data(c);
         j["fft"] = config::to_json(c)["fft"];
         j["plan_seed"] = c.fft.seed;
         return j;
       },
       stage_fft},
      {"continued_fft",
       [](const Context& ctx) {
         auto in = primary_data(ctx, {"train", "val"});
         in.push_back(kUpperBound);
         return in;
       },
       [](const config::ExperimentConfig& c) {
         json j = model_and_data(c);
         j["continued_fft"] = config::to_json(c)["continued_fft"];
         j["plan_seed"] = c.continued_fft.seed;
         return j;
       },
       stage_continued},
      {"mft",
       [](const Context& ctx) {
         auto in = primary_data(ctx, {"train", "val"});
         in.push_back(kUpperBound);
         return in;
       },
       [](const config::ExperimentConfig& c) {
         json j = model_and_data(c);
         j["mft"] = config::to_json(c)["mft"];
         j["plan_seed"] = c.mft.seed;
         return j;
       },
       stage_mft},
      {"baselines", [](const Context&) { return std::vector<std::string>{kUpperBound}; },
       [](const config::ExperimentConfig& c) {
         return json{{"baselines", config::to_json(c)["baselines"]},
                     {"layers", {c.mft.first_layer, c.mft.last_layer}},
                     {"seed", c.seed}};
       },
       stage_baselines},
      {"sweeps",
       [](const Context& ctx) {
         auto in = primary_data(ctx, {"train", "val"});
         in.push_back(kUpperBound);
         in.push_back(kFftRecord);
         return in;
       },
       [](const config::ExperimentConfig& c) {
         json j = model_and_data(c);
         const json full = config::to_json(c);
         j["sweeps"] = full["sweeps"];
         j["mft"] = full["mft"];
         j["plan_seed"] = c.mft.seed;
         return j;
       },
       stage_sweeps},
      {"landscape",
       [](const Context& ctx) {
         auto in = primary_data(ctx, {"train", "test"});
         in.insert(in.end(), {kUpperBound, kContinued, kMftMask});
         return in;
       },
       [](const config::ExperimentConfig& c) {
         json j = model_and_data(c);
         j["landscape"] = config::to_json(c)["landscape"];
         j["eval"] = config::to_json(c)["eval"];
         j["seed"] = c.seed;
         return j;
       },
       stage_landscape},
      {"compare", compare_inputs,
       [](const config::ExperimentConfig& c) {
         json j = model_and_data(c);
         j["eval"] = config::to_json(c)["eval"];
         return j;
       },
       stage_compare},
      {"plot",
       [](const Context& ctx) {
         auto in = existing(ctx, "records", ".json");
         for (auto ext : {"tables", "surfaces"}) {
           auto more = existing(ctx, ext, ".csv");
           in.insert(in.end(), more.begin(), more.end());
         }
         return in;
       },
       [](const config::ExperimentConfig&) { return json::object(); }, stage_plot},
  };
}

std::string stage_key(const Stage& s, const Context& ctx, const std::vector<std::string>& inputs) {
  std::string material = s.name + "\n" + s.settings(ctx.cfg).dump() + "\n";
  for (const auto& rel : inputs) material += rel + " " + file_hash(ctx.at(rel)) + "\n";
  return io::sha256_hex(material);
}

bool up_to_date(const json& stamp, const std::string& key, const Context& ctx) {
  if (!stamp.is_object() || stamp.value("key", "") != key || !stamp.contains("outputs")) return false;
  for (const auto& [rel, hash] : stamp["outputs"].items()) {
    if (!ctx.has(rel) || file_hash(ctx.at(rel)) != hash.get<std::string>()) return false;
  }
  return true;
}

void write_run_record(const Context& ctx) {
  json all = json::object();
  for (const char* name : {"pretrain", "fft", "continued_fft", "mft"}) {
    const std::string rel = std::string("records/") + name + ".json";
    if (ctx.has(rel)) all[name] = json::parse(io::read_file(ctx.at(rel)));
  }
  ctx.write("record.json", all.dump(2) + "\n");
}

}  // namespace

Outcome run(const config::ExperimentConfig& cfg, std::ostream& log) {
  Outcome out;
  out.run_dir = run_directory(cfg);
  RunLock lock(out.run_dir);
  Context ctx{cfg, out.run_dir, log};
  ctx.write("config.json", config::to_json(cfg).dump(2) + "\n");
  const fs::path stamps_path = ctx.at("stages.json");
  json stamps = fs::exists(stamps_path) ? json::parse(io::read_file(stamps_path)) : json::object();
  if (fs::exists(ctx.at("timing.json"))) ctx.timing = json::parse(io::read_file(ctx.at("timing.json")));
  log << "run directory " << out.run_dir.string() << "\n";

  for (const Stage& s : stages()) {
    if (!cfg.wants(s.name)) continue;
    try {
      const std::vector<std::string> inputs = s.inputs(ctx);
      for (const auto& rel : inputs) {
        if (!ctx.has(rel)) throw std::runtime_error("missing input " + rel + " (run the stage that produces it first)");
      }
      const std::string key = stage_key(s, ctx, inputs);
      if (up_to_date(stamps[s.name], key, ctx)) {
        log << "[" << s.name << "] up to date\n";
        out.skipped.push_back(s.name);
        continue;
      }
      log << "[" << s.name << "]\n";
      stamps.erase(s.name);
      io::write_file(stamps_path, stamps.dump(2) + "\n");
      const auto t0 = std::chrono::steady_clock::now();
      StageResult res = s.run(ctx);
      ctx.timing["stage:" + s.name] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      io::write_file(ctx.at("timing.json"), ctx.timing.dump(2) + "\n");
      if (!res.failure.empty()) throw std::runtime_error(res.failure);
      json outputs = json::object();
      for (const auto& rel : res.outputs) outputs[rel] = file_hash(ctx.at(rel));
      stamps[s.name] = {{"key", key}, {"outputs", outputs}};
      io::write_file(stamps_path, stamps.dump(2) + "\n");
      out.executed.push_back(s.name);
    } catch (const std::exception& e) {
      out.exit_code = 1;
      out.error = "stage " + s.name + " failed: " + e.what();
      log << out.error << "\n";
      write_run_record(ctx);
      return out;
    }
  }
  write_run_record(ctx);
  return out;
}

// ---------------------------------------------------------------------------
// inspect

namespace {

std::string inspect_checkpoint(const std::string& bytes) {
  const lm::ModelParams p = io::decode_checkpoint(bytes);
  const auto& c = p.config;
  std::string out = fmt::format("checkpoint: {} layers, d_model {}, {} heads, d_ff {}, vocab {}, max_seq_len {}\n",
                                c.n_layers, c.d_model, c.n_heads, c.d_ff, c.vocab_size, c.max_seq_len);
  out += fmt::format("parameters: {}\nsha256: {}\n", p.parameter_count(), io::sha256_hex(bytes));
  for (const auto& [path, t] : p.tensors) {
    double sq = 0.0;
    for (double v : t.values()) sq += v * v;
    out += fmt::format("  {:<24} {:<12} rms {:.6g}\n", path, shape_str(t.shape()),
                       std::sqrt(sq / static_cast<double>(t.size())));
  }
  return out;
}

std::string inspect_mask(const std::string& bytes) {
  const mask::BinaryMask m = mask::decode_mask(bytes);
  std::string spec = m.spec.mode == mask::IndicatorMode::ratio ? fmt::format("ratio K={}", m.spec.ratio)
                                                               : fmt::format("threshold T={}", m.spec.threshold);
  std::string out = fmt::format("mask: origin {}, {}, seed {}\n", m.origin, spec, m.seed);
  std::map<std::string, std::pair<std::size_t, std::size_t>> per_layer;
  for (const auto& [path, e] : m.entries) {
    const std::size_t total = e.keep.size(), kept = e.keep.count();
    out += fmt::format("  {:<24} {:<12} kept {:>8} / {:<8} sparsity {:.2f}%\n", path, shape_str(e.shape), kept, total,
                       100.0 * static_cast<double>(total - kept) / static_cast<double>(total));
    const auto parsed = lm::parse_linear_path(path);
    const std::string layer = parsed ? "layer." + std::to_string(parsed->first) : path;
    per_layer[layer].first += kept;
    per_layer[layer].second += total;
  }
  out += "per layer:\n";
  for (const auto& [layer, kt] : per_layer) {
    out += fmt::format("  {:<24} sparsity {:.2f}%\n", layer,
                       100.0 * static_cast<double>(kt.second - kt.first) / static_cast<double>(kt.second));
  }
  out += fmt::format("total: kept {} / {}, sparsity {:.2f}%\n", m.kept(), m.total(), 100.0 * m.sparsity());
  return out;
}

std::string inspect_record(const json& j) {
  const train::RunRecord r = train::RunRecord::from_json(j);
  std::string out = fmt::format("record {} ({})\n", r.run_id, r.stage);
  out += fmt::format("  steps: {}\n  evaluations: {}\n", r.train_loss.size(), r.val_loss.size());
  if (!r.train_loss.empty()) out += fmt::format("  final train loss: {}\n", r.train_loss.back());
  out += fmt::format("  best_step: {}\n  best_val_loss: {}\n", r.best_step, r.best_val_loss);
  if (!r.val_loss.empty()) out += fmt::format("  final val loss: {}\n", r.val_loss.back());
  out += fmt::format("  failed: {}{}\n", r.failed ? "yes" : "no", r.failed ? " (" + r.failure + ")" : "");
  if (!r.checkpoint_ref.empty()) out += "  checkpoint: " + r.checkpoint_ref + "\n";
  if (!r.mask_ref.empty()) out += "  mask: " + r.mask_ref + "\n";
  for (const auto& [k, v] : r.metrics) out += fmt::format("  {}: {}\n", k, v);
  return out;
}

}  // namespace

std::string inspect(const fs::path& path) {
  const std::string bytes = io::read_file(path);
  if (bytes.rfind(io::kCheckpointMagic, 0) == 0) return inspect_checkpoint(bytes);
  if (bytes.rfind(io::kMaskMagic, 0) == 0) return inspect_mask(bytes);
  if (path.extension() == ".csv" && bytes.rfind("point,", 0) == 0) {
    const auto rows = eval::parse_summary_csv(bytes);
    std::string out = fmt::format("sweep summary: {} points\n", rows.size());
    for (const auto& r : rows) {
      out += fmt::format("  {:<12} best_val_loss {} metric {} {}{}\n", r.label, r.best_val_loss, r.metric,
                         r.beats_baseline ? "beats baseline" : "", r.failed ? "failed" : "");
    }
    if (const auto b = eval::best_row(rows)) out += "best: " + rows[*b].label + "\n";
    return out;
  }
  json j;
  try {
    j = json::parse(bytes);
  } catch (const json::parse_error& e) {
    throw io::FormatError(std::string("not a checkpoint, mask, record or sweep summary: ") + e.what(), e.byte);
  }
  try {
    if (j.is_object() && j.contains("run_id")) return inspect_record(j);
    if (j.is_object()) {
      std::string out;
      for (const auto& [name, rec] : j.items()) out += inspect_record(rec);
      if (!out.empty()) return out;
    }
  } catch (const json::exception& e) {
    throw io::FormatError(std::string("malformed record: ") + e.what(), 0);
  }
  throw io::FormatError("unrecognized JSON document", 0);
}

// ---------------------------------------------------------------------------
// plot

Surface read_surface_csv(const std::string& csv) {
  Surface s;
  std::istringstream in(csv);
  std::string line;
  auto cells = [](const std::string& l) {
    std::vector<std::string> out;
    std::stringstream ss(l);
    std::string c;
    while (std::getline(ss, c, ',')) out.push_back(c);
    return out;
  };
  if (!std::getline(in, line)) throw std::invalid_argument("empty surface file");
  const auto head = cells(line);
  for (std::size_t i = 1; i < head.size(); ++i) s.xs.push_back(std::stod(head[i]));
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto row = cells(line);
    if (row.size() != head.size()) throw std::invalid_argument("ragged surface row");
    s.ys.push_back(std::stod(row[0]));
    for (std::size_t i = 1; i < row.size(); ++i) s.z.push_back(std::stod(row[i]));
  }
  if (s.xs.empty() || s.ys.empty()) throw std::invalid_argument("surface has no cells");
  return s;
}

std::vector<fs::path> plot(const fs::path& run_dir) {
  std::vector<fs::path> written;
  auto emit = [&](const std::string& rel, const std::string& svg) {
    io::write_file(run_dir / rel, svg);
    written.push_back(run_dir / rel);
  };
  std::vector<train::RunRecord> curves;
  for (const char* name : {"pretrain", "fft", "continued_fft", "mft"}) {
    const fs::path p = run_dir / "records" / (std::string(name) + ".json");
    if (fs::exists(p)) curves.push_back(train::RunRecord::from_json(json::parse(io::read_file(p))));
  }
  const fs::path tables = run_dir / "tables";
  std::vector<fs::path> sweeps;
  if (fs::exists(tables)) {
    for (const auto& e : fs::directory_iterator(tables)) {
      if (e.path().filename().string().rfind("sweep_", 0) == 0) sweeps.push_back(e.path());
    }
  }
  std::sort(sweeps.begin(), sweeps.end());
  if (curves.empty() && sweeps.empty()) throw std::runtime_error("no records to plot in " + run_dir.string());

  for (const auto& r : curves) emit("plots/curve_" + r.stage + ".svg", plot::training_curves_svg({r}, r.stage));
  if (curves.size() > 1) emit("plots/curves.svg", plot::training_curves_svg(curves, "training curves"));
  for (const auto& p : sweeps) {
    const std::string name = p.stem().string();
    emit("plots/" + name + ".svg", plot::sweep_svg(eval::parse_summary_csv(io::read_file(p)), name));
  }
  for (const char* model : kLandscapeModels) {
    const fs::path tr = run_dir / "surfaces" / (std::string(model) + "_train.csv");
    const fs::path te = run_dir / "surfaces" / (std::string(model) + "_test.csv");
    if (!fs::exists(tr) || !fs::exists(te)) continue;
    const Surface a = read_surface_csv(io::read_file(tr));
    const Surface b = read_surface_csv(io::read_file(te));
    eval::LandscapeScan scan;
    scan.grid.nx = a.xs.size();
    scan.grid.ny = a.ys.size();
    scan.grid.range = a.xs.back();
    scan.train_surface = a.z;
    scan.test_surface = b.z;
    for (bool test : {false, true}) {
      const std::string tag = test ? "test" : "train";
      emit(fmt::format("plots/landscape_{}_{}.svg", model, tag),
           plot::landscape_svg(scan, test, fmt::format("{} ({} loss)", model, tag)));
    }
  }
  return written;
}

}  // namespace maskft::pipeline
