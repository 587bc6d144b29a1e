#include "maskft/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <fmt/format.h>

#include "maskft/io.hpp"
#include "maskft/rng.hpp"

namespace maskft::eval {

std::string to_string(Axis a) {
  switch (a) {
    case Axis::layer_group: return "layer_group";
    case Axis::mask_ratio: return "mask_ratio";
    case Axis::data_ratio: return "data_ratio";
  }
  return "?";
}

Axis parse_axis(const std::string& s) {
  if (s == "layer_group") return Axis::layer_group;
  if (s == "mask_ratio") return Axis::mask_ratio;
  if (s == "data_ratio") return Axis::data_ratio;
  throw std::invalid_argument("unknown sweep axis '" + s + "'");
}

std::vector<std::pair<std::size_t, std::size_t>> layer_groups(std::size_t n_layers, std::size_t width) {
  if (width < 1 || width > n_layers || n_layers % width != 0) {
    throw std::invalid_argument(fmt::format("group width {} does not tile {} layers", width, n_layers));
  }
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t first = 0; first < n_layers; first += width) out.emplace_back(first, first + width - 1);
  return out;
}

SweepGrid SweepGrid::over_layer_groups(std::size_t n_layers, std::size_t width, train::TrainPlan base) {
  SweepGrid g;
  g.axis = Axis::layer_group;
  g.group_width = width;
  g.base = std::move(base);
  for (const auto& [first, _] : layer_groups(n_layers, width)) g.values.push_back(static_cast<double>(first));
  return g;
}

void SweepGrid::validate(const lm::TransformerConfig& model) const {
  if (values.empty()) throw std::invalid_argument("sweep grid has no values");
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (!(values[i - 1] < values[i])) throw std::invalid_argument("sweep values must be strictly increasing");
  }
  if (base.stage != train::Stage::mft) throw std::invalid_argument("sweep base plan must be an mft plan");
  switch (axis) {
    case Axis::layer_group: {
      const auto groups = layer_groups(model.n_layers, group_width);
      for (double v : values) {
        const bool ok = std::any_of(groups.begin(), groups.end(),
                                    [&](const auto& g) { return static_cast<double>(g.first) == v; });
        if (!ok) throw std::invalid_argument(fmt::format("layer group start {} is not a group boundary", v));
      }
      break;
    }
    case Axis::mask_ratio:
      if (!base.indicator || base.indicator->mode != mask::IndicatorMode::ratio) {
        throw std::invalid_argument("mask_ratio sweep needs a ratio-mode base indicator");
      }
      for (double v : values) {
        if (!(v > 0.0 && v < 1.0)) throw std::invalid_argument(fmt::format("mask ratio {} outside (0, 1)", v));
      }
      break;
    case Axis::data_ratio:
      for (double v : values) {
        if (!(v > 0.0 && v <= 1.0)) throw std::invalid_argument(fmt::format("data ratio {} outside (0, 1]", v));
      }
      break;
  }
  for (std::size_t i = 0; i < values.size(); ++i) plan_at(i).validate(model);
}

train::TrainPlan SweepGrid::plan_at(std::size_t i) const {
  train::TrainPlan p = base;
  const double v = values.at(i);
  switch (axis) {
    case Axis::layer_group:
      p.first_layer = static_cast<std::size_t>(v);
      p.last_layer = p.first_layer + group_width - 1;
      break;
    case Axis::mask_ratio: p.indicator = mask::IndicatorSpec::with_ratio(v); break;
    case Axis::data_ratio: p.data_ratio = v; break;
  }
  return p;
}

std::string SweepGrid::label_at(std::size_t i) const {
  const train::TrainPlan p = plan_at(i);
  switch (axis) {
    case Axis::layer_group: return fmt::format("{}-{}", p.first_layer, p.last_layer);
    case Axis::mask_ratio: return fmt::format("K={}", values.at(i));
    case Axis::data_ratio: return fmt::format("data={}", values.at(i));
  }
  return "?";
}

namespace {

std::string params_hash(const lm::ModelParams& p) { return io::sha256_hex(io::encode_checkpoint(p)); }

}  // namespace

SweepResult run_sweep(const SweepGrid& grid, const SweepInputs& in) {
  if (!in.frozen || !in.train || !in.val) throw std::invalid_argument("sweep inputs incomplete");
  grid.validate(in.frozen->config);
  const std::string reference = params_hash(*in.frozen);
  const std::size_t n = grid.values.size();

  SweepResult res;
  res.records.resize(n);
  res.masks.resize(n);
  res.rows.resize(n);
  std::vector<std::string> start_hash(n);

  auto run_point = [&](std::size_t i) {
    const train::TrainPlan plan = grid.plan_at(i);
    SweepRow& row = res.rows[i];
    row.label = grid.label_at(i);
    row.first_layer = plan.first_layer;
    row.last_layer = plan.last_layer;
    row.mask_ratio = plan.indicator->mode == mask::IndicatorMode::ratio ? plan.indicator->ratio : 0.0;
    row.data_ratio = plan.data_ratio;
    row.baseline_val_loss = in.baseline_val_loss;
    start_hash[i] = params_hash(*in.frozen);
    train::RunRecord& rec = res.records[i];
    try {
      const corpus::Windows train = train::plan_windows(*in.train, plan, in.seq_len);
      train::MftResult r = train::run_mft(*in.frozen, train, *in.val, plan);
      rec = std::move(r.record);
      res.masks[i] = std::move(r.best_mask);
    } catch (const std::exception& e) {
      rec = train::RunRecord{};
      rec.stage = train::to_string(train::Stage::mft);
      rec.config = train::plan_to_json(plan);
      rec.run_id = train::make_run_id(rec.stage, rec.config);
      rec.failed = true;
      rec.failure = e.what();
    }
    rec.checkpoint_ref = "sha256:" + start_hash[i];
    row.failed = rec.failed;
    row.run_id = rec.run_id;
    row.best_val_loss = rec.failed ? std::numeric_limits<double>::infinity() : rec.best_val_loss;
    row.metric = row.baseline_val_loss - row.best_val_loss;
    row.beats_baseline = !row.failed && row.metric > 0.0;
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(in.workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) run_point(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) run_point(i);
      });
    }
    for (auto& t : pool) t.join();
  }

  for (std::size_t i = 0; i < n; ++i) {
    if (start_hash[i] != reference) throw std::logic_error("sweep point " + res.rows[i].label + " saw different frozen weights");
  }
  if (params_hash(*in.frozen) != reference) throw std::logic_error("frozen weights changed during the sweep");
  res.best = best_row(res.rows);
  return res;
}

std::optional<std::size_t> best_row(const std::vector<SweepRow>& rows) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].failed) continue;
    if (!best || rows[i].metric > rows[*best].metric) best = i;
  }
  return best;
}

namespace {

constexpr const char* kSummaryHeader =
    "point,label,first_layer,last_layer,mask_ratio,data_ratio,best_val_loss,baseline_val_loss,metric,"
    "beats_baseline,failed,run_id";

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

std::string summary_csv(const SweepResult& result) {
  std::string out = std::string(kSummaryHeader) + "\n";
  for (std::size_t i = 0; i < result.rows.size(); ++i) {
    const SweepRow& r = result.rows[i];
    out += fmt::format("{},{},{},{},{},{},{},{},{},{},{},{}\n", i, r.label, r.first_layer, r.last_layer, r.mask_ratio,
                       r.data_ratio, r.best_val_loss, r.baseline_val_loss, r.metric, r.beats_baseline ? 1 : 0,
                       r.failed ? 1 : 0, r.run_id);
  }
  return out;
}

std::vector<SweepRow> parse_summary_csv(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  if (!std::getline(in, line) || line != kSummaryHeader) throw std::invalid_argument("not a sweep summary");
  std::vector<SweepRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 12) throw std::invalid_argument("sweep summary row has " + std::to_string(f.size()) + " fields");
    SweepRow r;
    r.label = f[1];
    r.first_layer = std::stoul(f[2]);
    r.last_layer = std::stoul(f[3]);
    r.mask_ratio = std::stod(f[4]);
    r.data_ratio = std::stod(f[5]);
    r.best_val_loss = f[6] == "inf" ? std::numeric_limits<double>::infinity() : std::stod(f[6]);
    r.baseline_val_loss = std::stod(f[7]);
    r.metric = f[8] == "-inf" ? -std::numeric_limits<double>::infinity() : std::stod(f[8]);
    r.beats_baseline = f[9] == "1";
    r.failed = f[10] == "1";
    r.run_id = f[11];
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// landscape

void LandscapeGrid::validate() const {
  if (nx < 1 || ny < 1 || nx % 2 == 0 || ny % 2 == 0) {
    throw std::invalid_argument(fmt::format("landscape grid {}x{} must have odd dimensions", nx, ny));
  }
  if (!(range > 0.0) || !std::isfinite(range)) throw std::invalid_argument("landscape range must be positive");
}

double LandscapeGrid::coord(std::size_t i, std::size_t n) const {
  if (n == 1) return 0.0;
  const auto half = static_cast<double>(n - 1) / 2.0;
  return range * (static_cast<double>(i) - half) / half;
}

namespace {

double dot(const Direction& a, const Direction& b) {
  double s = 0.0;
  for (const auto& [path, t] : a) {
    const Tensor& u = b.at(path);
    for (std::size_t i = 0; i < t.size(); ++i) s += t[i] * u[i];
  }
  return s;
}

}  // namespace

std::pair<Direction, Direction> random_directions(const lm::ModelParams& params,
                                                  const std::vector<std::string>& paths, std::uint64_t seed) {
  if (paths.empty()) throw std::invalid_argument("landscape needs at least one parameter path");
  Direction d[2];
  for (int k = 0; k < 2; ++k) {
    Rng rng(Rng::derive(seed, 500 + static_cast<std::uint64_t>(k)));
    for (const std::string& path : paths) {
      const Tensor& theta = params.at(path);
      Tensor t(theta.shape());
      double dn = 0.0, tn = 0.0;
      for (std::size_t i = 0; i < t.size(); ++i) {
        t[i] = rng.normal();
        dn += t[i] * t[i];
        tn += theta[i] * theta[i];
      }
      const double s = dn > 0.0 ? std::sqrt(tn) / std::sqrt(dn) : 0.0;
      for (std::size_t i = 0; i < t.size(); ++i) t[i] *= s;
      d[k].emplace(path, std::move(t));
    }
  }
  return {std::move(d[0]), std::move(d[1])};
}

void validate_directions(const lm::ModelParams& params, const Direction& d1, const Direction& d2) {
  if (d1.empty()) throw std::invalid_argument("empty landscape direction");
  if (d1.size() != d2.size()) throw std::invalid_argument("landscape directions cover different tensors");
  for (const auto& [path, t] : d1) {
    const auto it = d2.find(path);
    if (it == d2.end()) throw std::invalid_argument("direction 2 lacks '" + path + "'");
    if (!params.contains(path)) throw std::invalid_argument("direction tensor '" + path + "' is not a parameter");
    const Shape& s = params.at(path).shape();
    if (t.shape() != s || it->second.shape() != s) {
      throw ShapeError("direction '" + path + "' shape does not match parameter " + shape_str(s));
    }
    if (!t.all_finite() || !it->second.all_finite()) throw std::invalid_argument("non-finite direction entries");
  }
  const double n1 = dot(d1, d1), n2 = dot(d2, d2);
  if (!(n1 > 0.0) || !(n2 > 0.0)) throw std::invalid_argument("landscape direction has zero norm");
  const double cosine = dot(d1, d2) / std::sqrt(n1 * n2);
  if (std::abs(cosine) > kMaxDirectionCosine) {
    throw std::invalid_argument(fmt::format("landscape directions are nearly parallel (|cos| = {:.4f} > {})",
                                            std::abs(cosine), kMaxDirectionCosine));
  }
}

LandscapeScan scan_landscape(const lm::ModelParams& params, const mask::BinaryMask* mask, const Direction& d1,
                             const Direction& d2, const LandscapeGrid& grid, const LandscapeInputs& in) {
  grid.validate();
  if (!in.train || !in.test) throw std::invalid_argument("landscape needs train and test windows");
  validate_directions(params, d1, d2);
  std::optional<mask::FixedMaskOverlay> overlay;
  if (mask) overlay.emplace(*mask);
  const lm::WeightOverlay* ov = overlay ? &*overlay : nullptr;
  if (ov) lm::check_overlay(params, *ov);

  LandscapeScan scan;
  scan.grid = grid;
  for (const auto& [path, _] : d1) scan.paths.push_back(path);
  scan.d1 = d1;
  scan.d2 = d2;
  scan.train_surface.assign(grid.nx * grid.ny, 0.0);
  scan.test_surface.assign(grid.nx * grid.ny, 0.0);

  lm::ModelParams moved = params;
  const double inf = std::numeric_limits<double>::infinity();
  for (std::size_t iy = 0; iy < grid.ny; ++iy) {
    const double beta = grid.coord(iy, grid.ny);
    for (std::size_t ix = 0; ix < grid.nx; ++ix) {
      const double alpha = grid.coord(ix, grid.nx);
      for (const std::string& path : scan.paths) {
        const Tensor& base = params.at(path);
        const Tensor& u = d1.at(path);
        const Tensor& v = d2.at(path);
        Tensor& out = moved.at(path);
        for (std::size_t i = 0; i < base.size(); ++i) out[i] = base[i] + (alpha * u[i] + beta * v[i]);
      }
      const std::size_t cell = iy * grid.nx + ix;
      for (auto [windows, surface] : {std::pair{in.train, &scan.train_surface}, std::pair{in.test, &scan.test_surface}}) {
        double loss = inf;
        try {
          loss = train::evaluate_loss(moved, ov, *windows, in.batch_size, in.max_windows);
        } catch (const std::exception&) {
          loss = inf;
        }
        (*surface)[cell] = std::isfinite(loss) ? loss : inf;
      }
    }
  }
  return scan;
}

LandscapeScan scan_landscape(const lm::ModelParams& params, const mask::BinaryMask* mask, const LandscapeGrid& grid,
                             const LandscapeInputs& in, std::uint64_t seed) {
  const std::vector<std::string> paths =
      mask ? mask->paths() : params.linear_paths(0, params.config.n_layers - 1);
  // Redraw until the pair passes the parallelism check; in practice the first
  // draw always does for any tensor with more than a handful of entries.
  for (std::uint64_t attempt = 0; attempt < 16; ++attempt) {
    auto [d1, d2] = random_directions(params, paths, Rng::derive(seed, attempt));
    try {
      validate_directions(params, d1, d2);
    } catch (const std::invalid_argument&) {
      continue;
    }
    return scan_landscape(params, mask, d1, d2, grid, in);
  }
  throw std::invalid_argument("could not draw two non-parallel landscape directions");
}

std::string surface_csv(const LandscapeScan& scan, bool test) {
  const auto& g = scan.grid;
  std::string out = "beta\\alpha";
  for (std::size_t ix = 0; ix < g.nx; ++ix) out += fmt::format(",{}", g.coord(ix, g.nx));
  out += "\n";
  for (std::size_t iy = 0; iy < g.ny; ++iy) {
    out += fmt::format("{}", g.coord(iy, g.ny));
    for (std::size_t ix = 0; ix < g.nx; ++ix) out += fmt::format(",{}", test ? scan.test_at(ix, iy) : scan.train_at(ix, iy));
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// comparison

Comparison compare_protocol(const std::map<std::string, MethodResult>& results, const std::string& primary_domain,
                            const std::vector<std::string>& domains) {
  Comparison c;
  c.primary_domain = primary_domain;
  c.domains = domains;
  if (std::find(domains.begin(), domains.end(), primary_domain) == domains.end()) {
    c.domains.insert(c.domains.begin(), primary_domain);
  }
  for (const auto& [name, _] : results) {
    const auto& m = protocol_methods();
    if (std::find(m.begin(), m.end(), name) == m.end()) throw std::invalid_argument("unknown method '" + name + "'");
  }
  const auto ub = results.find(kUpperBound);
  for (const std::string& method : protocol_methods()) {
    ComparisonRow row;
    row.method = method;
    const auto it = results.find(method);
    if (it == results.end()) c.missing.push_back(method);
    for (const std::string& d : c.domains) {
      std::optional<double> v, ref;
      if (it != results.end()) {
        const auto l = it->second.loss.find(d);
        if (l != it->second.loss.end()) v = l->second;
      }
      if (ub != results.end()) {
        const auto l = ub->second.loss.find(d);
        if (l != ub->second.loss.end()) ref = l->second;
      }
      row.loss[d] = v;
      row.delta[d] = v && ref ? std::optional<double>(*v - *ref) : std::nullopt;
    }
    c.rows.push_back(std::move(row));
  }
  return c;
}

std::string comparison_csv(const Comparison& c) {
  std::string out = "method";
  for (const std::string& d : c.domains) out += fmt::format(",loss_{0},delta_{0}", d);
  out += "\n";
  auto cell = [](const std::optional<double>& v) { return v ? fmt::format("{}", *v) : std::string(); };
  for (const ComparisonRow& r : c.rows) {
    out += r.method;
    for (const std::string& d : c.domains) out += "," + cell(r.loss.at(d)) + "," + cell(r.delta.at(d));
    out += "\n";
  }
  return out;
}

}  // namespace maskft::eval
