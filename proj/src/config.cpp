#include "maskft/config.hpp"

#include <algorithm>
#include <set>

#include "maskft/rng.hpp"

namespace maskft::config {

bool ExperimentConfig::wants(const std::string& stage) const {
  return std::find(stages.begin(), stages.end(), stage) != stages.end();
}

namespace {

using io::json;

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

void allow(const json& obj, const std::string& path, std::initializer_list<const char*> keys) {
  if (!obj.is_object()) throw ConfigError(path.empty() ? "<root>" : path, "expected an object");
  for (const auto& [key, _] : obj.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* k) { return key == k; })) {
      throw ConfigError(join(path, key), "unknown key");
    }
  }
}

template <class T>
T as(const json& v, const std::string& path);

template <>
std::size_t as(const json& v, const std::string& path) {
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
    throw ConfigError(path, "expected a non-negative integer");
  }
  return v.get<std::size_t>();
}
template <>
int as(const json& v, const std::string& path) {
  if (!v.is_number_integer()) throw ConfigError(path, "expected an integer");
  return v.get<int>();
}
template <>
double as(const json& v, const std::string& path) {
  if (!v.is_number()) throw ConfigError(path, "expected a number");
  return v.get<double>();
}
template <>
std::string as(const json& v, const std::string& path) {
  if (!v.is_string()) throw ConfigError(path, "expected a string");
  return v.get<std::string>();
}

template <class T>
void opt(const json& obj, const std::string& path, const char* key, T& out) {
  if (const auto it = obj.find(key); it != obj.end()) out = as<T>(*it, join(path, key));
}

template <class Fn>
auto checked(const std::string& path, Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(path, e.what());
  }
}

std::vector<std::string> string_list(const json& v, const std::string& path) {
  if (!v.is_array()) throw ConfigError(path, "expected an array of strings");
  std::vector<std::string> out;
  for (std::size_t i = 0; i < v.size(); ++i) out.push_back(as<std::string>(v[i], path + "[" + std::to_string(i) + "]"));
  return out;
}

lm::TransformerConfig parse_model(const json& j, const std::string& path) {
  allow(j, path, {"n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq_len"});
  lm::TransformerConfig c;
  opt(j, path, "n_layers", c.n_layers);
  opt(j, path, "d_model", c.d_model);
  opt(j, path, "n_heads", c.n_heads);
  opt(j, path, "d_ff", c.d_ff);
  opt(j, path, "vocab_size", c.vocab_size);
  opt(j, path, "max_seq_len", c.max_seq_len);
  checked(path, [&] { c.validate(); return 0; });
  return c;
}

corpus::DomainSpec parse_domain(const json& j, const std::string& path, corpus::Domain d) {
  corpus::DomainSpec s;
  s.name = d;
  switch (d) {
    case corpus::Domain::arith:
      allow(j, path, {"n_train", "n_val", "n_test", "max_len", "operand_min", "operand_max", "ops"});
      opt(j, path, "operand_min", s.operand_min);
      opt(j, path, "operand_max", s.operand_max);
      opt(j, path, "ops", s.ops);
      break;
    case corpus::Domain::dyck:
      allow(j, path, {"n_train", "n_val", "n_test", "max_len", "max_depth", "max_prefix"});
      opt(j, path, "max_depth", s.max_depth);
      opt(j, path, "max_prefix", s.max_prefix);
      break;
    case corpus::Domain::instr:
      allow(j, path, {"n_train", "n_val", "n_test", "max_len", "template_count"});
      opt(j, path, "template_count", s.template_count);
      break;
  }
  opt(j, path, "n_train", s.n_train);
  opt(j, path, "n_val", s.n_val);
  opt(j, path, "n_test", s.n_test);
  opt(j, path, "max_len", s.max_len);
  checked(path, [&] { s.validate(); return 0; });
  return s;
}

train::OptimizerConfig parse_optimizer(const json& j, const std::string& path, train::OptimizerConfig o) {
  allow(j, path, {"kind", "lr", "beta1", "beta2", "eps", "momentum"});
  if (const auto it = j.find("kind"); it != j.end()) {
    const std::string k = as<std::string>(*it, join(path, "kind"));
    o.kind = checked(join(path, "kind"), [&] { return train::parse_optimizer(k); });
  }
  opt(j, path, "lr", o.lr);
  opt(j, path, "beta1", o.beta1);
  opt(j, path, "beta2", o.beta2);
  opt(j, path, "eps", o.eps);
  opt(j, path, "momentum", o.momentum);
  return o;
}

train::TrainPlan default_plan(train::Stage stage) {
  train::TrainPlan p;
  p.stage = stage;
  p.epochs = 2;
  p.batch_size = 8;
  p.eval_every = 10;
  p.optimizer.lr = stage == train::Stage::mft ? 1e-2 : 1e-3;
  if (stage == train::Stage::mft) p.indicator = mask::IndicatorSpec::with_ratio(0.1);
  return p;
}

train::TrainPlan parse_plan(const json& j, const std::string& path, train::Stage stage,
                            const lm::TransformerConfig& model) {
  train::TrainPlan p = default_plan(stage);
  p.last_layer = model.n_layers - 1;
  if (stage == train::Stage::mft) {
    allow(j, path, {"epochs", "batch_size", "max_steps", "eval_every", "eval_max_windows", "data_ratio", "optimizer",
                    "layers", "indicator", "score_init"});
  } else {
    allow(j, path, {"epochs", "batch_size", "max_steps", "eval_every", "eval_max_windows", "data_ratio", "optimizer"});
  }
  opt(j, path, "epochs", p.epochs);
  opt(j, path, "batch_size", p.batch_size);
  opt(j, path, "max_steps", p.max_steps);
  opt(j, path, "eval_every", p.eval_every);
  opt(j, path, "eval_max_windows", p.eval_max_windows);
  opt(j, path, "data_ratio", p.data_ratio);
  if (const auto it = j.find("optimizer"); it != j.end()) p.optimizer = parse_optimizer(*it, join(path, "optimizer"), p.optimizer);
  if (stage == train::Stage::mft) {
    if (const auto it = j.find("layers"); it != j.end()) {
      const std::string lp = join(path, "layers");
      if (!it->is_array() || it->size() != 2) throw ConfigError(lp, "expected [first, last]");
      p.first_layer = as<std::size_t>((*it)[0], lp + "[0]");
      p.last_layer = as<std::size_t>((*it)[1], lp + "[1]");
    }
    if (const auto it = j.find("indicator"); it != j.end()) {
      const std::string ip = join(path, "indicator");
      allow(*it, ip, {"mode", "ratio", "threshold"});
      std::string mode = "ratio";
      opt(*it, ip, "mode", mode);
      const auto m = checked(join(ip, "mode"), [&] { return mask::parse_indicator_mode(mode); });
      if (m == mask::IndicatorMode::ratio) {
        if (it->contains("threshold")) throw ConfigError(join(ip, "threshold"), "not used in ratio mode");
        double k = 0.1;
        opt(*it, ip, "ratio", k);
        p.indicator = mask::IndicatorSpec::with_ratio(k);
      } else {
        if (it->contains("ratio")) throw ConfigError(join(ip, "ratio"), "not used in threshold mode");
        double t = 0.0;
        opt(*it, ip, "threshold", t);
        p.indicator = mask::IndicatorSpec::with_threshold(t);
      }
    }
    if (const auto it = j.find("score_init"); it != j.end()) {
      const std::string s = as<std::string>(*it, join(path, "score_init"));
      p.score_init = checked(join(path, "score_init"), [&] { return mask::parse_score_init(s); });
    }
  }
  checked(path, [&] { p.validate(model); return 0; });
  return p;
}

json plan_json(const train::TrainPlan& p) {
  json j{{"epochs", p.epochs},
         {"batch_size", p.batch_size},
         {"max_steps", p.max_steps},
         {"eval_every", p.eval_every},
         {"eval_max_windows", p.eval_max_windows},
         {"data_ratio", p.data_ratio},
         {"optimizer",
          {{"kind", train::to_string(p.optimizer.kind)},
           {"lr", p.optimizer.lr},
           {"beta1", p.optimizer.beta1},
           {"beta2", p.optimizer.beta2},
           {"eps", p.optimizer.eps},
           {"momentum", p.optimizer.momentum}}}};
  if (p.stage == train::Stage::mft) {
    j["layers"] = {p.first_layer, p.last_layer};
    j["score_init"] = mask::to_string(p.score_init);
    j["indicator"] = {{"mode", mask::to_string(p.indicator->mode)}};
    if (p.indicator->mode == mask::IndicatorMode::ratio) j["indicator"]["ratio"] = p.indicator->ratio;
    else j["indicator"]["threshold"] = p.indicator->threshold;
  }
  return j;
}

json domain_json(const corpus::DomainSpec& s) {
  json j{{"n_train", s.n_train}, {"n_val", s.n_val}, {"n_test", s.n_test}, {"max_len", s.max_len}};
  switch (s.name) {
    case corpus::Domain::arith:
      j["operand_min"] = s.operand_min;
      j["operand_max"] = s.operand_max;
      j["ops"] = s.ops;
      break;
    case corpus::Domain::dyck:
      j["max_depth"] = s.max_depth;
      j["max_prefix"] = s.max_prefix;
      break;
    case corpus::Domain::instr: j["template_count"] = s.template_count; break;
  }
  return j;
}

}  // namespace

void apply_seed(ExperimentConfig& c, std::uint64_t seed) {
  c.seed = seed;
  std::uint64_t stream = 0;
  for (auto& [name, spec] : c.domains) spec.seed = Rng::derive(seed, 100 + static_cast<std::uint64_t>(spec.name));
  for (train::TrainPlan* p : {&c.pretrain.plan, &c.fft, &c.continued_fft, &c.mft}) p->seed = Rng::derive(seed, 200 + stream++);
  for (auto& s : c.sweeps) s.grid.base.seed = c.mft.seed;
}

ExperimentConfig parse(const json& j) {
  allow(j, "", {"schema_version", "run_id", "output_dir", "seed", "stages", "model", "seq_len", "workers",
                "primary_domain", "domains", "pretrain", "fft", "continued_fft", "mft", "baselines", "sweeps",
                "landscape", "eval"});
  ExperimentConfig c;
  if (!j.contains("schema_version")) throw ConfigError("schema_version", "missing");
  c.schema_version = as<int>(j.at("schema_version"), "schema_version");
  if (c.schema_version != kSchemaVersion) {
    throw ConfigError("schema_version", "unsupported version " + std::to_string(c.schema_version) + " (expected " +
                                            std::to_string(kSchemaVersion) + ")");
  }
  opt(j, "", "run_id", c.run_id);
  if (c.run_id.find_first_of("/\\") != std::string::npos || c.run_id == "." || c.run_id == "..") {
    throw ConfigError("run_id", "must be a plain directory name");
  }
  std::string out_dir = c.output_dir.string();
  opt(j, "", "output_dir", out_dir);
  c.output_dir = out_dir;
  opt(j, "", "seed", c.seed);
  if (const auto it = j.find("stages"); it != j.end()) {
    c.stages = string_list(*it, "stages");
    std::set<std::string> seen;
    for (std::size_t i = 0; i < c.stages.size(); ++i) {
      const auto& known = all_stages();
      if (std::find(known.begin(), known.end(), c.stages[i]) == known.end()) {
        throw ConfigError("stages[" + std::to_string(i) + "]", "unknown stage '" + c.stages[i] + "'");
      }
      if (!seen.insert(c.stages[i]).second) throw ConfigError("stages[" + std::to_string(i) + "]", "duplicate stage");
    }
  }
  if (const auto it = j.find("model"); it != j.end()) c.model = parse_model(*it, "model");
  opt(j, "", "seq_len", c.seq_len);
  if (c.seq_len < 1 || c.seq_len > c.model.max_seq_len) throw ConfigError("seq_len", "must lie in [1, model.max_seq_len]");
  opt(j, "", "workers", c.workers);
  if (c.workers < 1) throw ConfigError("workers", "must be >= 1");

  if (const auto it = j.find("domains"); it != j.end()) {
    if (!it->is_object() || it->empty()) throw ConfigError("domains", "expected a non-empty object");
    for (const auto& [name, spec] : it->items()) {
      const auto d = checked("domains." + name, [&] { return corpus::parse_domain(name); });
      c.domains[name] = parse_domain(spec, "domains." + name, d);
    }
  } else {
    for (auto d : {corpus::Domain::arith, corpus::Domain::dyck, corpus::Domain::instr}) {
      c.domains[corpus::to_string(d)] = parse_domain(json::object(), "domains", d);
    }
  }
  opt(j, "", "primary_domain", c.primary_domain);
  if (!c.domains.count(c.primary_domain)) throw ConfigError("primary_domain", "'" + c.primary_domain + "' is not configured");

  c.pretrain.plan = default_plan(train::Stage::fft);
  c.pretrain.plan.epochs = 0;
  if (const auto it = j.find("pretrain"); it != j.end()) {
    json plan = *it;
    if (plan.is_object() && plan.contains("domains")) {
      c.pretrain.domains = string_list(plan["domains"], "pretrain.domains");
      for (std::size_t i = 0; i < c.pretrain.domains.size(); ++i) {
        if (!c.domains.count(c.pretrain.domains[i])) {
          throw ConfigError("pretrain.domains[" + std::to_string(i) + "]", "domain is not configured");
        }
      }
      plan.erase("domains");
    }
    c.pretrain.plan = parse_plan(plan, "pretrain", train::Stage::fft, c.model);
  }
  c.fft = default_plan(train::Stage::fft);
  c.continued_fft = default_plan(train::Stage::continued_fft);
  c.mft = default_plan(train::Stage::mft);
  c.mft.last_layer = c.model.n_layers - 1;
  if (const auto it = j.find("fft"); it != j.end()) c.fft = parse_plan(*it, "fft", train::Stage::fft, c.model);
  if (const auto it = j.find("continued_fft"); it != j.end()) {
    c.continued_fft = parse_plan(*it, "continued_fft", train::Stage::continued_fft, c.model);
  }
  if (const auto it = j.find("mft"); it != j.end()) c.mft = parse_plan(*it, "mft", train::Stage::mft, c.model);

  c.baselines.ratio = c.mft.indicator->mode == mask::IndicatorMode::ratio ? c.mft.indicator->ratio : 0.1;
  if (const auto it = j.find("baselines"); it != j.end()) {
    allow(*it, "baselines", {"kinds", "ratio"});
    if (const auto k = it->find("kinds"); k != it->end()) {
      c.baselines.kinds.clear();
      const auto names = string_list(*k, "baselines.kinds");
      for (std::size_t i = 0; i < names.size(); ++i) {
        c.baselines.kinds.push_back(
            checked("baselines.kinds[" + std::to_string(i) + "]", [&] { return baseline::parse_kind(names[i]); }));
      }
    }
    opt(*it, "baselines", "ratio", c.baselines.ratio);
    if (!(c.baselines.ratio > 0.0 && c.baselines.ratio < 1.0)) throw ConfigError("baselines.ratio", "must lie in (0, 1)");
  }

  if (const auto it = j.find("sweeps"); it != j.end()) {
    if (!it->is_array()) throw ConfigError("sweeps", "expected an array");
    std::set<std::string> names;
    for (std::size_t i = 0; i < it->size(); ++i) {
      const std::string sp = "sweeps[" + std::to_string(i) + "]";
      const json& s = (*it)[i];
      allow(s, sp, {"name", "axis", "values", "group_width"});
      SweepConfig sc;
      if (!s.contains("name")) throw ConfigError(sp + ".name", "missing");
      if (!s.contains("axis")) throw ConfigError(sp + ".axis", "missing");
      sc.name = as<std::string>(s.at("name"), sp + ".name");
      if (sc.name.empty() || sc.name.find_first_not_of("abcdefghijklmnopqrstuvwxyz0123456789_-") != std::string::npos) {
        throw ConfigError(sp + ".name", "use lowercase letters, digits, '_' or '-'");
      }
      if (!names.insert(sc.name).second) throw ConfigError(sp + ".name", "duplicate sweep name");
      const std::string axis = as<std::string>(s.at("axis"), sp + ".axis");
      sc.grid.axis = checked(sp + ".axis", [&] { return eval::parse_axis(axis); });
      sc.grid.base = c.mft;
      if (sc.grid.axis == eval::Axis::layer_group) {
        opt(s, sp, "group_width", sc.grid.group_width);
        if (s.contains("values")) throw ConfigError(sp + ".values", "layer_group sweeps enumerate their own groups");
        sc.grid = checked(sp, [&] {
          return eval::SweepGrid::over_layer_groups(c.model.n_layers, sc.grid.group_width, sc.grid.base);
        });
      } else {
        if (s.contains("group_width")) throw ConfigError(sp + ".group_width", "only used by layer_group sweeps");
        if (!s.contains("values") || !s.at("values").is_array()) throw ConfigError(sp + ".values", "expected an array");
        for (std::size_t k = 0; k < s.at("values").size(); ++k) {
          sc.grid.values.push_back(as<double>(s.at("values")[k], sp + ".values[" + std::to_string(k) + "]"));
        }
        if (sc.grid.axis == eval::Axis::mask_ratio && sc.grid.base.indicator->mode != mask::IndicatorMode::ratio) {
          sc.grid.base.indicator = mask::IndicatorSpec::with_ratio(0.1);
        }
      }
      checked(sp, [&] { sc.grid.validate(c.model); return 0; });
      c.sweeps.push_back(std::move(sc));
    }
  }

  if (const auto it = j.find("landscape"); it != j.end()) {
    allow(*it, "landscape", {"nx", "ny", "range", "max_windows"});
    opt(*it, "landscape", "nx", c.landscape.grid.nx);
    opt(*it, "landscape", "ny", c.landscape.grid.ny);
    opt(*it, "landscape", "range", c.landscape.grid.range);
    opt(*it, "landscape", "max_windows", c.landscape.max_windows);
    checked("landscape", [&] { c.landscape.grid.validate(); return 0; });
  }
  if (const auto it = j.find("eval"); it != j.end()) {
    allow(*it, "eval", {"batch_size", "max_windows"});
    opt(*it, "eval", "batch_size", c.eval.batch_size);
    opt(*it, "eval", "max_windows", c.eval.max_windows);
    if (c.eval.batch_size < 1) throw ConfigError("eval.batch_size", "must be >= 1");
  }
  apply_seed(c, c.seed);
  return c;
}

ExperimentConfig load(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(io::read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("<root>", std::string("invalid JSON: ") + e.what());
  }
  return parse(j);
}

json to_json(const ExperimentConfig& c) {
  json domains = json::object();
  for (const auto& [name, spec] : c.domains) domains[name] = domain_json(spec);
  json pretrain = plan_json(c.pretrain.plan);
  pretrain["domains"] = c.pretrain.domains;
  json kinds = json::array();
  for (auto k : c.baselines.kinds) kinds.push_back(baseline::to_string(k));
  json sweeps = json::array();
  for (const auto& s : c.sweeps) {
    json sj{{"name", s.name}, {"axis", eval::to_string(s.grid.axis)}};
    if (s.grid.axis == eval::Axis::layer_group) sj["group_width"] = s.grid.group_width;
    else sj["values"] = s.grid.values;
    sweeps.push_back(sj);
  }
  return json{{"schema_version", c.schema_version},
              {"run_id", c.run_id},
              {"output_dir", c.output_dir.string()},
              {"seed", c.seed},
              {"stages", c.stages},
              {"model", io::config_to_json(c.model)},
              {"seq_len", c.seq_len},
              {"workers", c.workers},
              {"primary_domain", c.primary_domain},
              {"domains", domains},
              {"pretrain", pretrain},
              {"fft", plan_json(c.fft)},
              {"continued_fft", plan_json(c.continued_fft)},
              {"mft", plan_json(c.mft)},
              {"baselines", {{"kinds", kinds}, {"ratio", c.baselines.ratio}}},
              {"sweeps", sweeps},
              {"landscape",
               {{"nx", c.landscape.grid.nx},
                {"ny", c.landscape.grid.ny},
                {"range", c.landscape.grid.range},
                {"max_windows", c.landscape.max_windows}}},
              {"eval", {{"batch_size", c.eval.batch_size}, {"max_windows", c.eval.max_windows}}}};
}

json default_json() {
  ExperimentConfig c = parse(json{{"schema_version", kSchemaVersion}});
  return to_json(c);
}

}  // namespace maskft::config
