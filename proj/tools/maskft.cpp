// maskft: run an experiment config, inspect artifacts, render plots.

#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "maskft/config.hpp"
#include "maskft/io.hpp"
#include "maskft/pipeline.hpp"
#include "maskft/simd/kernels.hpp"

namespace {

int cmd_run(const std::string& path) {
  maskft::config::ExperimentConfig cfg;
  try {
    cfg = maskft::config::load(path);
    if (const char* s = std::getenv("MASKFT_SEED"); s && *s) {
      char* end = nullptr;
      errno = 0;
      const unsigned long long seed = std::strtoull(s, &end, 10);
      if (*end != '\0' || errno != 0 || s[0] == '-') throw maskft::config::ConfigError("MASKFT_SEED", "not an unsigned integer");
      maskft::config::apply_seed(cfg, seed);
    }
  } catch (const maskft::config::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  try {
    std::cerr << "kernels: " << maskft::simd::isa_name(maskft::simd::active().isa) << "\n";
    const auto out = maskft::pipeline::run(cfg, std::cout);
    if (out.exit_code != 0) {
      std::cerr << out.error << "\n";
      return out.exit_code;
    }
    std::cout << out.run_dir.string() << "\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

int cmd_inspect(const std::string& path) {
  try {
    std::cout << maskft::pipeline::inspect(path);
    return 0;
  } catch (const maskft::io::FormatError& e) {
    std::cerr << path << ": corrupt at byte " << e.offset() << ": " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << path << ": " << e.what() << "\n";
    return 1;
  }
}

int cmd_plot(const std::string& dir) {
  try {
    for (const auto& p : maskft::pipeline::plot(dir)) std::cout << p.string() << "\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mask fine-tuning experiments"};
  app.require_subcommand(1);

  std::string config_path, inspect_path, run_dir;
  auto* run = app.add_subcommand("run", "Run the stages of an experiment config");
  run->add_option("config", config_path, "Experiment config (JSON)")->required();
  auto* inspect = app.add_subcommand("inspect", "Describe a checkpoint, mask, record or sweep summary");
  inspect->add_option("path", inspect_path, "Artifact file")->required();
  auto* plot = app.add_subcommand("plot", "Render SVG plots for a run directory");
  plot->add_option("run_dir", run_dir, "Run directory")->required();
  auto* defaults = app.add_subcommand("defaults", "Print the default config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  if (*run) return cmd_run(config_path);
  if (*inspect) return cmd_inspect(inspect_path);
  if (*plot) return cmd_plot(run_dir);
  if (*defaults) {
    std::cout << maskft::config::default_json().dump(2) << "\n";
    return 0;
  }
  return 2;
}
