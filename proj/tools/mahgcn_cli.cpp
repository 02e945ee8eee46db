#include "mahgcn/pipeline.hpp"

#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

namespace {

struct CommonOpts {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  int jobs = 1;
};

void attach(CLI::App* sub, CommonOpts& opts) {
  sub->add_option("--config", opts.config_path, "run configuration (JSON)")
      ->required();
  sub->add_option("--seed", opts.seed, "override the config seed");
  sub->add_option("--out", opts.out, "override the output directory");
  sub->add_option("--jobs", opts.jobs, "worker threads (currently single-core)")
      ->check(CLI::PositiveNumber);
}

int run(const std::string& command, const CommonOpts& opts) {
  try {
    mahgcn::pipeline::RunConfig cfg =
        mahgcn::pipeline::RunConfig::load(opts.config_path);
    if (opts.seed || opts.out) {
      nlohmann::json j = cfg.raw;
      if (opts.seed) j["seed"] = *opts.seed;
      if (opts.out) j["out"] = *opts.out;
      cfg = mahgcn::pipeline::RunConfig::from_json(std::move(j), cfg.base_dir);
    }
    mahgcn::pipeline::run_command(command, cfg);
    std::cout << command << ": ok, outputs in " << cfg.out_dir.string() << "\n";
    return 0;
  } catch (const mahgcn::Error& e) {
    std::cerr << "error [" << e.kind() << "]: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multiscale brain-network classification pipeline"};
  app.require_subcommand(1);

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"synth", "generate a synthetic multi-site cohort with planted effects"},
      {"build-bfn", "build functional networks from a timeseries cohort"},
      {"harmonize", "remove site effects from a network cohort"},
      {"train", "cross-validated training with reports and checkpoints"},
      {"transfer", "pretrain on source sites and fine-tune K-shot on targets"},
      {"explain", "consensus node attributions from trained fold models"},
      {"embed", "diffusion-map embedding of subject relations"},
      {"report", "consolidate stage reports into one summary"}};

  std::map<std::string, CommonOpts> opts;
  for (const auto& [name, desc] : commands)
    attach(app.add_subcommand(name, desc), opts[name]);

  CLI11_PARSE(app, argc, argv);

  for (const auto& [name, desc] : commands)
    if (app.get_subcommand(name)->parsed()) return run(name, opts[name]);
  return 1;
}
