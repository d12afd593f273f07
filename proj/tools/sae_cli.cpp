// Command-line front end: sae <command> --config PATH [--seed N] [--threads N] [--output DIR]

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

#include "sae/sae.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Two-stage NNGP small area estimation"};
  app.require_subcommand(1);
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::optional<std::string> output;

  const char* help[][2] = {{"simulate", "generate synthetic plots, lidar, cells and truth"},
                           {"fit", "fit the outcome and covariate stages; writes checkpoints and params_summary.csv"},
                           {"select", "fit all six outcome variants; writes selection.csv"},
                           {"predict", "posterior predictive draws on the cells; writes predictions.csv"},
                           {"estimate", "areal density and total per stratum; writes estimates.csv"},
                           {"survey", "design-based post-stratified estimates; writes survey.csv"},
                           {"compare", "model versus design estimates; writes comparison.csv"},
                           {"stability", "density estimates on thinned grids; writes stability.csv"}};
  for (const auto& h : help) {
    auto* sub = app.add_subcommand(h[0], h[1]);
    sub->add_option("--config", config, "JSON run configuration")->required();
    sub->add_option("--seed", seed, "override the configured seed");
    sub->add_option("--threads", threads, "worker threads (results do not depend on it)");
    sub->add_option("--output", output, "output directory");
  }
  CLI11_PARSE(app, argc, argv);

  const std::string name = app.get_subcommands().front()->get_name();
  return sae::run_command(name, [&] {
    std::optional<std::filesystem::path> out;
    if (output) out = *output;
    return sae::load_config(config, seed, threads, out);
  });
}
