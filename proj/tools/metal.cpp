#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

#include "metal/run.hpp"

int main(int argc, char** argv) {
  CLI::App app{"metal: sequential multi-task model-based RL experiments"};
  app.require_subcommand(1);
  std::string config_path, out_dir, preset;
  std::optional<std::uint64_t> seed;
  bool resume = false;
  for (const char* mode : {"train", "adapt", "baseline", "active"}) {
    auto* sub = app.add_subcommand(mode);
    sub->add_option("--config", config_path, "experiment configuration (YAML)")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", out_dir, "output directory")->required();
    sub->add_option("--seed", seed, "override the configured seed");
    sub->add_option("--preset", preset, "scale preset")->check(CLI::IsMember({"desk", "paper"}));
    if (std::string(mode) == "train") sub->add_flag("--resume", resume, "continue from the checkpoint in --out");
  }
  CLI11_PARSE(app, argc, argv);
  const std::string mode = app.get_subcommands().front()->get_name();
  try {
    auto cfg = metal::load_config(config_path, mode, preset.empty() ? std::nullopt : std::optional(preset), seed);
    if (resume) cfg.resume = true;
    return metal::run(cfg, out_dir);
  } catch (const metal::ConfigError& e) {
    std::cerr << e.what() << '\n';
    return 2;
  }
}
