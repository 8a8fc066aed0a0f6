#include <iostream>

#include <CLI11.hpp>

#include "bns/app.hpp"

int main(int argc, char** argv) {
  CLI::App cli{"Sampled batch-normalization experiments"};
  cli.require_subcommand(1);
  cli.set_version_flag("--version", bns::app::version());

  bns::app::Options opts;
  std::uint64_t seed = 0;
  std::string out;
  for (const auto& name : bns::app::commands()) {
    auto* sub = cli.add_subcommand(name, "Run the " + name + " command");
    sub->add_option("--config", opts.config, "JSON run configuration")->required();
    sub->add_option("--seed", seed, "Run a single seed (overrides the config and BNSAMPLE_SEED)");
    sub->add_option("--out", out, "Output directory (overrides output_dir)");
    sub->add_option("--jobs", opts.jobs, "Worker processes for independent seeds")->check(CLI::PositiveNumber);
    sub->callback([&opts, name] { opts.command = name; });
  }

  try {
    cli.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = cli.exit(e);
    return code == 0 ? 0 : bns::app::invalid_config;
  }
  for (auto* sub : cli.get_subcommands()) {
    if (sub->count("--seed") > 0) opts.seed = seed;
    if (sub->count("--out") > 0) opts.out = out;
  }

  try {
    return bns::app::run(opts, std::cout);
  } catch (const std::exception& e) {
    std::cerr << "fatal: " << e.what() << '\n';
    return bns::app::crash;
  }
}
