#include "sqloss/experiment.hpp"

#include "CLI11.hpp"

#include <cstdio>
#include <exception>
#include <string>

namespace {

struct CommonArgs {
  std::string config_path;
  int jobs = 1;
  std::string output_dir;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "Path to the JSON experiment config")
      ->required();
  cmd->add_option("--jobs", args.jobs, "Parallel runs for sweeps (default 1)")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--output-dir", args.output_dir,
                  "Override the config's output directory");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gradient-flow and SGD laboratory for normalized ReLU networks"};
  app.require_subcommand(1);

  CommonArgs args;
  for (const char* name : {"flow", "train", "diagnose", "sweep"}) {
    add_common(app.add_subcommand(name), args);
  }

  CLI11_PARSE(app, argc, argv);
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    const sqloss::ExperimentConfig cfg = sqloss::load_config_file(args.config_path);
    if (cfg.command != command) {
      std::fprintf(stderr, "error: config declares command '%s' but '%s' was invoked\n",
                   cfg.command.c_str(), command.c_str());
      return 2;
    }
    const sqloss::RunSummary summary = sqloss::run_experiment(cfg, args.jobs, args.output_dir);
    for (const std::string& line : summary.log_lines) {
      std::printf("%s\n", line.c_str());
    }
    return summary.exit_status;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
