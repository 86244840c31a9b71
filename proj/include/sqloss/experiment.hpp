#pragma once

#include "sqloss/datasets.hpp"
#include "sqloss/flow.hpp"
#include "sqloss/sgd.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace sqloss {

struct DatasetConfig {
  bool is_csv = false;
  std::string csv_path;
  SyntheticSpec synthetic;
};

struct NetworkConfig {
  std::vector<int> hidden;  // widths between input and the scalar output

  int depth() const { return static_cast<int>(hidden.size()) + 1; }
};

struct FlowSection {
  FlowConfig cfg;
  double rho0 = 0.01;
  std::uint64_t seed = 0;
};

struct SweepSection {
  std::string engine;  // "flow" or "train"
  // Swept lists; absent lists fall back to the base section's single value.
  std::vector<double> lambda;          // flow
  std::vector<double> rho0;            // flow
  std::vector<double> weight_decay;    // train
  std::vector<double> init_frobenius;  // train
  std::vector<NormalizeMode> normalize;  // train
  std::vector<std::uint64_t> seed;     // both
};

struct ExperimentConfig {
  std::string command;  // flow, train, diagnose, sweep
  std::string output_dir = ".";
  DatasetConfig dataset;
  std::optional<NetworkConfig> network;
  std::optional<FlowSection> flow;
  std::optional<TrainConfig> train;
  std::optional<std::string> diagnose_checkpoint;
  std::optional<SweepSection> sweep;
};

/// Strict parse: unknown keys anywhere, a missing required section, or a section
/// not belonging to the command are errors listing the offending keys.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config_file(const std::string& path);

struct RunSummary {
  int exit_status = 0;  // nonzero when any run failed
  std::vector<std::string> log_lines;
};

/// Executes the configured command, writing traces, checkpoints, reports and
/// manifest.json into the output directory. jobs > 1 parallelizes sweep grid
/// points; single runs are always sequential.
RunSummary run_experiment(const ExperimentConfig& cfg, int jobs = 1,
                          const std::string& output_dir_override = "");

std::uint64_t fnv1a64(const std::string& bytes);

}  // namespace sqloss
