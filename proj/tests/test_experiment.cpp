#include "sqloss/experiment.hpp"

#include "doctest.h"
#include "json.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

using namespace sqloss;
namespace fs = std::filesystem;

namespace {

struct ScratchDir {
  fs::path path;

  explicit ScratchDir(const std::string& tag)
      : path(fs::temp_directory_path() / ("sqloss_exp_" + tag)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~ScratchDir() { fs::remove_all(path); }

  std::string str() const { return path.string(); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

nlohmann::json read_json(const std::string& path) {
  return nlohmann::json::parse(read_text(path));
}

std::vector<std::string> files_with_prefix(const fs::path& dir, const std::string& prefix) {
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind(prefix, 0) == 0) names.push_back(name);
  }
  std::sort(names.begin(), names.end());
  return names;
}

const char* kDataset12 =
    R"("dataset": {"kind": "margin_separable", "n_samples": 12, "raw_dim": 3, "gap": 0.3, "seed": 2})";

std::string flow_config() {
  return std::string("{\"command\": \"flow\", ") + kDataset12 +
         R"(, "network": {"widths": []},
            "flow": {"lambda": 0.01, "dt": 0.001, "t_max": 3.0, "trace_stride": 100,
                     "rho0": 0.01, "seed": 3}})";
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(SQLOSSFLOW_BIN) + " " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST_CASE("fnv1a64 matches the published test vectors") {
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(fnv1a64("foobar") == 0x85944171f73967e8ULL);
}

TEST_CASE("parse_config accepts a minimal flow config and fills defaults") {
  ExperimentConfig cfg = parse_config(flow_config());
  CHECK(cfg.command == "flow");
  CHECK(cfg.output_dir == ".");
  REQUIRE(cfg.network.has_value());
  CHECK(cfg.network->hidden.empty());
  CHECK(cfg.network->depth() == 1);
  REQUIRE(cfg.flow.has_value());
  CHECK(cfg.flow->cfg.lambda == 0.01);
  CHECK(cfg.flow->cfg.integrator == Integrator::euler_project);
  CHECK(cfg.flow->cfg.tol_equilibrium == 1e-7);
  CHECK(cfg.flow->rho0 == 0.01);
  CHECK(cfg.flow->seed == 3);
  CHECK(!cfg.train.has_value());
  CHECK(!cfg.sweep.has_value());
  CHECK(!cfg.dataset.is_csv);
  CHECK(cfg.dataset.synthetic.n_samples == 12);
}

TEST_CASE("parse_config accepts csv datasets and train sections") {
  const std::string text = R"({
    "command": "train", "output_dir": "/tmp/somewhere",
    "dataset": {"kind": "csv", "path": "points.csv"},
    "network": {"depth": 2, "widths": [6]},
    "train": {"lr": 0.001, "momentum": 0.5, "batch_size": 4, "epochs": 10,
              "weight_decay": 0.01, "normalize": "row", "init_frobenius": [0.5, 2.0],
              "seed": 9, "trace_stride": 5}})";
  ExperimentConfig cfg = parse_config(text);
  CHECK(cfg.output_dir == "/tmp/somewhere");
  CHECK(cfg.dataset.is_csv);
  CHECK(cfg.dataset.csv_path == "points.csv");
  REQUIRE(cfg.train.has_value());
  CHECK(cfg.train->normalize == NormalizeMode::row);
  CHECK(cfg.train->init_frobenius == std::vector<double>{0.5, 2.0});
  CHECK(cfg.train->momentum == 0.5);
}

TEST_CASE("parse_config rejects malformed documents") {
  CHECK_THROWS_WITH_AS(parse_config("{nope"), doctest::Contains("not valid JSON"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config("[1, 2]"), doctest::Contains("must be a JSON object"),
                       std::invalid_argument);

  std::string cfg = flow_config();
  cfg.insert(1, "\"frobnicate\": 1, ");
  CHECK_THROWS_WITH_AS(parse_config(cfg), doctest::Contains("unknown key(s) in config"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config(cfg), doctest::Contains("frobnicate"),
                       std::invalid_argument);

  CHECK_THROWS_WITH_AS(
      parse_config(R"({"command": "evolve", "dataset": {"kind": "csv", "path": "x"}})"),
      doctest::Contains("command must be flow, train, diagnose or sweep"),
      std::invalid_argument);
}

TEST_CASE("parse_config enforces the command-section pairing") {
  std::string with_train = flow_config();
  with_train.insert(1, R"("train": {"lr": 0.1}, )");
  CHECK_THROWS_WITH_AS(parse_config(with_train),
                       doctest::Contains("does not take the 'train' section"),
                       std::invalid_argument);

  CHECK_THROWS_WITH_AS(
      parse_config(std::string("{\"command\": \"flow\", ") + kDataset12 +
                   R"(, "network": {"widths": []}})"),
      doctest::Contains("requires the 'flow' section"), std::invalid_argument);

  CHECK_THROWS_WITH_AS(
      parse_config(R"({"command": "flow", "network": {"widths": []}, "flow": {}})"),
      doctest::Contains("requires the 'dataset' section"), std::invalid_argument);

  CHECK_THROWS_WITH_AS(
      parse_config(std::string("{\"command\": \"diagnose\", ") + kDataset12 +
                   R"(, "network": {"widths": []}, "diagnose": {"checkpoint": "c.json"}})"),
      doctest::Contains("does not take the 'network' section"), std::invalid_argument);

  // sweep over train settings must not carry a flow section
  CHECK_THROWS_WITH_AS(
      parse_config(std::string("{\"command\": \"sweep\", ") + kDataset12 +
                   R"(, "network": {"widths": []},
                       "flow": {"lambda": 0.1},
                       "train": {"lr": 0.001},
                       "sweep": {"engine": "train", "weight_decay": [0.1]}})"),
      doctest::Contains("does not take the 'flow' section"), std::invalid_argument);
}

TEST_CASE("parse_config rejects bad section contents") {
  std::string bad_integrator = flow_config();
  const std::string key = "\"lambda\": 0.01";
  bad_integrator.replace(bad_integrator.find(key), key.size(),
                         "\"integrator\": \"leapfrog\", \"lambda\": 0.01");
  CHECK_THROWS_WITH_AS(parse_config(bad_integrator),
                       doctest::Contains("euler_project or rk4_project"),
                       std::invalid_argument);

  std::string unknown_flow_key = flow_config();
  unknown_flow_key.replace(unknown_flow_key.find(key), key.size(),
                           "\"step_size\": 0.1, \"lambda\": 0.01");
  CHECK_THROWS_WITH_AS(parse_config(unknown_flow_key),
                       doctest::Contains("unknown key(s) in flow"), std::invalid_argument);

  CHECK_THROWS_WITH_AS(
      parse_config(std::string("{\"command\": \"sweep\", ") + kDataset12 +
                   R"(, "network": {"widths": []},
                       "flow": {"lambda": 0.1},
                       "sweep": {"engine": "flow", "weight_decay": [0.1]}})"),
      doctest::Contains("unknown key(s) in sweep"), std::invalid_argument);

  CHECK_THROWS_WITH_AS(
      parse_config(std::string("{\"command\": \"sweep\", ") + kDataset12 +
                   R"(, "network": {"widths": []}, "flow": {},
                       "sweep": {"engine": "annealing"}})"),
      doctest::Contains("sweep.engine must be flow or train"), std::invalid_argument);

  std::string depth_clash = flow_config();
  const std::string net = R"("network": {"widths": []})";
  depth_clash.replace(depth_clash.find(net), net.size(),
                      R"("network": {"depth": 3, "widths": [5]})");
  CHECK_THROWS_WITH_AS(parse_config(depth_clash), doctest::Contains("widths implies"),
                       std::invalid_argument);

  std::string bad_width = flow_config();
  bad_width.replace(bad_width.find(net), net.size(), R"("network": {"widths": [0]})");
  CHECK_THROWS_WITH_AS(parse_config(bad_width), doctest::Contains("positive integers"),
                       std::invalid_argument);

  CHECK_THROWS_WITH_AS(
      parse_config(R"({"command": "train",
                       "dataset": {"kind": "blobs", "n_samples": 4, "raw_dim": 2},
                       "network": {"widths": []}, "train": {}})"),
      doctest::Contains("dataset.kind must be"), std::invalid_argument);

  CHECK_THROWS_WITH_AS(
      parse_config(std::string("{\"command\": \"train\", ") + kDataset12 +
                   R"(, "network": {"widths": []},
                       "train": {"normalize": "spectral"}})"),
      doctest::Contains("none, matrix, row"), std::invalid_argument);

  CHECK_THROWS_WITH_AS(
      parse_config(std::string("{\"command\": \"train\", ") + kDataset12 +
                   R"(, "network": {"widths": []}, "train": {"seed": -4}})"),
      doctest::Contains("non-negative integer"), std::invalid_argument);

  // csv datasets carry only a path; synthetic knobs are unknown keys there
  CHECK_THROWS_WITH_AS(
      parse_config(R"({"command": "train",
                       "dataset": {"kind": "csv", "path": "x", "n_samples": 5},
                       "network": {"widths": []}, "train": {}})"),
      doctest::Contains("unknown key(s) in dataset"), std::invalid_argument);
}

TEST_CASE("load_config_file reads from disk and reports missing files") {
  ScratchDir dir("cfgfile");
  CHECK_THROWS_WITH_AS(load_config_file(dir.file("absent.json")),
                       doctest::Contains("cannot open config file"), std::runtime_error);
  write_text(dir.file("ok.json"), flow_config());
  ExperimentConfig cfg = load_config_file(dir.file("ok.json"));
  CHECK(cfg.command == "flow");
}

TEST_CASE("flow experiments write trace, checkpoint and manifest") {
  ScratchDir dir("flowrun");
  ExperimentConfig cfg = parse_config(flow_config());
  RunSummary summary = run_experiment(cfg, 1, dir.str());
  CHECK(summary.exit_status == 0);
  REQUIRE(!summary.log_lines.empty());
  CHECK(summary.log_lines.back() == "wrote manifest.json");

  nlohmann::json manifest = read_json(dir.file("manifest.json"));
  CHECK(manifest.at("command") == "flow");
  CHECK(manifest.at("jobs") == 1);
  CHECK(manifest.at("wall_time_seconds").get<double>() >= 0.0);
  CHECK(manifest.at("config").at("flow").at("lambda") == 0.01);
  CHECK(manifest.at("config").at("dataset").at("kind") == "margin_separable");
  CHECK(manifest.at("versions").contains("sqlossflow"));

  REQUIRE(manifest.at("runs").size() == 1);
  const nlohmann::json& run = manifest.at("runs").at(0);
  CHECK(run.at("status") == "ok");
  CHECK(run.at("converged").is_boolean());
  const std::string id = run.at("id").get<std::string>();
  CHECK(id.size() == 16);
  CHECK(id.find_first_not_of("0123456789abcdef") == std::string::npos);

  REQUIRE(run.at("outputs").size() == 2);
  const std::string trace = read_text(dir.file("trace_" + id + ".csv"));
  CHECK(trace.rfind("t,rho,nu,loss", 0) == 0);
  CHECK(std::count(trace.begin(), trace.end(), '\n') >= 3);

  NormalizedNet net = load_checkpoint(dir.file("checkpoint_" + id + ".json"));
  CHECK(net.mode == NormMode::matrix);
  CHECK(net.input_dim() == 4);
  CHECK(net.rho > 0.0);
}

TEST_CASE("identical configs reproduce identical outputs") {
  ScratchDir a("det_a"), b("det_b");
  ExperimentConfig cfg = parse_config(flow_config());
  CHECK(run_experiment(cfg, 1, a.str()).exit_status == 0);
  CHECK(run_experiment(cfg, 1, b.str()).exit_status == 0);

  const std::vector<std::string> traces_a = files_with_prefix(a.path, "trace_");
  const std::vector<std::string> traces_b = files_with_prefix(b.path, "trace_");
  REQUIRE(traces_a.size() == 1);
  CHECK(traces_a == traces_b);  // same run id on both sides
  CHECK(read_text(a.file(traces_a[0])) == read_text(b.file(traces_b[0])));

  const std::vector<std::string> ckpts_a = files_with_prefix(a.path, "checkpoint_");
  const std::vector<std::string> ckpts_b = files_with_prefix(b.path, "checkpoint_");
  REQUIRE(ckpts_a.size() == 1);
  CHECK(ckpts_a == ckpts_b);
  CHECK(read_text(a.file(ckpts_a[0])) == read_text(b.file(ckpts_b[0])));
}

TEST_CASE("the output-dir override wins over the config value") {
  ScratchDir configured("ovr_cfg"), actual("ovr_real");
  std::string text = flow_config();
  text.insert(1, "\"output_dir\": \"" + configured.str() + "\", ");
  ExperimentConfig cfg = parse_config(text);
  CHECK(cfg.output_dir == configured.str());
  CHECK(run_experiment(cfg, 1, actual.str()).exit_status == 0);
  CHECK(fs::exists(actual.path / "manifest.json"));
  CHECK(!fs::exists(configured.path / "manifest.json"));
}

TEST_CASE("train experiments carry validation columns when a split exists") {
  ScratchDir dir("trainrun");
  const std::string text = R"({
    "command": "train",
    "dataset": {"kind": "margin_separable", "n_samples": 12, "raw_dim": 3, "gap": 0.3,
                "seed": 2, "val_fraction": 0.25},
    "network": {"widths": [6]},
    "train": {"lr": 0.001, "momentum": 0.0, "batch_size": 9, "epochs": 40,
              "weight_decay": 0.01, "normalize": "matrix", "init_frobenius": 1.0,
              "seed": 4, "trace_stride": 20}})";
  RunSummary summary = run_experiment(parse_config(text), 1, dir.str());
  CHECK(summary.exit_status == 0);

  nlohmann::json manifest = read_json(dir.file("manifest.json"));
  const nlohmann::json& run = manifest.at("runs").at(0);
  CHECK(run.at("status") == "ok");
  CHECK(!run.contains("converged"));  // flow-only field
  const std::string id = run.at("id").get<std::string>();

  const std::string trace = read_text(dir.file("trace_" + id + ".csv"));
  const std::string header = trace.substr(0, trace.find('\n'));
  CHECK(header.find("val_loss") != std::string::npos);
  CHECK(header.find("val_accuracy") != std::string::npos);
  CHECK(fs::exists(dir.path / ("checkpoint_" + id + ".json")));
}

TEST_CASE("diagnose writes a report with the full metric set") {
  ScratchDir dir("diagrun");
  NormalizedNet net = random_normalized_net({4, 5, 1}, 1.2, 7);
  save_checkpoint(net, dir.file("net.json"));
  const std::string text = std::string("{\"command\": \"diagnose\", ") + kDataset12 +
                           R"(, "diagnose": {"checkpoint": ")" + dir.file("net.json") +
                           R"("}})";
  RunSummary summary = run_experiment(parse_config(text), 1, dir.str());
  CHECK(summary.exit_status == 0);

  nlohmann::json manifest = read_json(dir.file("manifest.json"));
  const std::string id = manifest.at("runs").at(0).at("id").get<std::string>();
  nlohmann::json report = read_json(dir.file("report_" + id + ".json"));

  CHECK(report.at("rho") == 1.2);
  CHECK(report.at("margins").at("values").size() == 12);
  CHECK(report.at("margins").at("min").get<double>() <=
        report.at("margins").at("max").get<double>());
  CHECK(report.at("max_interp_residual").get<double>() >= 0.0);
  CHECK(report.at("constraint_residuals").at("aggregate").size() == 2);
  CHECK(report.at("constraint_residuals").at("per_sample_mean").size() == 2);
  CHECK(report.at("projection_orthogonality").size() == 2);
  for (const char* key : {"nc1", "nc2_angle_dev", "nc2_norm_dev", "nc3", "nc4"}) {
    CHECK(report.at("nc").contains(key));
  }
}

TEST_CASE("diagnose records a dimension mismatch as a failed run") {
  ScratchDir dir("diagbad");
  NormalizedNet net = random_normalized_net({7, 5, 1}, 1.0, 9);
  save_checkpoint(net, dir.file("net.json"));
  const std::string text = std::string("{\"command\": \"diagnose\", ") + kDataset12 +
                           R"(, "diagnose": {"checkpoint": ")" + dir.file("net.json") +
                           R"("}})";
  RunSummary summary = run_experiment(parse_config(text), 1, dir.str());
  CHECK(summary.exit_status == 1);

  nlohmann::json manifest = read_json(dir.file("manifest.json"));
  const nlohmann::json& run = manifest.at("runs").at(0);
  CHECK(run.at("status") == "error");
  CHECK(run.at("error").get<std::string>().find("dimension") != std::string::npos);
  CHECK(files_with_prefix(dir.path, "report_").empty());
}

TEST_CASE("sweeps fan out over the grid and write the comparison report") {
  ScratchDir dir("sweeprun");
  const std::string text = std::string("{\"command\": \"sweep\", ") + kDataset12 +
                           R"(, "network": {"widths": []},
                               "flow": {"lambda": 0.01, "dt": 0.001, "t_max": 1.0,
                                        "trace_stride": 200, "rho0": 0.01, "seed": 3},
                               "sweep": {"engine": "flow", "lambda": [0.005, 0.05]}})";
  RunSummary summary = run_experiment(parse_config(text), 1, dir.str());
  CHECK(summary.exit_status == 0);

  CHECK(files_with_prefix(dir.path, "trace_").size() == 2);
  CHECK(files_with_prefix(dir.path, "checkpoint_").size() == 2);

  nlohmann::json manifest = read_json(dir.file("manifest.json"));
  CHECK(manifest.at("runs").size() == 2);

  nlohmann::json report = read_json(dir.file("sweep_report.json"));
  REQUIRE(report.at("runs").size() == 2);
  CHECK(report.at("runs").at(0).at("lambda") == 0.005);
  CHECK(report.at("runs").at(1).at("lambda") == 0.05);
  CHECK(report.at("spearman_rho_val_error").is_null());  // flow runs have no validation
  CHECK(report.at("spearman_lambda_rho").is_number());
  CHECK(report.at("max_margin_duality_dev").is_number());
  for (const auto& row : report.at("runs")) {
    CHECK(row.at("final_rho").is_number());
    CHECK(row.at("near_interpolating").is_boolean());
  }
}

TEST_CASE("a failing grid point is recorded without sinking the sweep") {
  ScratchDir dir("sweepbad");
  const std::string text = std::string("{\"command\": \"sweep\", ") + kDataset12 +
                           R"(, "network": {"widths": [6]},
                               "train": {"lr": 0.001, "momentum": 0.0, "batch_size": 12,
                                         "epochs": 5, "weight_decay": 0.01,
                                         "normalize": "matrix", "init_frobenius": 1.0,
                                         "seed": 4, "trace_stride": 100},
                               "sweep": {"engine": "train", "weight_decay": [0.01, -0.5]}})";
  RunSummary summary = run_experiment(parse_config(text), 1, dir.str());
  CHECK(summary.exit_status == 1);

  nlohmann::json manifest = read_json(dir.file("manifest.json"));
  REQUIRE(manifest.at("runs").size() == 2);
  int ok = 0, failed = 0;
  for (const auto& run : manifest.at("runs")) {
    if (run.at("status") == "ok") {
      ++ok;
    } else {
      ++failed;
      CHECK(!run.at("error").get<std::string>().empty());
    }
  }
  CHECK(ok == 1);
  CHECK(failed == 1);

  nlohmann::json report = read_json(dir.file("sweep_report.json"));
  CHECK(report.at("runs").size() == 1);  // only the successful run is compared
}

TEST_CASE("the command-line binary round-trips a config end to end") {
  ScratchDir dir("cli");
  write_text(dir.file("cfg.json"), flow_config());

  CHECK(run_cli("--help") == 0);
  CHECK(run_cli("flow --config " + dir.file("cfg.json") + " --output-dir " + dir.str()) == 0);
  CHECK(fs::exists(dir.path / "manifest.json"));

  // subcommand and config command must agree
  CHECK(run_cli("train --config " + dir.file("cfg.json") + " --output-dir " + dir.str()) == 2);
  // unreadable config
  CHECK(run_cli("flow --config " + dir.file("absent.json")) == 2);
  // unknown subcommand is a usage error
  CHECK(run_cli("anneal --config " + dir.file("cfg.json")) != 0);
  // --config is required
  CHECK(run_cli("flow") != 0);
}
