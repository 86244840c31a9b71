#include "sqloss/experiment.hpp"

#include "json.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace sqloss {

namespace {

using njson = nlohmann::json;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void expect_object(const njson& j, const std::string& where) {
  if (!j.is_object()) fail(where + " must be a JSON object");
}

void expect_keys(const njson& obj, const std::string& where,
                 const std::vector<std::string>& allowed) {
  std::string unknown;
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end()) {
      if (!unknown.empty()) unknown += ", ";
      unknown += it.key();
    }
  }
  if (!unknown.empty()) fail("unknown key(s) in " + where + ": " + unknown);
}

double get_number(const njson& obj, const char* key, const std::string& where,
                  double fallback) {
  if (!obj.contains(key)) return fallback;
  const njson& v = obj.at(key);
  if (!v.is_number()) fail(where + "." + key + " must be a number");
  return v.get<double>();
}

int get_int(const njson& obj, const char* key, const std::string& where, int fallback) {
  if (!obj.contains(key)) return fallback;
  const njson& v = obj.at(key);
  if (!v.is_number_integer()) fail(where + "." + key + " must be an integer");
  return v.get<int>();
}

std::uint64_t get_seed(const njson& obj, const char* key, const std::string& where,
                       std::uint64_t fallback) {
  if (!obj.contains(key)) return fallback;
  const njson& v = obj.at(key);
  if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() &&
                                 v.get<long long>() < 0)) {
    fail(where + "." + key + " must be a non-negative integer");
  }
  return v.get<std::uint64_t>();
}

std::string get_string(const njson& obj, const char* key, const std::string& where) {
  if (!obj.contains(key)) fail(where + " is missing required key '" + key + "'");
  const njson& v = obj.at(key);
  if (!v.is_string()) fail(where + "." + key + " must be a string");
  return v.get<std::string>();
}

NormalizeMode parse_normalize(const std::string& s, const std::string& where) {
  if (s == "none") return NormalizeMode::none;
  if (s == "matrix") return NormalizeMode::matrix;
  if (s == "row") return NormalizeMode::row;
  fail(where + " must be one of none, matrix, row (got '" + s + "')");
}

std::string normalize_name(NormalizeMode m) {
  switch (m) {
    case NormalizeMode::none: return "none";
    case NormalizeMode::matrix: return "matrix";
    default: return "row";
  }
}

std::string kind_name(SyntheticKind k) {
  switch (k) {
    case SyntheticKind::gaussian_blobs: return "gaussian_blobs";
    case SyntheticKind::margin_separable: return "margin_separable";
    default: return "xor_like";
  }
}

DatasetConfig parse_dataset(const njson& obj) {
  expect_object(obj, "dataset");
  DatasetConfig out;
  const std::string kind = get_string(obj, "kind", "dataset");
  if (kind == "csv") {
    expect_keys(obj, "dataset", {"kind", "path"});
    out.is_csv = true;
    out.csv_path = get_string(obj, "path", "dataset");
    return out;
  }
  expect_keys(obj, "dataset", {"kind", "n_samples", "raw_dim", "gap", "seed", "val_fraction"});
  if (kind == "gaussian_blobs") {
    out.synthetic.kind = SyntheticKind::gaussian_blobs;
  } else if (kind == "margin_separable") {
    out.synthetic.kind = SyntheticKind::margin_separable;
  } else if (kind == "xor_like") {
    out.synthetic.kind = SyntheticKind::xor_like;
  } else {
    fail("dataset.kind must be gaussian_blobs, margin_separable, xor_like or csv (got '" +
         kind + "')");
  }
  out.synthetic.n_samples = get_int(obj, "n_samples", "dataset", out.synthetic.n_samples);
  out.synthetic.raw_dim = get_int(obj, "raw_dim", "dataset", out.synthetic.raw_dim);
  out.synthetic.gap = get_number(obj, "gap", "dataset", out.synthetic.gap);
  out.synthetic.seed = get_seed(obj, "seed", "dataset", out.synthetic.seed);
  out.synthetic.val_fraction =
      get_number(obj, "val_fraction", "dataset", out.synthetic.val_fraction);
  return out;
}

NetworkConfig parse_network(const njson& obj) {
  expect_object(obj, "network");
  expect_keys(obj, "network", {"depth", "widths"});
  NetworkConfig out;
  if (obj.contains("widths")) {
    const njson& w = obj.at("widths");
    if (!w.is_array()) fail("network.widths must be an array of hidden-layer widths");
    for (const auto& v : w) {
      if (!v.is_number_integer() || v.get<int>() < 1) {
        fail("network.widths entries must be positive integers");
      }
      out.hidden.push_back(v.get<int>());
    }
  }
  if (obj.contains("depth")) {
    const int depth = get_int(obj, "depth", "network", out.depth());
    if (depth != out.depth()) {
      fail("network.depth is " + std::to_string(depth) + " but widths implies " +
           std::to_string(out.depth()));
    }
  }
  return out;
}

FlowSection parse_flow(const njson& obj) {
  expect_object(obj, "flow");
  expect_keys(obj, "flow",
              {"lambda", "dt", "integrator", "t_max", "tol_equilibrium", "tol_interpolation",
               "trace_stride", "rho0", "seed"});
  FlowSection out;
  out.cfg.lambda = get_number(obj, "lambda", "flow", out.cfg.lambda);
  out.cfg.dt = get_number(obj, "dt", "flow", out.cfg.dt);
  if (obj.contains("integrator")) {
    const std::string name = get_string(obj, "integrator", "flow");
    if (name == "euler_project") {
      out.cfg.integrator = Integrator::euler_project;
    } else if (name == "rk4_project") {
      out.cfg.integrator = Integrator::rk4_project;
    } else {
      fail("flow.integrator must be euler_project or rk4_project (got '" + name + "')");
    }
  }
  out.cfg.t_max = get_number(obj, "t_max", "flow", out.cfg.t_max);
  out.cfg.tol_equilibrium = get_number(obj, "tol_equilibrium", "flow", out.cfg.tol_equilibrium);
  out.cfg.tol_interpolation =
      get_number(obj, "tol_interpolation", "flow", out.cfg.tol_interpolation);
  out.cfg.trace_stride = get_int(obj, "trace_stride", "flow", out.cfg.trace_stride);
  out.rho0 = get_number(obj, "rho0", "flow", out.rho0);
  out.seed = get_seed(obj, "seed", "flow", out.seed);
  return out;
}

std::vector<double> parse_init_frobenius(const njson& v, const std::string& where) {
  std::vector<double> out;
  if (v.is_number()) {
    out.push_back(v.get<double>());
  } else if (v.is_array() && !v.empty()) {
    for (const auto& e : v) {
      if (!e.is_number()) fail(where + " entries must be numbers");
      out.push_back(e.get<double>());
    }
  } else {
    fail(where + " must be a number or a non-empty array of numbers");
  }
  return out;
}

TrainConfig parse_train(const njson& obj) {
  expect_object(obj, "train");
  expect_keys(obj, "train",
              {"lr", "momentum", "batch_size", "epochs", "weight_decay", "normalize",
               "init_frobenius", "seed", "trace_stride"});
  TrainConfig out;
  out.lr = get_number(obj, "lr", "train", out.lr);
  out.momentum = get_number(obj, "momentum", "train", out.momentum);
  out.batch_size = get_int(obj, "batch_size", "train", out.batch_size);
  out.epochs = get_int(obj, "epochs", "train", out.epochs);
  out.weight_decay = get_number(obj, "weight_decay", "train", out.weight_decay);
  if (obj.contains("normalize")) {
    out.normalize = parse_normalize(get_string(obj, "normalize", "train"), "train.normalize");
  }
  if (obj.contains("init_frobenius")) {
    out.init_frobenius = parse_init_frobenius(obj.at("init_frobenius"), "train.init_frobenius");
  }
  out.seed = get_seed(obj, "seed", "train", out.seed);
  out.trace_stride = get_int(obj, "trace_stride", "train", out.trace_stride);
  return out;
}

std::vector<double> parse_number_list(const njson& obj, const char* key,
                                      const std::string& where) {
  std::vector<double> out;
  if (!obj.contains(key)) return out;
  const njson& v = obj.at(key);
  if (!v.is_array() || v.empty()) fail(where + "." + key + " must be a non-empty array");
  for (const auto& e : v) {
    if (!e.is_number()) fail(where + "." + key + " entries must be numbers");
    out.push_back(e.get<double>());
  }
  return out;
}

SweepSection parse_sweep(const njson& obj) {
  expect_object(obj, "sweep");
  SweepSection out;
  out.engine = get_string(obj, "engine", "sweep");
  if (out.engine == "flow") {
    expect_keys(obj, "sweep", {"engine", "lambda", "rho0", "seed"});
    out.lambda = parse_number_list(obj, "lambda", "sweep");
    out.rho0 = parse_number_list(obj, "rho0", "sweep");
  } else if (out.engine == "train") {
    expect_keys(obj, "sweep", {"engine", "weight_decay", "init_frobenius", "normalize", "seed"});
    out.weight_decay = parse_number_list(obj, "weight_decay", "sweep");
    out.init_frobenius = parse_number_list(obj, "init_frobenius", "sweep");
    if (obj.contains("normalize")) {
      const njson& v = obj.at("normalize");
      if (!v.is_array() || v.empty()) fail("sweep.normalize must be a non-empty array");
      for (const auto& e : v) {
        if (!e.is_string()) fail("sweep.normalize entries must be strings");
        out.normalize.push_back(parse_normalize(e.get<std::string>(), "sweep.normalize"));
      }
    }
  } else {
    fail("sweep.engine must be flow or train (got '" + out.engine + "')");
  }
  if (obj.contains("seed")) {
    const njson& v = obj.at("seed");
    if (!v.is_array() || v.empty()) fail("sweep.seed must be a non-empty array");
    for (const auto& e : v) {
      if (!e.is_number_integer() ||
          (!e.is_number_unsigned() && e.get<long long>() < 0)) {
        fail("sweep.seed entries must be non-negative integers");
      }
      out.seed.push_back(e.get<std::uint64_t>());
    }
  }
  return out;
}

void check_sections(const ExperimentConfig& cfg, const njson& doc) {
  auto require = [&](const char* key) {
    if (!doc.contains(key)) {
      fail("command=" + cfg.command + " requires the '" + std::string(key) + "' section");
    }
  };
  auto forbid = [&](const char* key) {
    if (doc.contains(key)) {
      fail("command=" + cfg.command + " does not take the '" + std::string(key) +
           "' section");
    }
  };
  require("dataset");
  if (cfg.command == "flow") {
    require("network");
    require("flow");
    forbid("train");
    forbid("sweep");
    forbid("diagnose");
  } else if (cfg.command == "train") {
    require("network");
    require("train");
    forbid("flow");
    forbid("sweep");
    forbid("diagnose");
  } else if (cfg.command == "diagnose") {
    require("diagnose");
    forbid("network");
    forbid("flow");
    forbid("train");
    forbid("sweep");
  } else {
    require("network");
    require("sweep");
    forbid("diagnose");
    if (cfg.sweep->engine == "flow") {
      require("flow");
      forbid("train");
    } else {
      require("train");
      forbid("flow");
    }
  }
}

// Effective-value echoes; these also define the per-run configs whose canonical
// dumps are hashed into run ids.

njson dataset_json(const DatasetConfig& d) {
  njson j;
  if (d.is_csv) {
    j["kind"] = "csv";
    j["path"] = d.csv_path;
  } else {
    j["kind"] = kind_name(d.synthetic.kind);
    j["n_samples"] = d.synthetic.n_samples;
    j["raw_dim"] = d.synthetic.raw_dim;
    j["gap"] = d.synthetic.gap;
    j["seed"] = d.synthetic.seed;
    j["val_fraction"] = d.synthetic.val_fraction;
  }
  return j;
}

njson network_json(const NetworkConfig& n) {
  njson j;
  j["depth"] = n.depth();
  j["widths"] = n.hidden;
  return j;
}

njson flow_json(const FlowSection& f) {
  njson j;
  j["lambda"] = f.cfg.lambda;
  j["dt"] = f.cfg.dt;
  j["integrator"] =
      f.cfg.integrator == Integrator::euler_project ? "euler_project" : "rk4_project";
  j["t_max"] = f.cfg.t_max;
  j["tol_equilibrium"] = f.cfg.tol_equilibrium;
  j["tol_interpolation"] = f.cfg.tol_interpolation;
  j["trace_stride"] = f.cfg.trace_stride;
  j["rho0"] = f.rho0;
  j["seed"] = f.seed;
  return j;
}

njson train_json(const TrainConfig& t) {
  njson j;
  j["lr"] = t.lr;
  j["momentum"] = t.momentum;
  j["batch_size"] = t.batch_size;
  j["epochs"] = t.epochs;
  j["weight_decay"] = t.weight_decay;
  j["normalize"] = normalize_name(t.normalize);
  j["init_frobenius"] = t.init_frobenius;
  j["seed"] = t.seed;
  j["trace_stride"] = t.trace_stride;
  return j;
}

njson sweep_json(const SweepSection& s) {
  njson j;
  j["engine"] = s.engine;
  if (!s.lambda.empty()) j["lambda"] = s.lambda;
  if (!s.rho0.empty()) j["rho0"] = s.rho0;
  if (!s.weight_decay.empty()) j["weight_decay"] = s.weight_decay;
  if (!s.init_frobenius.empty()) j["init_frobenius"] = s.init_frobenius;
  if (!s.normalize.empty()) {
    std::vector<std::string> names;
    for (NormalizeMode m : s.normalize) names.push_back(normalize_name(m));
    j["normalize"] = names;
  }
  if (!s.seed.empty()) j["seed"] = s.seed;
  return j;
}

njson config_echo(const ExperimentConfig& cfg) {
  njson j;
  j["command"] = cfg.command;
  j["output_dir"] = cfg.output_dir;
  j["dataset"] = dataset_json(cfg.dataset);
  if (cfg.network) j["network"] = network_json(*cfg.network);
  if (cfg.flow) j["flow"] = flow_json(*cfg.flow);
  if (cfg.train) j["train"] = train_json(*cfg.train);
  if (cfg.diagnose_checkpoint) j["diagnose"] = njson{{"checkpoint", *cfg.diagnose_checkpoint}};
  if (cfg.sweep) j["sweep"] = sweep_json(*cfg.sweep);
  return j;
}

std::string hex16(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

struct BuiltData {
  Dataset train;
  Dataset val;

  const Dataset* val_ptr() const { return val.size() > 0 ? &val : nullptr; }
};

BuiltData build_dataset(const DatasetConfig& d) {
  if (d.is_csv) return {load_csv(d.csv_path), Dataset{Matrix(0, 0), Vector(0)}};
  GeneratedData g = generate(d.synthetic);
  return {std::move(g.train), std::move(g.val)};
}

std::vector<int> full_widths(const NetworkConfig& net, Eigen::Index input_dim) {
  std::vector<int> widths;
  widths.push_back(static_cast<int>(input_dim));
  widths.insert(widths.end(), net.hidden.begin(), net.hidden.end());
  widths.push_back(1);
  return widths;
}

struct RunOutcome {
  std::string id;
  bool ok = false;
  std::string error;
  bool is_flow = false;
  bool converged = false;
  std::vector<std::string> events;
  std::vector<std::string> outputs;  // file names inside the output dir
  SweepRunRecord record;
  bool has_record = false;
};

RunOutcome execute_flow_run(const FlowSection& fs, const BuiltData& data,
                            const std::vector<int>& widths, const njson& run_cfg,
                            const std::string& out_dir) {
  RunOutcome out;
  out.is_flow = true;
  out.id = hex16(fnv1a64(run_cfg.dump()));
  try {
    NormalizedNet net = random_normalized_net(widths, fs.rho0, fs.seed);
    if (orient_for_separability(net, data.train)) {
      out.events.push_back("initial last layer negated for average separability");
    }
    FlowState state = make_flow_state(std::move(net), data.train);
    FlowResult result = integrate(std::move(state), data.train, fs.cfg);
    const std::string trace_name = "trace_" + out.id + ".csv";
    const std::string ckpt_name = "checkpoint_" + out.id + ".json";
    result.trace.write_csv(out_dir + "/" + trace_name);
    save_checkpoint(result.final_state.net, out_dir + "/" + ckpt_name);
    out.outputs = {trace_name, ckpt_name};
    out.converged = result.converged;
    out.events.insert(out.events.end(), result.events.begin(), result.events.end());
    const TraceRow& last = result.trace.rows.back();
    out.record.run_id = out.id;
    out.record.lambda = fs.cfg.lambda;
    out.record.init_frobenius = fs.rho0;
    out.record.final_rho = last.rho;
    out.record.final_min_margin = last.min_margin;
    out.record.final_max_interp_residual = last.max_interp_residual;
    out.has_record = true;
    out.ok = true;
  } catch (const std::exception& e) {
    out.error = e.what();
  }
  return out;
}

RunOutcome execute_train_run(const TrainConfig& tc, const BuiltData& data,
                             const std::vector<int>& widths, const njson& run_cfg,
                             const std::string& out_dir) {
  RunOutcome out;
  out.id = hex16(fnv1a64(run_cfg.dump()));
  try {
    TrainResult result = train(data.train, data.val_ptr(), widths, tc);
    const std::string trace_name = "trace_" + out.id + ".csv";
    const std::string ckpt_name = "checkpoint_" + out.id + ".json";
    result.trace.write_csv(out_dir + "/" + trace_name);
    save_checkpoint(result.state.net, out_dir + "/" + ckpt_name);
    out.outputs = {trace_name, ckpt_name};
    const TraceRow& last = result.trace.rows.back();
    out.record.run_id = out.id;
    out.record.lambda = tc.weight_decay;
    out.record.init_frobenius = tc.init_frobenius.front();
    out.record.final_rho = last.rho;
    out.record.final_min_margin = last.min_margin;
    out.record.final_max_interp_residual = last.max_interp_residual;
    if (last.val_accuracy) out.record.val_error = 1.0 - *last.val_accuracy;
    out.has_record = true;
    out.ok = true;
  } catch (const std::exception& e) {
    out.error = e.what();
  }
  return out;
}

RunOutcome execute_diagnose(const std::string& checkpoint_path, const BuiltData& data,
                            const njson& run_cfg, const std::string& out_dir) {
  RunOutcome out;
  out.id = hex16(fnv1a64(run_cfg.dump()));
  try {
    const NormalizedNet loaded = load_checkpoint(checkpoint_path);
    const NormalizedNet net = loaded.mode == NormMode::matrix
                                  ? loaded
                                  : decompose(recompose(loaded), NormMode::matrix);
    if (net.input_dim() != data.train.dim()) {
      throw std::invalid_argument("checkpoint expects inputs of dimension " +
                                  std::to_string(net.input_dim()) + " but the dataset has " +
                                  std::to_string(data.train.dim()));
    }
    std::vector<Matrix> acts;
    const Vector f = chain_forward_batch(net.v, data.train.inputs, &acts);
    const Vector m = data.train.labels.cwiseProduct(f);
    const Vector residual = (net.rho * f - data.train.labels).cwiseAbs();

    njson report;
    report["rho"] = net.rho;
    report["margins"] = njson{{"min", m.minCoeff()},
                              {"mean", m.mean()},
                              {"max", m.maxCoeff()},
                              {"values", std::vector<double>(m.data(), m.data() + m.size())}};
    report["max_interp_residual"] = residual.maxCoeff();

    const ConstraintResiduals cr = constraint_residuals(net, data.train);
    report["constraint_residuals"] =
        njson{{"aggregate", cr.aggregate}, {"per_sample_mean", cr.per_sample_mean}};

    njson probes = njson::array();
    for (const LayerShapeReport& p : projection_orthogonality_probe(net)) {
      probes.push_back(njson{{"partial_isometry_defect", p.partial_isometry_defect},
                             {"scaled_orthogonality_defect", p.scaled_orthogonality_defect}});
    }
    report["projection_orthogonality"] = probes;

    const Matrix& features = acts.size() > 1 ? acts[acts.size() - 1] : data.train.inputs;
    const NCReport nc = nc_metrics(features, data.train.labels, net.v.back());
    report["nc"] = njson{{"nc1", nc.nc1},
                         {"nc2_angle_dev", nc.nc2_angle_dev},
                         {"nc2_norm_dev", nc.nc2_norm_dev},
                         {"nc3", nc.nc3},
                         {"nc4", nc.nc4}};

    const std::string report_name = "report_" + out.id + ".json";
    std::ofstream file(out_dir + "/" + report_name, std::ios::binary);
    if (!file) throw std::runtime_error("cannot write report to " + out_dir);
    file << report.dump(2) << "\n";
    out.outputs = {report_name};
    out.ok = true;
  } catch (const std::exception& e) {
    out.error = e.what();
  }
  return out;
}

njson per_run_config(const std::string& command, const ExperimentConfig& cfg,
                     const FlowSection* fs, const TrainConfig* tc) {
  njson j;
  j["command"] = command;
  j["dataset"] = dataset_json(cfg.dataset);
  if (cfg.network) j["network"] = network_json(*cfg.network);
  if (fs) j["flow"] = flow_json(*fs);
  if (tc) j["train"] = train_json(*tc);
  if (cfg.diagnose_checkpoint) j["diagnose"] = njson{{"checkpoint", *cfg.diagnose_checkpoint}};
  return j;
}

}  // namespace

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t hash = 14695981039346656037ULL;
  for (unsigned char c : bytes) {
    hash ^= static_cast<std::uint64_t>(c);
    hash *= 1099511628211ULL;
  }
  return hash;
}

ExperimentConfig parse_config(const std::string& json_text) {
  njson doc;
  try {
    doc = njson::parse(json_text);
  } catch (const njson::exception& e) {
    throw std::invalid_argument(std::string("config is not valid JSON: ") + e.what());
  }
  expect_object(doc, "config");
  expect_keys(doc, "config",
              {"command", "output_dir", "dataset", "network", "flow", "train", "diagnose",
               "sweep"});

  ExperimentConfig cfg;
  cfg.command = get_string(doc, "command", "config");
  if (cfg.command != "flow" && cfg.command != "train" && cfg.command != "diagnose" &&
      cfg.command != "sweep") {
    fail("command must be flow, train, diagnose or sweep (got '" + cfg.command + "')");
  }
  if (doc.contains("output_dir")) cfg.output_dir = get_string(doc, "output_dir", "config");

  if (doc.contains("sweep")) cfg.sweep = parse_sweep(doc.at("sweep"));
  check_sections(cfg, doc);

  cfg.dataset = parse_dataset(doc.at("dataset"));
  if (doc.contains("network")) cfg.network = parse_network(doc.at("network"));
  if (doc.contains("flow")) cfg.flow = parse_flow(doc.at("flow"));
  if (doc.contains("train")) cfg.train = parse_train(doc.at("train"));
  if (doc.contains("diagnose")) {
    const njson& d = doc.at("diagnose");
    expect_object(d, "diagnose");
    expect_keys(d, "diagnose", {"checkpoint"});
    cfg.diagnose_checkpoint = get_string(d, "checkpoint", "diagnose");
  }
  return cfg;
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file " + path);
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config(buffer.str());
}

RunSummary run_experiment(const ExperimentConfig& cfg, int jobs,
                          const std::string& output_dir_override) {
  const auto t_start = std::chrono::steady_clock::now();
  RunSummary summary;
  const std::string out_dir = output_dir_override.empty() ? cfg.output_dir
                                                          : output_dir_override;
  std::filesystem::create_directories(out_dir);
  {
    const std::string probe_path = out_dir + "/.write_probe";
    std::ofstream probe(probe_path, std::ios::binary);
    if (!probe) throw std::runtime_error("output_dir " + out_dir + " is not writable");
    probe.close();
    std::filesystem::remove(probe_path);
  }

  const BuiltData data = build_dataset(cfg.dataset);

  std::vector<RunOutcome> outcomes;
  std::optional<SweepReport> sweep_report;

  if (cfg.command == "flow") {
    const std::vector<int> widths = full_widths(*cfg.network, data.train.dim());
    outcomes.push_back(execute_flow_run(*cfg.flow, data, widths,
                                        per_run_config("flow", cfg, &*cfg.flow, nullptr),
                                        out_dir));
  } else if (cfg.command == "train") {
    const std::vector<int> widths = full_widths(*cfg.network, data.train.dim());
    outcomes.push_back(execute_train_run(*cfg.train, data, widths,
                                         per_run_config("train", cfg, nullptr, &*cfg.train),
                                         out_dir));
  } else if (cfg.command == "diagnose") {
    outcomes.push_back(execute_diagnose(*cfg.diagnose_checkpoint, data,
                                        per_run_config("diagnose", cfg, nullptr, nullptr),
                                        out_dir));
  } else {
    const std::vector<int> widths = full_widths(*cfg.network, data.train.dim());
    const SweepSection& sw = *cfg.sweep;
    double tol_interpolation = 1e-4;

    struct GridPoint {
      std::optional<FlowSection> flow;
      std::optional<TrainConfig> train;
      njson run_cfg;
    };
    std::vector<GridPoint> grid;

    if (sw.engine == "flow") {
      tol_interpolation = cfg.flow->cfg.tol_interpolation;
      const std::vector<double> lambdas =
          sw.lambda.empty() ? std::vector<double>{cfg.flow->cfg.lambda} : sw.lambda;
      const std::vector<double> rho0s =
          sw.rho0.empty() ? std::vector<double>{cfg.flow->rho0} : sw.rho0;
      const std::vector<std::uint64_t> seeds =
          sw.seed.empty() ? std::vector<std::uint64_t>{cfg.flow->seed} : sw.seed;
      for (double lambda : lambdas) {
        for (double rho0 : rho0s) {
          for (std::uint64_t seed : seeds) {
            GridPoint p;
            p.flow = *cfg.flow;
            p.flow->cfg.lambda = lambda;
            p.flow->rho0 = rho0;
            p.flow->seed = seed;
            p.run_cfg = per_run_config("flow", cfg, &*p.flow, nullptr);
            grid.push_back(std::move(p));
          }
        }
      }
    } else {
      const std::vector<double> wds =
          sw.weight_decay.empty() ? std::vector<double>{cfg.train->weight_decay}
                                  : sw.weight_decay;
      const std::vector<double> inits = sw.init_frobenius.empty()
                                            ? std::vector<double>{}
                                            : sw.init_frobenius;
      const std::vector<NormalizeMode> norms =
          sw.normalize.empty() ? std::vector<NormalizeMode>{cfg.train->normalize}
                               : sw.normalize;
      const std::vector<std::uint64_t> seeds =
          sw.seed.empty() ? std::vector<std::uint64_t>{cfg.train->seed} : sw.seed;
      for (double wd : wds) {
        const std::size_t init_count = inits.empty() ? 1 : inits.size();
        for (std::size_t ii = 0; ii < init_count; ++ii) {
          for (NormalizeMode norm : norms) {
            for (std::uint64_t seed : seeds) {
              GridPoint p;
              p.train = *cfg.train;
              p.train->weight_decay = wd;
              if (!inits.empty()) p.train->init_frobenius = {inits[ii]};
              p.train->normalize = norm;
              p.train->seed = seed;
              p.run_cfg = per_run_config("train", cfg, nullptr, &*p.train);
              grid.push_back(std::move(p));
            }
          }
        }
      }
    }

    outcomes.resize(grid.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
      while (true) {
        const std::size_t i = next.fetch_add(1);
        if (i >= grid.size()) break;
        const GridPoint& p = grid[i];
        outcomes[i] = p.flow ? execute_flow_run(*p.flow, data, widths, p.run_cfg, out_dir)
                             : execute_train_run(*p.train, data, widths, p.run_cfg, out_dir);
      }
    };
    const int n_threads =
        std::max(1, std::min(jobs, static_cast<int>(grid.size())));
    if (n_threads == 1) {
      worker();
    } else {
      std::vector<std::thread> pool;
      pool.reserve(static_cast<std::size_t>(n_threads));
      for (int i = 0; i < n_threads; ++i) pool.emplace_back(worker);
      for (std::thread& t : pool) t.join();
    }

    std::vector<SweepRunRecord> records;
    for (const RunOutcome& o : outcomes) {
      if (o.ok && o.has_record) records.push_back(o.record);
    }
    sweep_report = sweep_compare(std::move(records), tol_interpolation);

    njson sr;
    sr["runs"] = njson::array();
    for (const SweepRunRecord& r : sweep_report->runs) {
      njson row;
      row["run_id"] = r.run_id;
      row["lambda"] = r.lambda;
      row["init_frobenius"] = r.init_frobenius;
      row["final_rho"] = r.final_rho;
      row["final_min_margin"] = r.final_min_margin;
      row["final_max_interp_residual"] = r.final_max_interp_residual;
      if (r.val_error) {
        row["val_error"] = *r.val_error;
      } else {
        row["val_error"] = nullptr;
      }
      row["near_interpolating"] = r.near_interpolating;
      row["margin_inv_rho_dev"] = r.margin_inv_rho_dev;
      sr["runs"].push_back(std::move(row));
    }
    if (sweep_report->spearman_rho_val_error) {
      sr["spearman_rho_val_error"] = *sweep_report->spearman_rho_val_error;
    } else {
      sr["spearman_rho_val_error"] = nullptr;
    }
    if (sweep_report->spearman_lambda_rho) {
      sr["spearman_lambda_rho"] = *sweep_report->spearman_lambda_rho;
    } else {
      sr["spearman_lambda_rho"] = nullptr;
    }
    sr["max_margin_duality_dev"] = sweep_report->max_margin_duality_dev;
    std::ofstream file(out_dir + "/sweep_report.json", std::ios::binary);
    if (!file) throw std::runtime_error("cannot write sweep_report.json to " + out_dir);
    file << sr.dump(2) << "\n";
  }

  int failures = 0;
  njson manifest;
  manifest["command"] = cfg.command;
  manifest["config"] = config_echo(cfg);
  manifest["versions"] = njson{
      {"sqlossflow", "0.1.0"},
      {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
                    "." + std::to_string(EIGEN_MINOR_VERSION)},
      {"json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                   std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                   std::to_string(NLOHMANN_JSON_VERSION_PATCH)}};
  manifest["jobs"] = std::max(1, jobs);
  manifest["runs"] = njson::array();
  for (const RunOutcome& o : outcomes) {
    njson run;
    run["id"] = o.id;
    run["status"] = o.ok ? "ok" : "error";
    if (!o.ok) {
      run["error"] = o.error;
      ++failures;
    }
    run["outputs"] = o.outputs;
    if (o.is_flow) run["converged"] = o.converged;
    if (!o.events.empty()) run["events"] = o.events;
    manifest["runs"].push_back(std::move(run));
    summary.log_lines.push_back("run " + o.id + (o.ok ? ": ok" : ": ERROR " + o.error));
  }
  if (sweep_report) summary.log_lines.push_back("wrote sweep_report.json");

  const auto t_end = std::chrono::steady_clock::now();
  manifest["wall_time_seconds"] =
      std::chrono::duration<double>(t_end - t_start).count();
  std::ofstream file(out_dir + "/manifest.json", std::ios::binary);
  if (!file) throw std::runtime_error("cannot write manifest.json to " + out_dir);
  file << manifest.dump(2) << "\n";
  summary.log_lines.push_back("wrote manifest.json");

  summary.exit_status = failures > 0 ? 1 : 0;
  return summary;
}

}  // namespace sqloss
