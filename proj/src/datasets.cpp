#include "sqloss/datasets.hpp"

#include "json.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace sqloss {

namespace {

constexpr double kBlobSigma = 0.3;
constexpr double kXorAxisClearance = 0.05;

std::string fmt17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void check_spec(const SyntheticSpec& spec) {
  if (spec.n_samples < 2) throw std::invalid_argument("n_samples must be at least 2");
  if (spec.raw_dim < 1) throw std::invalid_argument("raw_dim must be at least 1");
  if (spec.kind == SyntheticKind::xor_like && spec.raw_dim < 2) {
    throw std::invalid_argument("xor_like needs raw_dim >= 2");
  }
  if (spec.gap < 0.0) throw std::invalid_argument("gap must be non-negative");
  if (spec.kind == SyntheticKind::margin_separable && spec.gap == 0.0) {
    throw std::invalid_argument("margin_separable needs gap > 0, the classes would touch");
  }
  if (spec.val_fraction < 0.0 || spec.val_fraction >= 1.0) {
    throw std::invalid_argument("val_fraction must lie in [0, 1)");
  }
}

/// Augment raw columns with the bias coordinate and normalize to unit length.
Dataset to_pipeline(const Matrix& raw, const Vector& labels) {
  Dataset out;
  out.inputs.resize(raw.rows() + 1, raw.cols());
  out.labels = labels;
  for (Eigen::Index n = 0; n < raw.cols(); ++n) {
    Vector augmented(raw.rows() + 1);
    augmented.head(raw.rows()) = raw.col(n);
    augmented(raw.rows()) = 1.0;
    out.inputs.col(n) = augmented / augmented.norm();
  }
  return out;
}

Vector random_unit(int dim, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector v(dim);
  double norm = 0.0;
  do {
    for (int i = 0; i < dim; ++i) v(i) = normal(rng);
    norm = v.norm();
  } while (!(norm > 1e-6));
  return v / norm;
}

}  // namespace

GeneratedData generate(const SyntheticSpec& spec) {
  check_spec(spec);
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  const int n = spec.n_samples;
  const int d = spec.raw_dim;
  Matrix raw(d, n);
  Vector labels(n);
  for (int i = 0; i < n; ++i) labels(i) = (i % 2 == 0) ? 1.0 : -1.0;

  Vector separator = Vector::Zero(d);
  if (spec.kind == SyntheticKind::gaussian_blobs) {
    separator = random_unit(d, rng);
    for (int i = 0; i < n; ++i) {
      Vector noise(d);
      for (int j = 0; j < d; ++j) noise(j) = kBlobSigma * normal(rng);
      raw.col(i) = labels(i) * separator + noise;
    }
  } else if (spec.kind == SyntheticKind::margin_separable) {
    separator = random_unit(d, rng);
    for (int i = 0; i < n; ++i) {
      Vector x(d);
      for (int j = 0; j < d; ++j) x(j) = normal(rng);
      const double s = separator.dot(x);
      if (labels(i) * s < spec.gap) x += (labels(i) * spec.gap - s) * separator;
      raw.col(i) = x;
    }
  } else {
    for (int i = 0; i < n; ++i) {
      Vector x(d);
      do {
        for (int j = 0; j < d; ++j) x(j) = normal(rng);
      } while (std::abs(x(0)) < kXorAxisClearance || std::abs(x(1)) < kXorAxisClearance);
      // Quadrant signs realizing the label under the xor rule; the side alternates
      // via one rng draw so both quadrants of each class appear.
      const bool flip = (rng() & 1u) != 0;
      const double s0 = flip ? -1.0 : 1.0;
      const double s1 = labels(i) > 0.0 ? s0 : -s0;
      x(0) = s0 * std::abs(x(0));
      x(1) = s1 * std::abs(x(1));
      raw.col(i) = x;
    }
  }

  double raw_margin = std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) {
    raw_margin = std::min(raw_margin, labels(i) * separator.dot(raw.col(i)));
  }

  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  const int n_val = static_cast<int>(std::floor(spec.val_fraction * n));
  const int n_train = n - n_val;

  Matrix train_raw(d, n_train), val_raw(d, std::max(n_val, 0));
  Vector train_labels(n_train), val_labels(std::max(n_val, 0));
  for (int i = 0; i < n_train; ++i) {
    train_raw.col(i) = raw.col(perm[static_cast<std::size_t>(i)]);
    train_labels(i) = labels(perm[static_cast<std::size_t>(i)]);
  }
  for (int i = 0; i < n_val; ++i) {
    val_raw.col(i) = raw.col(perm[static_cast<std::size_t>(n_train + i)]);
    val_labels(i) = labels(perm[static_cast<std::size_t>(n_train + i)]);
  }

  GeneratedData out;
  out.train = to_pipeline(train_raw, train_labels);
  out.val = n_val > 0 ? to_pipeline(val_raw, val_labels)
                      : Dataset{Matrix(d + 1, 0), Vector(0)};
  out.separator = separator;
  out.raw_margin = raw_margin;
  validate_dataset(out.train);
  if (out.val.size() > 0) validate_dataset(out.val);
  return out;
}

Dataset load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset file " + path);

  std::vector<std::vector<double>> raw_rows;
  std::vector<double> labels;
  std::string line;
  long line_number = 0;
  Eigen::Index feature_count = -1;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::vector<double> fields;
    std::stringstream row(line);
    std::string cell;
    while (std::getline(row, cell, ',')) {
      std::size_t pos = 0;
      double value = 0.0;
      try {
        value = std::stod(cell, &pos);
      } catch (const std::exception&) {
        throw std::runtime_error("row " + std::to_string(line_number) +
                                 ": cannot parse value '" + cell + "'");
      }
      while (pos < cell.size() && std::isspace(static_cast<unsigned char>(cell[pos]))) ++pos;
      if (pos != cell.size()) {
        throw std::runtime_error("row " + std::to_string(line_number) +
                                 ": trailing characters in value '" + cell + "'");
      }
      fields.push_back(value);
    }
    if (fields.size() < 2) {
      throw std::runtime_error("row " + std::to_string(line_number) +
                               ": need a label and at least one feature");
    }
    const double label = fields.front();
    double mapped = 0.0;
    if (label == 1.0) {
      mapped = 1.0;
    } else if (label == -1.0 || label == 0.0) {
      mapped = -1.0;
    } else {
      throw std::runtime_error("row " + std::to_string(line_number) + ": label " +
                               fmt17(label) + " is not in {-1, +1} or {0, 1}");
    }
    const Eigen::Index features = static_cast<Eigen::Index>(fields.size()) - 1;
    if (feature_count < 0) {
      feature_count = features;
    } else if (features != feature_count) {
      throw std::runtime_error("row " + std::to_string(line_number) + ": has " +
                               std::to_string(features) + " features, expected " +
                               std::to_string(feature_count));
    }
    labels.push_back(mapped);
    raw_rows.push_back(std::vector<double>(fields.begin() + 1, fields.end()));
  }
  if (raw_rows.empty()) throw std::runtime_error("dataset file " + path + " holds no rows");

  Matrix raw(feature_count, static_cast<Eigen::Index>(raw_rows.size()));
  Vector y(static_cast<Eigen::Index>(labels.size()));
  for (std::size_t i = 0; i < raw_rows.size(); ++i) {
    for (Eigen::Index j = 0; j < feature_count; ++j) {
      raw(j, static_cast<Eigen::Index>(i)) = raw_rows[i][static_cast<std::size_t>(j)];
    }
    y(static_cast<Eigen::Index>(i)) = labels[i];
  }
  Dataset data = to_pipeline(raw, y);
  validate_dataset(data);
  return data;
}

void save_csv(const Dataset& data, const std::string& path) {
  validate_dataset(data);
  const Eigen::Index d = data.dim() - 1;
  if (d < 1) throw std::invalid_argument("dataset has no feature coordinates besides bias");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write dataset to " + path);
  for (Eigen::Index n = 0; n < data.size(); ++n) {
    const double bias = data.inputs(d, n);
    if (!(bias > 0.0)) {
      throw std::invalid_argument("sample " + std::to_string(n + 1) +
                                  " has non-positive bias coordinate, not pipeline output");
    }
    out << fmt17(data.labels(n));
    for (Eigen::Index j = 0; j < d; ++j) out << "," << fmt17(data.inputs(j, n) / bias);
    out << "\n";
  }
}

namespace {

void write_matrix_json(std::ofstream& out, const Matrix& m) {
  out << "{\"rows\": " << m.rows() << ", \"cols\": " << m.cols() << ", \"entries\": [";
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      if (r != 0 || c != 0) out << ", ";
      out << fmt17(m(r, c));
    }
  }
  out << "]}";
}

}  // namespace

void save_checkpoint(const NormalizedNet& net, const std::string& path) {
  validate_chain(net.v);
  if (net.mode == NormMode::row && net.row_norms.size() != net.v.size()) {
    throw std::invalid_argument("row-mode net is missing its row norms");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint to " + path);
  out << "{\n  \"mode\": \"" << (net.mode == NormMode::matrix ? "matrix" : "row")
      << "\",\n  \"rho\": " << fmt17(net.rho) << ",\n  \"layers\": [\n";
  for (std::size_t k = 0; k < net.v.size(); ++k) {
    out << "    ";
    write_matrix_json(out, net.v[k]);
    out << (k + 1 < net.v.size() ? ",\n" : "\n");
  }
  out << "  ]";
  if (net.mode == NormMode::row) {
    out << ",\n  \"row_norms\": [\n";
    for (std::size_t k = 0; k < net.row_norms.size(); ++k) {
      out << "    [";
      for (Eigen::Index r = 0; r < net.row_norms[k].size(); ++r) {
        if (r != 0) out << ", ";
        out << fmt17(net.row_norms[k](r));
      }
      out << "]" << (k + 1 < net.row_norms.size() ? ",\n" : "\n");
    }
    out << "  ]";
  }
  out << "\n}\n";
}

void save_checkpoint(const NetworkParams& net, const std::string& path) {
  save_checkpoint(decompose(net, NormMode::matrix), path);
}

NormalizedNet load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("checkpoint " + path + " is not valid JSON: " + e.what());
  }
  if (!doc.is_object() || !doc.contains("mode") || !doc.contains("rho") ||
      !doc.contains("layers")) {
    throw std::runtime_error("checkpoint " + path + " is missing mode, rho or layers");
  }
  NormalizedNet net;
  const std::string mode = doc.at("mode").get<std::string>();
  if (mode == "matrix") {
    net.mode = NormMode::matrix;
  } else if (mode == "row") {
    net.mode = NormMode::row;
  } else {
    throw std::runtime_error("checkpoint mode '" + mode + "' is not matrix or row");
  }
  net.rho = doc.at("rho").get<double>();
  for (const auto& layer : doc.at("layers")) {
    if (!layer.contains("rows") || !layer.contains("cols") || !layer.contains("entries")) {
      throw std::runtime_error("layer " + std::to_string(net.v.size() + 1) +
                               " is missing rows, cols or entries");
    }
    const Eigen::Index rows = layer.at("rows").get<Eigen::Index>();
    const Eigen::Index cols = layer.at("cols").get<Eigen::Index>();
    const auto& entries = layer.at("entries");
    if (rows < 1 || cols < 1 ||
        static_cast<Eigen::Index>(entries.size()) != rows * cols) {
      throw std::runtime_error("layer " + std::to_string(net.v.size() + 1) + " claims " +
                               std::to_string(rows) + "x" + std::to_string(cols) +
                               " but holds " + std::to_string(entries.size()) + " entries");
    }
    Matrix m(rows, cols);
    Eigen::Index idx = 0;
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) {
        m(r, c) = entries.at(static_cast<std::size_t>(idx++)).get<double>();
      }
    }
    net.v.push_back(std::move(m));
  }
  validate_chain(net.v);
  if (net.mode == NormMode::row) {
    if (!doc.contains("row_norms")) {
      throw std::runtime_error("row-mode checkpoint is missing row_norms");
    }
    const auto& norms = doc.at("row_norms");
    if (static_cast<std::size_t>(norms.size()) != net.v.size()) {
      throw std::runtime_error("row_norms lists " + std::to_string(norms.size()) +
                               " layers, expected " + std::to_string(net.v.size()));
    }
    for (std::size_t k = 0; k < net.v.size(); ++k) {
      const auto& layer_norms = norms.at(k);
      if (static_cast<Eigen::Index>(layer_norms.size()) != net.v[k].rows()) {
        throw std::runtime_error("row_norms for layer " + std::to_string(k + 1) + " lists " +
                                 std::to_string(layer_norms.size()) + " rows, expected " +
                                 std::to_string(net.v[k].rows()));
      }
      Vector v(net.v[k].rows());
      for (Eigen::Index r = 0; r < v.size(); ++r) {
        v(r) = layer_norms.at(static_cast<std::size_t>(r)).get<double>();
      }
      net.row_norms.push_back(std::move(v));
    }
  } else if (doc.contains("row_norms")) {
    throw std::runtime_error("matrix-mode checkpoint must not carry row_norms");
  }
  return net;
}

}  // namespace sqloss
