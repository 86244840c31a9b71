#include "sqloss/sgd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace sqloss {

namespace {

void check_widths(const std::vector<int>& widths) {
  if (widths.size() < 2) {
    throw std::invalid_argument("widths must list the input dimension and every layer");
  }
  for (int w : widths) {
    if (w < 1) throw std::invalid_argument("widths must be positive");
  }
  if (widths.back() != 1) throw std::invalid_argument("the output width must be 1");
}

std::vector<double> per_layer_norms(const std::vector<double>& init_frobenius,
                                    std::size_t depth) {
  std::vector<double> norms;
  if (init_frobenius.size() == 1) {
    norms.assign(depth, init_frobenius.front());
  } else if (init_frobenius.size() == depth) {
    norms = init_frobenius;
  } else {
    throw std::invalid_argument("init_frobenius needs 1 or " + std::to_string(depth) +
                                " values, got " + std::to_string(init_frobenius.size()));
  }
  for (double v : norms) {
    if (!(v > 0.0)) throw std::invalid_argument("init_frobenius values must be positive");
  }
  return norms;
}

void check_config(const TrainConfig& cfg) {
  if (!(cfg.lr > 0.0)) throw std::invalid_argument("lr must be positive");
  if (cfg.momentum < 0.0 || cfg.momentum >= 1.0) {
    throw std::invalid_argument("momentum must lie in [0, 1)");
  }
  if (cfg.batch_size < 1) throw std::invalid_argument("batch_size must be at least 1");
  if (cfg.epochs < 0) throw std::invalid_argument("epochs must be non-negative");
  if (cfg.weight_decay < 0.0) throw std::invalid_argument("weight_decay must be non-negative");
  if (cfg.trace_stride < 1) throw std::invalid_argument("trace_stride must be at least 1");
}

/// Pull the constrained layers (all but the last) back onto their constraint set.
void renormalize_constrained(NetworkParams& net, NormalizeMode mode) {
  if (mode == NormalizeMode::none) return;
  for (std::size_t k = 0; k + 1 < net.layers.size(); ++k) {
    Matrix& w = net.layers[k];
    if (mode == NormalizeMode::matrix) {
      const double norm = frobenius_norm(w);
      if (!(norm > 0.0)) {
        throw std::runtime_error("layer " + std::to_string(k + 1) +
                                 " collapsed to zero, cannot re-normalize");
      }
      w /= norm;
    } else {
      for (Eigen::Index r = 0; r < w.rows(); ++r) {
        const double norm = w.row(r).norm();
        if (!(norm > 0.0)) {
          throw std::runtime_error("layer " + std::to_string(k + 1) + " row " +
                                   std::to_string(r + 1) +
                                   " collapsed to zero, cannot re-normalize");
        }
        w.row(r) /= norm;
      }
    }
  }
}

std::string state_dump(const TrainState& state, double batch_loss) {
  double rho = 1.0;
  for (const Matrix& w : state.net.layers) rho *= frobenius_norm(w);
  return "epoch " + std::to_string(state.epoch) + ", step " + std::to_string(state.step) +
         ", rho " + std::to_string(rho) + ", batch loss " + std::to_string(batch_loss);
}

}  // namespace

NetworkParams init_network(const std::vector<int>& widths,
                           const std::vector<double>& init_frobenius, std::uint64_t seed) {
  check_widths(widths);
  const std::size_t depth = widths.size() - 1;
  const std::vector<double> norms = per_layer_norms(init_frobenius, depth);
  std::mt19937_64 rng(seed);
  NetworkParams net;
  net.layers.reserve(depth);
  for (std::size_t k = 0; k < depth; ++k) {
    Matrix layer = gaussian_matrix(widths[k + 1], widths[k], rng);
    const double norm = frobenius_norm(layer);
    if (!(norm > 0.0)) {
      throw std::invalid_argument("drawn layer " + std::to_string(k + 1) + " is zero");
    }
    net.layers.push_back(layer * (norms[k] / norm));
  }
  return net;
}

NetworkParams init_network(const std::vector<int>& widths, double init_frobenius,
                           std::uint64_t seed) {
  return init_network(widths, std::vector<double>{init_frobenius}, seed);
}

void sgd_step(TrainState& state, const Matrix& batch_inputs, const Vector& batch_labels,
              const TrainConfig& cfg) {
  if (batch_inputs.cols() == 0) throw std::invalid_argument("batch must be non-empty");
  if (batch_inputs.cols() != batch_labels.size()) {
    throw std::invalid_argument("batch has " + std::to_string(batch_inputs.cols()) +
                                " inputs but " + std::to_string(batch_labels.size()) +
                                " labels");
  }
  const std::size_t depth = state.net.layers.size();
  if (state.velocity.size() != depth) {
    throw std::invalid_argument("velocity buffers do not match the network depth");
  }

  std::vector<Matrix> acts;
  const Vector g = chain_forward_batch(state.net.layers, batch_inputs, &acts);
  const Vector c = 2.0 * (g - batch_labels);
  std::vector<Matrix> grads = chain_grad_weighted(state.net.layers, batch_inputs, c);

  for (std::size_t k = 0; k < depth; ++k) {
    if (cfg.weight_decay > 0.0) grads[k] += 2.0 * cfg.weight_decay * state.net.layers[k];
    if (!all_finite(grads[k])) {
      throw std::runtime_error("non-finite gradient in layer " + std::to_string(k + 1) +
                               " (" + state_dump(state, (g - batch_labels).squaredNorm()) +
                               ")");
    }
    state.velocity[k] = cfg.momentum * state.velocity[k] + grads[k];
    state.net.layers[k] -= cfg.lr * state.velocity[k];
    if (!all_finite(state.net.layers[k])) {
      throw std::runtime_error("non-finite weights in layer " + std::to_string(k + 1) +
                               " (" + state_dump(state, (g - batch_labels).squaredNorm()) +
                               ")");
    }
  }
  renormalize_constrained(state.net, cfg.normalize);
  ++state.step;
}

TrainResult train(const Dataset& data, const Dataset* val, const std::vector<int>& widths,
                  const TrainConfig& cfg) {
  check_config(cfg);
  check_widths(widths);
  validate_dataset(data);
  if (val) validate_dataset(*val);
  if (data.dim() != widths.front()) {
    throw std::invalid_argument("dataset dimension " + std::to_string(data.dim()) +
                                " does not match the input width " +
                                std::to_string(widths.front()));
  }
  const Eigen::Index n_samples = data.size();
  if (cfg.batch_size > n_samples) {
    throw std::invalid_argument("batch_size " + std::to_string(cfg.batch_size) +
                                " exceeds the dataset size " + std::to_string(n_samples));
  }

  TrainResult result;
  TrainState& state = result.state;
  state.net = init_network(widths, cfg.init_frobenius, cfg.seed);
  // Constrained layers start on their constraint set, so every recorded step
  // (including step 0) satisfies it.
  renormalize_constrained(state.net, cfg.normalize);
  state.velocity.clear();
  for (const Matrix& w : state.net.layers) {
    state.velocity.push_back(Matrix::Zero(w.rows(), w.cols()));
  }
  state.rng.seed(cfg.seed ^ 0x9e3779b97f4a7c15ULL);  // decorrelated from the init draws

  MetricTrace& trace = result.trace;
  trace.index_label = "step";
  trace.layer_count = state.net.layers.size();
  trace.has_validation = val != nullptr && val->size() > 0;
  const Dataset* val_used = trace.has_validation ? val : nullptr;

  trace.rows.push_back(record(state.net, 0.0, data, val_used));
  long last_recorded = 0;

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n_samples));
  std::iota(order.begin(), order.end(), Eigen::Index{0});

  for (state.epoch = 0; state.epoch < cfg.epochs; ++state.epoch) {
    std::shuffle(order.begin(), order.end(), state.rng);
    for (Eigen::Index start = 0; start < n_samples; start += cfg.batch_size) {
      const Eigen::Index b = std::min<Eigen::Index>(cfg.batch_size, n_samples - start);
      Matrix batch_inputs(data.dim(), b);
      Vector batch_labels(b);
      for (Eigen::Index j = 0; j < b; ++j) {
        batch_inputs.col(j) = data.inputs.col(order[static_cast<std::size_t>(start + j)]);
        batch_labels(j) = data.labels(order[static_cast<std::size_t>(start + j)]);
      }
      sgd_step(state, batch_inputs, batch_labels, cfg);
      if (state.step % cfg.trace_stride == 0) {
        trace.rows.push_back(record(state.net, static_cast<double>(state.step), data,
                                    val_used));
        last_recorded = state.step;
      }
    }
  }
  if (last_recorded != state.step) {
    trace.rows.push_back(record(state.net, static_cast<double>(state.step), data, val_used));
  }
  return result;
}

}  // namespace sqloss
