#pragma once

#include "sqloss/diagnostics.hpp"
#include "sqloss/net.hpp"

#include <cstdint>
#include <random>
#include <vector>

namespace sqloss {

/// Which constraint the trainer re-imposes after each step. Layers k < L are
/// normalized; the last layer is left free and carries the scale.
enum class NormalizeMode { none, matrix, row };

struct TrainConfig {
  double lr = 0.1;
  double momentum = 0.0;  // in [0, 1)
  int batch_size = 1;
  int epochs = 1;
  double weight_decay = 0.0;
  NormalizeMode normalize = NormalizeMode::none;
  std::vector<double> init_frobenius = {1.0};  // one value broadcasts to every layer
  std::uint64_t seed = 0;
  int trace_stride = 1;  // in optimizer steps
};

struct TrainState {
  NetworkParams net;
  std::vector<Matrix> velocity;  // momentum buffers, same shapes as net.layers
  int epoch = 0;
  long step = 0;
  std::mt19937_64 rng;
};

/// Each W_k drawn i.i.d. standard normal, then rescaled so ||W_k||_F equals the
/// requested norm exactly. init_frobenius holds one value per layer, or a single
/// value applied to all.
NetworkParams init_network(const std::vector<int>& widths,
                           const std::vector<double>& init_frobenius, std::uint64_t seed);
NetworkParams init_network(const std::vector<int>& widths, double init_frobenius,
                           std::uint64_t seed);

/// One momentum-SGD step on the summed square loss over the batch plus
/// weight_decay * sum_k ||W_k||_F^2, followed by re-normalization of the
/// constrained layers when cfg.normalize != none.
void sgd_step(TrainState& state, const Matrix& batch_inputs, const Vector& batch_labels,
              const TrainConfig& cfg);

struct TrainResult {
  TrainState state;
  MetricTrace trace;
};

/// Full run: seeded init, epochs x ceil(N / batch_size) steps with a fresh seeded
/// shuffle per epoch (short last batch kept), trace recorded at step 0, every
/// trace_stride steps, and at the final step.
TrainResult train(const Dataset& data, const Dataset* val, const std::vector<int>& widths,
                  const TrainConfig& cfg);

}  // namespace sqloss
