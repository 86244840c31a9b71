#pragma once

#include "sqloss/numerics.hpp"

#include <optional>
#include <vector>

namespace sqloss {

/// Bias-free deep ReLU network W_L relu(W_{L-1} ... relu(W_1 x)) with scalar output.
struct NetworkParams {
  std::vector<Matrix> layers;  // W_1 ... W_L, W_k.cols == W_{k-1}.rows, W_L.rows == 1

  int depth() const { return static_cast<int>(layers.size()); }
  Eigen::Index input_dim() const { return layers.front().cols(); }
};

enum class NormMode { matrix, row };

/// (rho, V_1..V_L) decomposition. Matrix mode: each V_k has unit Frobenius norm and
/// rho is the product of the original layer norms. Row mode: each row of each V_k has
/// unit Euclidean norm; the original row norms are kept so recomposition is exact, and
/// rho is still the product of Frobenius norms, for reporting.
struct NormalizedNet {
  double rho = 1.0;
  std::vector<Matrix> v;
  NormMode mode = NormMode::matrix;
  std::vector<Vector> row_norms;  // row mode only, one entry per layer

  int depth() const { return static_cast<int>(v.size()); }
  Eigen::Index input_dim() const { return v.front().cols(); }
};

/// Per-layer ReLU on/off states for one input: diag[k](i) = 1 iff the unit's
/// pre-activation is strictly positive.
struct ActivationPattern {
  std::vector<Vector> diag;  // D_1 ... D_{L-1}
};

/// Unit-norm inputs (one column per sample, bias coordinate appended before
/// normalization) with +-1 labels.
struct Dataset {
  Matrix inputs;  // d x N
  Vector labels;  // N, entries in {-1, +1}

  Eigen::Index dim() const { return inputs.rows(); }
  Eigen::Index size() const { return inputs.cols(); }
};

void validate_chain(const std::vector<Matrix>& layers);
void validate_dataset(const Dataset& data);

double forward(const NetworkParams& net, const Vector& x);

NormalizedNet decompose(const NetworkParams& net, NormMode mode);
NetworkParams recompose(const NormalizedNet& net);

/// f(x): forward pass of the normalized network.
double normalized_forward(const NormalizedNet& net, const Vector& x);

ActivationPattern activation_pattern(const NormalizedNet& net, const Vector& x);

/// f(x) = V_L D_{L-1} V_{L-1} ... D_1 V_1 x as a pure matrix product; equals the
/// recursive ReLU forward when `pattern` was computed from the same (net, x).
double forward_product(const NormalizedNet& net, const ActivationPattern& pattern,
                       const Vector& x);

/// Backprop gradients of the scalar f(x) with respect to each V_k, activation
/// pattern held fixed (ReLU subgradient 0 at exactly 0).
std::vector<Matrix> grad_f_v(const NormalizedNet& net, const Vector& x);

/// y_n f(x_n) for every sample.
Vector margins(const NormalizedNet& net, const Dataset& data);

/// Per layer k, ||V_k f(x) - df/dV_k||_F: the per-sample critical-point residual.
std::vector<double> euler_characterization_check(const NormalizedNet& net, const Vector& x);

// Batched evaluation over a whole column-per-sample input matrix. These power the
// flow, trainer and diagnostics; the per-sample ops above stay the tested contract.

/// f values for every column of X; optionally keeps the post-ReLU activations
/// (acts[0] = X, acts[k] = layer-k activations) for a following backward pass.
Vector chain_forward_batch(const std::vector<Matrix>& layers, const Matrix& x,
                           std::vector<Matrix>* acts = nullptr);

/// sum_n c_n * d f_n / d W_k for every layer, in one weighted backward pass.
std::vector<Matrix> chain_grad_weighted(const std::vector<Matrix>& layers, const Matrix& x,
                                        const Vector& c);

}  // namespace sqloss
