#include "sqloss/net.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace sqloss {

void validate_chain(const std::vector<Matrix>& layers) {
  if (layers.empty()) throw std::invalid_argument("network: needs at least one layer");
  for (std::size_t k = 1; k < layers.size(); ++k) {
    if (layers[k].cols() != layers[k - 1].rows()) {
      throw std::invalid_argument(
          "network: layer " + std::to_string(k + 1) + " is " +
          shape_string(layers[k].rows(), layers[k].cols()) + " but layer " +
          std::to_string(k) + " outputs " + std::to_string(layers[k - 1].rows()));
    }
  }
  if (layers.back().rows() != 1) {
    throw std::invalid_argument("network: last layer must have a single output row, got " +
                                std::to_string(layers.back().rows()));
  }
}

void validate_dataset(const Dataset& data) {
  if (data.labels.size() != data.inputs.cols()) {
    throw std::invalid_argument("dataset: " + std::to_string(data.inputs.cols()) +
                                " inputs but " + std::to_string(data.labels.size()) +
                                " labels");
  }
  if (!all_finite(data.inputs)) throw std::invalid_argument("dataset: non-finite input entry");
  for (Eigen::Index n = 0; n < data.size(); ++n) {
    const double norm = data.inputs.col(n).norm();
    if (std::abs(norm - 1.0) > kTauNorm) {
      throw std::invalid_argument("dataset: sample " + std::to_string(n) +
                                  " has norm " + std::to_string(norm) + ", expected 1");
    }
    const double y = data.labels(n);
    if (y != 1.0 && y != -1.0) {
      throw std::invalid_argument("dataset: label " + std::to_string(n) +
                                  " is " + std::to_string(y) + ", expected -1 or +1");
    }
  }
}

double forward(const NetworkParams& net, const Vector& x) {
  validate_chain(net.layers);
  if (x.size() != net.input_dim()) {
    throw std::invalid_argument("forward: input has length " + std::to_string(x.size()) +
                                ", network expects " + std::to_string(net.input_dim()));
  }
  Vector a = x;
  const int depth = net.depth();
  for (int k = 0; k < depth - 1; ++k) a = (net.layers[k] * a).cwiseMax(0.0);
  return (net.layers[depth - 1] * a)(0);
}

NormalizedNet decompose(const NetworkParams& net, NormMode mode) {
  validate_chain(net.layers);
  NormalizedNet out;
  out.mode = mode;
  out.v.reserve(net.layers.size());
  out.rho = 1.0;
  for (std::size_t k = 0; k < net.layers.size(); ++k) {
    const Matrix& w = net.layers[k];
    out.rho *= w.norm();
    if (mode == NormMode::matrix) {
      const double norm = w.norm();
      if (norm == 0.0) {
        throw std::invalid_argument("decompose: layer " + std::to_string(k + 1) +
                                    " is the zero matrix");
      }
      out.v.push_back(w / norm);
    } else {
      Vector norms = w.rowwise().norm();
      for (Eigen::Index i = 0; i < norms.size(); ++i) {
        if (norms(i) == 0.0) {
          throw std::invalid_argument("decompose: layer " + std::to_string(k + 1) +
                                      " row " + std::to_string(i) + " is zero");
        }
      }
      out.v.push_back(norms.cwiseInverse().asDiagonal() * w);
      out.row_norms.push_back(std::move(norms));
    }
  }
  return out;
}

NetworkParams recompose(const NormalizedNet& net) {
  NetworkParams out;
  out.layers.reserve(net.v.size());
  if (net.mode == NormMode::matrix) {
    // rho_k = 1 for k < L, rho_L = rho; the function is preserved by homogeneity.
    for (std::size_t k = 0; k + 1 < net.v.size(); ++k) out.layers.push_back(net.v[k]);
    out.layers.push_back(net.rho * net.v.back());
  } else {
    for (std::size_t k = 0; k < net.v.size(); ++k) {
      out.layers.push_back(net.row_norms[k].asDiagonal() * net.v[k]);
    }
  }
  return out;
}

double normalized_forward(const NormalizedNet& net, const Vector& x) {
  Vector f = chain_forward_batch(net.v, x, nullptr);
  return f(0);
}

ActivationPattern activation_pattern(const NormalizedNet& net, const Vector& x) {
  if (x.size() != net.input_dim()) {
    throw std::invalid_argument("activation_pattern: input has length " +
                                std::to_string(x.size()) + ", network expects " +
                                std::to_string(net.input_dim()));
  }
  ActivationPattern pattern;
  Vector a = x;
  for (int k = 0; k < net.depth() - 1; ++k) {
    Vector z = net.v[k] * a;
    pattern.diag.push_back((z.array() > 0.0).cast<double>());
    a = z.cwiseMax(0.0);
  }
  return pattern;
}

double forward_product(const NormalizedNet& net, const ActivationPattern& pattern,
                       const Vector& x) {
  if (static_cast<int>(pattern.diag.size()) != net.depth() - 1) {
    throw std::invalid_argument("forward_product: pattern has " +
                                std::to_string(pattern.diag.size()) + " layers, expected " +
                                std::to_string(net.depth() - 1));
  }
  Vector u = x;
  for (int k = 0; k < net.depth() - 1; ++k) {
    u = pattern.diag[k].asDiagonal() * (net.v[k] * u);
  }
  return (net.v.back() * u)(0);
}

std::vector<Matrix> grad_f_v(const NormalizedNet& net, const Vector& x) {
  return chain_grad_weighted(net.v, x, Vector::Ones(1));
}

Vector margins(const NormalizedNet& net, const Dataset& data) {
  Vector f = chain_forward_batch(net.v, data.inputs);
  return data.labels.cwiseProduct(f);
}

std::vector<double> euler_characterization_check(const NormalizedNet& net, const Vector& x) {
  const double f = normalized_forward(net, x);
  const std::vector<Matrix> grads = grad_f_v(net, x);
  std::vector<double> residuals;
  residuals.reserve(grads.size());
  for (std::size_t k = 0; k < grads.size(); ++k) {
    residuals.push_back((net.v[k] * f - grads[k]).norm());
  }
  return residuals;
}

Vector chain_forward_batch(const std::vector<Matrix>& layers, const Matrix& x,
                           std::vector<Matrix>* acts) {
  validate_chain(layers);
  if (x.rows() != layers.front().cols()) {
    throw std::invalid_argument("chain_forward_batch: inputs have dimension " +
                                std::to_string(x.rows()) + ", network expects " +
                                std::to_string(layers.front().cols()));
  }
  const int depth = static_cast<int>(layers.size());
  if (acts) {
    acts->clear();
    acts->reserve(depth);
    acts->push_back(x);
  }
  Matrix a = x;
  for (int k = 0; k < depth - 1; ++k) {
    a = (layers[k] * a).cwiseMax(0.0);
    if (acts) acts->push_back(a);
  }
  return (layers[depth - 1] * a).transpose();
}

std::vector<Matrix> chain_grad_weighted(const std::vector<Matrix>& layers, const Matrix& x,
                                        const Vector& c) {
  if (c.size() != x.cols()) {
    throw std::invalid_argument("chain_grad_weighted: " + std::to_string(x.cols()) +
                                " samples but " + std::to_string(c.size()) + " weights");
  }
  std::vector<Matrix> acts;
  chain_forward_batch(layers, x, &acts);

  const int depth = static_cast<int>(layers.size());
  std::vector<Matrix> grads(depth);
  grads[depth - 1] = (acts[depth - 1] * c).transpose();

  // delta: d(sum_n c_n f_n)/d(activation), masked by the ReLU on/off pattern.
  Matrix delta = layers[depth - 1].transpose() * c.transpose();
  for (int k = depth - 2; k >= 0; --k) {
    delta = delta.cwiseProduct((acts[k + 1].array() > 0.0).cast<double>().matrix());
    grads[k] = delta * acts[k].transpose();
    if (k > 0) delta = layers[k].transpose() * delta;
  }
  return grads;
}

}  // namespace sqloss
