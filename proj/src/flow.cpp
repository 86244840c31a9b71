#include "sqloss/flow.hpp"

#include <cmath>
#include <cstdio>
#include <string>
#include <utility>

namespace sqloss {

namespace {

std::string short_num(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", x);
  return buf;
}

}  // namespace

double lagrange_nu(double rho, const Vector& f, const Vector& y) {
  if (f.size() != y.size()) {
    throw std::invalid_argument("lagrange_nu: f has " + std::to_string(f.size()) +
                                " entries but y has " + std::to_string(y.size()));
  }
  return 0.0 - (rho * rho * f.squaredNorm() - rho * y.dot(f));
}

double rho_dot(double rho, const Vector& f, const Vector& y, double lambda) {
  if (f.size() != y.size()) {
    throw std::invalid_argument("rho_dot: f has " + std::to_string(f.size()) +
                                " entries but y has " + std::to_string(y.size()));
  }
  return -2.0 * (rho * f.squaredNorm() - f.dot(y)) - 2.0 * lambda * rho;
}

std::vector<Matrix> v_dot(const FlowState& state, const Dataset& data) {
  const double rho = state.net.rho;
  const Vector c = rho * state.f - data.labels;
  const std::vector<Matrix> grads = chain_grad_weighted(state.net.v, data.inputs, c);
  const double cf = c.dot(state.f);
  std::vector<Matrix> out(grads.size());
  for (std::size_t k = 0; k < grads.size(); ++k) {
    const Matrix raw = 2.0 * rho * (cf * state.net.v[k] - grads[k]);
    out[k] = tangent_project(raw, state.net.v[k]);
  }
  return out;
}

double FlowField::norm() const {
  double sq = rho_dot * rho_dot;
  for (const Matrix& m : v_dot) sq += m.squaredNorm();
  return std::sqrt(sq);
}

FlowField flow_field(const FlowState& state, const Dataset& data, double lambda) {
  FlowField field;
  field.rho_dot = sqloss::rho_dot(state.net.rho, state.f, data.labels, lambda);
  field.v_dot = v_dot(state, data);
  return field;
}

FlowState make_flow_state(NormalizedNet net, const Dataset& data, double t) {
  if (net.mode != NormMode::matrix) {
    throw std::invalid_argument("flow states require a matrix-mode normalized net");
  }
  if (!(net.rho >= 0.0)) {
    throw std::invalid_argument("flow states require rho >= 0");
  }
  validate_chain(net.v);
  for (std::size_t k = 0; k < net.v.size(); ++k) {
    if (std::abs(frobenius_norm(net.v[k]) - 1.0) > kTauNorm) {
      throw std::invalid_argument("layer " + std::to_string(k + 1) +
                                  " is not on the unit Frobenius sphere");
    }
  }
  if (data.dim() != net.input_dim()) {
    throw std::invalid_argument("dataset dimension " + std::to_string(data.dim()) +
                                " does not match network input dimension " +
                                std::to_string(net.input_dim()));
  }
  FlowState state;
  state.t = t;
  state.net = std::move(net);
  state.f = chain_forward_batch(state.net.v, data.inputs);
  state.nu = lagrange_nu(state.net.rho, state.f, data.labels);
  state.loss = (state.net.rho * state.f - data.labels).squaredNorm();
  return state;
}

namespace {

/// Projected update: rho and every V_k move h along the field, rho is clamped at 0
/// and each V_k is pulled back to the unit sphere, then f, nu, loss are recomputed.
FlowState advance(const FlowState& state, double h, const FlowField& field,
                  const Dataset& data, bool* rho_clamped) {
  NormalizedNet next = state.net;
  next.rho = state.net.rho + h * field.rho_dot;
  if (next.rho < 0.0) {
    next.rho = 0.0;
    if (rho_clamped) *rho_clamped = true;
  }
  for (std::size_t k = 0; k < next.v.size(); ++k) {
    const Matrix moved = state.net.v[k] + h * field.v_dot[k];
    if ((moved - state.net.v[k]).squaredNorm() == 0.0) {
      continue;  // zero displacement: skip the projection so the layer holds bitwise
    }
    const double norm = frobenius_norm(moved);
    if (!all_finite(moved) || !(norm > 0.0)) {
      throw FlowDivergence("flow step produced a non-finite or zero layer " +
                               std::to_string(k + 1) + " at t=" + short_num(state.t + h),
                           MetricTrace{});
    }
    next.v[k] = moved / norm;
  }
  FlowState out = make_flow_state(std::move(next), data, state.t + h);
  if (!std::isfinite(out.net.rho) || !all_finite(out.f) || !std::isfinite(out.loss)) {
    throw FlowDivergence("flow step produced non-finite outputs at t=" + short_num(out.t),
                         MetricTrace{});
  }
  return out;
}

FlowState step_with_field(const FlowState& state, const Dataset& data, const FlowConfig& cfg,
                          const FlowField& k1, bool* rho_clamped) {
  if (rho_clamped) *rho_clamped = false;
  if (cfg.integrator == Integrator::euler_project) {
    return advance(state, cfg.dt, k1, data, rho_clamped);
  }
  // Classic RK4 on the ambient coordinates; each stage state is re-projected
  // before its field evaluation, the full step is projected once at the end.
  const FlowState s2 = advance(state, 0.5 * cfg.dt, k1, data, nullptr);
  const FlowField k2 = flow_field(s2, data, cfg.lambda);
  const FlowState s3 = advance(state, 0.5 * cfg.dt, k2, data, nullptr);
  const FlowField k3 = flow_field(s3, data, cfg.lambda);
  const FlowState s4 = advance(state, cfg.dt, k3, data, nullptr);
  const FlowField k4 = flow_field(s4, data, cfg.lambda);
  FlowField combined;
  combined.rho_dot = (k1.rho_dot + 2.0 * k2.rho_dot + 2.0 * k3.rho_dot + k4.rho_dot) / 6.0;
  combined.v_dot.resize(k1.v_dot.size());
  for (std::size_t k = 0; k < combined.v_dot.size(); ++k) {
    combined.v_dot[k] =
        (k1.v_dot[k] + 2.0 * k2.v_dot[k] + 2.0 * k3.v_dot[k] + k4.v_dot[k]) / 6.0;
  }
  return advance(state, cfg.dt, combined, data, rho_clamped);
}

void check_config(const FlowConfig& cfg) {
  if (!(cfg.dt > 0.0)) throw std::invalid_argument("dt must be positive");
  if (cfg.lambda < 0.0) throw std::invalid_argument("lambda must be non-negative");
  if (!(cfg.t_max > 0.0)) throw std::invalid_argument("t_max must be positive");
  if (cfg.trace_stride < 1) throw std::invalid_argument("trace_stride must be at least 1");
  if (!(cfg.tol_equilibrium > 0.0)) {
    throw std::invalid_argument("tol_equilibrium must be positive");
  }
}

}  // namespace

FlowState step(const FlowState& state, const Dataset& data, const FlowConfig& cfg,
               bool* rho_clamped) {
  check_config(cfg);
  const FlowField k1 = flow_field(state, data, cfg.lambda);
  return step_with_field(state, data, cfg, k1, rho_clamped);
}

FlowResult integrate(FlowState state, const Dataset& data, const FlowConfig& cfg) {
  check_config(cfg);
  FlowResult result;
  result.trace.index_label = "t";
  result.trace.layer_count = static_cast<std::size_t>(state.net.depth());
  result.trace.has_validation = false;
  result.trace.rows.push_back(record(state.net, state.t, data));
  double last_recorded_t = state.t;
  long clamp_count = 0;
  double first_clamp_t = 0.0;
  long step_count = 0;
  try {
    while (true) {
      const FlowField field = flow_field(state, data, cfg.lambda);
      if (field.norm() < cfg.tol_equilibrium) {
        result.converged = true;
        result.events.push_back("equilibrium reached at t=" + short_num(state.t));
        break;
      }
      if (state.t >= cfg.t_max) {
        result.events.push_back("t_max reached before equilibrium");
        break;
      }
      bool clamped = false;
      state = step_with_field(state, data, cfg, field, &clamped);
      if (clamped) {
        if (clamp_count == 0) first_clamp_t = state.t;
        ++clamp_count;
      }
      ++step_count;
      if (step_count % cfg.trace_stride == 0) {
        result.trace.rows.push_back(record(state.net, state.t, data));
        last_recorded_t = state.t;
      }
    }
  } catch (const FlowDivergence& e) {
    throw FlowDivergence(e.what(), std::move(result.trace));
  }
  if (last_recorded_t != state.t) {
    result.trace.rows.push_back(record(state.net, state.t, data));
  }
  if (clamp_count > 0) {
    result.events.push_back("rho clamped to 0 on " + std::to_string(clamp_count) +
                            " step(s), first at t=" + short_num(first_clamp_t));
  }
  result.trace.converged = result.converged;
  result.final_state = std::move(state);
  return result;
}

double rho_equilibrium(const Vector& f, const Vector& y, double lambda) {
  if (f.size() != y.size()) {
    throw std::invalid_argument("rho_equilibrium: f has " + std::to_string(f.size()) +
                                " entries but y has " + std::to_string(y.size()));
  }
  const double denom = lambda + f.squaredNorm();
  if (denom == 0.0) {
    throw std::invalid_argument("rho_equilibrium undefined: lambda + sum_n f_n^2 is zero");
  }
  return y.dot(f) / denom;
}

std::optional<double> first_critical_rho(const std::function<Vector(double)>& f_profile,
                                         const Vector& y, double lambda,
                                         const std::vector<double>& rho_grid) {
  if (rho_grid.empty()) return std::nullopt;
  auto balance = [&](double rho) {
    const Vector f = f_profile(rho);
    if (f.size() != y.size()) {
      throw std::invalid_argument("f_profile output size does not match the labels");
    }
    return y.dot(f) - rho * (lambda + f.squaredNorm());
  };
  std::vector<double> values(rho_grid.size());
  for (std::size_t i = 0; i < rho_grid.size(); ++i) values[i] = balance(rho_grid[i]);
  // A zero balance at rho = 0 is the signal-free rest point of the parametrization,
  // not a scale the dynamics selects, so it never counts as a crossing.
  for (std::size_t i = 0; i + 1 < rho_grid.size(); ++i) {
    if (values[i] == 0.0 && rho_grid[i] != 0.0) return rho_grid[i];
    if (values[i] * values[i + 1] < 0.0) {
      double a = rho_grid[i];
      double b = rho_grid[i + 1];
      double ga = values[i];
      for (int it = 0; it < 200 && b - a > 1e-13 * std::max(1.0, std::abs(b)); ++it) {
        const double mid = 0.5 * (a + b);
        const double gm = balance(mid);
        if (gm == 0.0) return mid;
        if (ga * gm < 0.0) {
          b = mid;
        } else {
          a = mid;
          ga = gm;
        }
      }
      return 0.5 * (a + b);
    }
  }
  if (values.back() == 0.0 && rho_grid.back() != 0.0) return rho_grid.back();
  return std::nullopt;
}

SingularityReport singularity_probe(const FlowState& state, const Dataset& data,
                                    double tol_interpolation, double tol_residual) {
  SingularityReport report;
  const Vector residual = (state.net.rho * state.f - data.labels).cwiseAbs();
  report.max_interp_residual = residual.size() > 0 ? residual.maxCoeff() : 0.0;
  report.interpolating = report.max_interp_residual < tol_interpolation;
  const std::size_t depth = static_cast<std::size_t>(state.net.depth());
  report.layer_residuals.assign(depth, 0.0);
  for (Eigen::Index n = 0; n < data.size(); ++n) {
    const Vector x = data.inputs.col(n);
    const std::vector<Matrix> grads = grad_f_v(state.net, x);
    for (std::size_t k = 0; k < depth; ++k) {
      report.layer_residuals[k] +=
          frobenius_norm((state.net.v[k] * state.f(n) - grads[k]).eval());
    }
  }
  double max_layer_residual = 0.0;
  for (std::size_t k = 0; k < depth; ++k) {
    report.layer_residuals[k] /= static_cast<double>(data.size());
    max_layer_residual = std::max(max_layer_residual, report.layer_residuals[k]);
  }
  report.singular = report.interpolating && max_layer_residual > tol_residual;
  return report;
}

bool orient_for_separability(NormalizedNet& net, const Dataset& data) {
  if (data.dim() != net.input_dim()) {
    throw std::invalid_argument("dataset dimension " + std::to_string(data.dim()) +
                                " does not match network input dimension " +
                                std::to_string(net.input_dim()));
  }
  const Vector f = chain_forward_batch(net.v, data.inputs);
  if (data.labels.dot(f) >= 0.0) return false;
  net.v.back() = -net.v.back();
  return true;
}

NormalizedNet random_normalized_net(const std::vector<int>& widths, double rho,
                                    std::uint64_t seed) {
  if (widths.size() < 2) {
    throw std::invalid_argument("widths must list the input dimension and every layer");
  }
  for (int w : widths) {
    if (w < 1) throw std::invalid_argument("widths must be positive");
  }
  if (widths.back() != 1) {
    throw std::invalid_argument("the output width must be 1");
  }
  if (rho < 0.0) throw std::invalid_argument("rho must be non-negative");
  std::mt19937_64 rng(seed);
  NormalizedNet net;
  net.rho = rho;
  net.mode = NormMode::matrix;
  net.v.reserve(widths.size() - 1);
  for (std::size_t k = 0; k + 1 < widths.size(); ++k) {
    Matrix layer = gaussian_matrix(widths[k + 1], widths[k], rng);
    const double norm = frobenius_norm(layer);
    if (!(norm > 0.0)) {
      throw std::invalid_argument("drawn layer " + std::to_string(k + 1) + " is zero");
    }
    net.v.push_back(layer / norm);
  }
  return net;
}

}  // namespace sqloss
