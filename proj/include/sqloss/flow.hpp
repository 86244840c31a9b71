#pragma once

#include "sqloss/diagnostics.hpp"
#include "sqloss/net.hpp"

#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace sqloss {

enum class Integrator { euler_project, rk4_project };

struct FlowConfig {
  double lambda = 0.0;  // weight decay coefficient on rho^2
  double dt = 1e-3;
  Integrator integrator = Integrator::euler_project;
  double t_max = 100.0;
  double tol_equilibrium = 1e-7;    // on the flow-field norm
  double tol_interpolation = 1e-4;  // on max_n |rho f_n - y_n|
  int trace_stride = 10;
};

/// Point on {rho} x (product of unit Frobenius spheres), with the derived
/// quantities the field needs cached.
struct FlowState {
  double t = 0.0;
  NormalizedNet net;  // matrix mode
  Vector f;           // f(x_n) for every training sample
  double nu = 0.0;
  double loss = 0.0;
};

/// nu = -sum_n (rho^2 f_n^2 - rho y_n f_n): the multiplier enforcing ||V_k|| = 1.
double lagrange_nu(double rho, const Vector& f, const Vector& y);

/// rho' = -2 [sum_n rho f_n^2 - sum_n f_n y_n] - 2 lambda rho.
double rho_dot(double rho, const Vector& f, const Vector& y, double lambda);

/// Per layer, 2 rho sum_n (rho f_n - y_n)(V_k f_n - df_n/dV_k), passed through
/// tangent_project: the negative gradient of the regularized Lagrangian with the
/// multiplier eliminated, tangent to the sphere.
std::vector<Matrix> v_dot(const FlowState& state, const Dataset& data);

struct FlowField {
  double rho_dot = 0.0;
  std::vector<Matrix> v_dot;

  double norm() const;
};

FlowField flow_field(const FlowState& state, const Dataset& data, double lambda);

FlowState make_flow_state(NormalizedNet net, const Dataset& data, double t = 0.0);

/// Thrown when a trajectory produces a non-finite value; carries the trace so far.
struct FlowDivergence : std::runtime_error {
  FlowDivergence(const std::string& what, MetricTrace trace_so_far)
      : std::runtime_error(what), trace(std::move(trace_so_far)) {}
  MetricTrace trace;
};

/// One dt step with the configured integrator; every V_k is re-projected to the
/// unit sphere afterwards and f, nu, loss are recomputed. rho is clamped at 0
/// (the clamp is reported through integrate's event list).
FlowState step(const FlowState& state, const Dataset& data, const FlowConfig& cfg,
               bool* rho_clamped = nullptr);

struct FlowResult {
  MetricTrace trace;
  FlowState final_state;
  std::vector<std::string> events;
  bool converged = false;
};

/// Steps until the field norm drops below tol_equilibrium or t exceeds t_max,
/// recording the trace every trace_stride steps.
FlowResult integrate(FlowState state, const Dataset& data, const FlowConfig& cfg);

/// rho_eq = sum_n y_n f_n / (lambda + sum_n f_n^2).
double rho_equilibrium(const Vector& f, const Vector& y, double lambda);

/// Smallest rho on the grid where sum_n y_n f_n - rho (lambda + sum_n f_n^2)
/// changes sign, refined by bisection; nullopt when there is no crossing.
std::optional<double> first_critical_rho(const std::function<Vector(double)>& f_profile,
                                         const Vector& y, double lambda,
                                         const std::vector<double>& rho_grid);

struct SingularityReport {
  bool interpolating = false;
  double max_interp_residual = 0.0;
  std::vector<double> layer_residuals;  // mean_n ||V_k f_n - df_n/dV_k||_F per layer
  bool singular = false;  // interpolating, yet the constraint residuals are not small
};

/// Detects the lambda = 0 pathology: interpolation makes the flow field vanish even
/// when V_k f != df/dV_k, i.e. the state is an equilibrium for the wrong reason.
SingularityReport singularity_probe(const FlowState& state, const Dataset& data,
                                    double tol_interpolation, double tol_residual = 1e-6);

/// Gaussian V_k rescaled to the unit sphere per layer, with the given rho.
NormalizedNet random_normalized_net(const std::vector<int>& widths, double rho,
                                    std::uint64_t seed);

/// Flips the sign of the last layer when sum_n y_n f_n < 0, so the state starts
/// in the average-separability regime (rho' > 0 at rho = 0) the growth analysis
/// assumes; V and -V are equally likely under the Gaussian draw, so this only
/// picks the orientation. Returns whether it flipped.
bool orient_for_separability(NormalizedNet& net, const Dataset& data);

}  // namespace sqloss
