#pragma once

#include "sqloss/net.hpp"

#include <optional>
#include <string>
#include <vector>

namespace sqloss {

/// One recorded point along a flow or training trajectory.
struct TraceRow {
  double index = 0.0;  // time for flows, step count for SGD
  double rho = 0.0;
  double nu = 0.0;
  double loss = 0.0;
  double train_accuracy = 0.0;
  double mean_abs_f = 0.0;
  double min_margin = 0.0;
  double mean_margin = 0.0;
  double max_interp_residual = 0.0;       // max_n |rho f_n - y_n|
  std::vector<double> layer_residuals;    // mean_n ||V_k f_n - df_n/dV_k|| / (1 + |f_n|)
  std::optional<double> val_loss;
  std::optional<double> val_accuracy;
};

struct MetricTrace {
  std::string index_label = "t";
  std::size_t layer_count = 0;
  bool has_validation = false;
  bool converged = false;
  std::vector<TraceRow> rows;

  std::string csv() const;
  void write_csv(const std::string& path) const;
};

/// Recompute every trace column for the current state. Works for any normalized net
/// with rho >= 0 (rho = 0 states are legal along flows).
TraceRow record(const NormalizedNet& net, double index, const Dataset& data,
                const Dataset* val = nullptr);

/// Trainer-facing overload: decomposes the raw weights in matrix mode first, so
/// g = rho f holds for all recorded quantities regardless of the training regime.
TraceRow record(const NetworkParams& net, double index, const Dataset& data,
                const Dataset* val = nullptr);

struct ConstraintResiduals {
  // ||sum_n (rho f_n - y_n)(df_n/dV_k - V_k f_n)||_F per layer: the aggregate
  // critical-point balance, exactly 0 at exact interpolation.
  std::vector<double> aggregate;
  // mean_n ||V_k f_n - df_n/dV_k||_F / (1 + |f_n|) per layer: the interpolation-regime
  // per-sample residual, comparable across rho scales.
  std::vector<double> per_sample_mean;
};

ConstraintResiduals constraint_residuals(const NormalizedNet& net, const Dataset& data);

struct LayerShapeReport {
  double partial_isometry_defect = 0.0;     // ||V V^T V - V||_F
  double scaled_orthogonality_defect = 0.0; // ||V^T V - (1/rows) I||_F
};

/// Descriptive probe of how close each V_k is to a (scaled) partial isometry.
std::vector<LayerShapeReport> projection_orthogonality_probe(const NormalizedNet& net);

/// Binary Neural Collapse statistics (C = 2; the ETF target cosine is -1).
struct NCReport {
  double nc1 = 0.0;           // trace(within-class scatter) / trace(between-class scatter)
  double nc2_angle_dev = 0.0; // |cos(centered class means) - (-1)|
  double nc2_norm_dev = 0.0;  // max relative deviation of centered class-mean norms
  double nc3 = 0.0;           // 1 - cos(classifier row, class-mean difference)
  double nc4 = 0.0;           // fraction where sign(g) disagrees with nearest-center rule
};

/// features: one column per sample (penultimate-layer activations); labels in {-1,+1};
/// classifier: the 1 x p last-layer matrix.
NCReport nc_metrics(const Matrix& features, const Vector& labels, const Matrix& classifier);

struct SweepRunRecord {
  std::string run_id;
  double lambda = 0.0;          // weight decay (flow lambda or SGD wd)
  double init_frobenius = 0.0;
  double final_rho = 0.0;
  double final_min_margin = 0.0;
  double final_max_interp_residual = 0.0;
  std::optional<double> val_error;
  bool near_interpolating = false;
  double margin_inv_rho_dev = 0.0;  // |min_margin - 1/rho|, meaningful when near-interpolating
};

struct SweepReport {
  std::vector<SweepRunRecord> runs;
  // Rank correlations across runs; absent when fewer than two runs qualify.
  std::optional<double> spearman_rho_val_error;
  std::optional<double> spearman_lambda_rho;
  double max_margin_duality_dev = 0.0;  // over the near-interpolating subset
};

/// Tabulates per-run outcomes, checks min_margin ~ 1/rho on the near-interpolating
/// subset, and rank-correlates final rho with validation error.
SweepReport sweep_compare(std::vector<SweepRunRecord> runs, double tol_interpolation);

double spearman_rank_correlation(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace sqloss
