#include "sqloss/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace sqloss {

namespace {

std::string fmt17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double classification_accuracy(const Vector& scores, const Vector& labels) {
  Eigen::Index correct = 0;
  for (Eigen::Index n = 0; n < scores.size(); ++n) {
    const double predicted = scores(n) > 0.0 ? 1.0 : -1.0;
    if (predicted == labels(n)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(scores.size());
}

}  // namespace

std::string MetricTrace::csv() const {
  std::string out = index_label + ",rho,nu,loss,train_accuracy,mean_abs_f,min_margin,mean_margin,max_interp_residual";
  for (std::size_t k = 0; k < layer_count; ++k) {
    out += ",constraint_res_l" + std::to_string(k + 1);
  }
  if (has_validation) out += ",val_loss,val_accuracy";
  out += "\n";
  for (const TraceRow& r : rows) {
    out += fmt17(r.index);
    for (double v : {r.rho, r.nu, r.loss, r.train_accuracy, r.mean_abs_f, r.min_margin,
                     r.mean_margin, r.max_interp_residual}) {
      out += "," + fmt17(v);
    }
    for (double v : r.layer_residuals) out += "," + fmt17(v);
    if (has_validation) {
      out += "," + fmt17(r.val_loss.value_or(0.0));
      out += "," + fmt17(r.val_accuracy.value_or(0.0));
    }
    out += "\n";
  }
  return out;
}

void MetricTrace::write_csv(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write trace to " + path);
  out << csv();
}

TraceRow record(const NormalizedNet& net, double index, const Dataset& data,
                const Dataset* val) {
  TraceRow row;
  row.index = index;

  const Vector f = chain_forward_batch(net.v, data.inputs);
  const Vector& y = data.labels;
  const double rho = net.rho;

  row.rho = rho;
  row.nu = 0.0 - (rho * rho * f.squaredNorm() - rho * y.dot(f));
  row.loss = (rho * f - y).squaredNorm();
  row.train_accuracy = classification_accuracy(rho * f, y);
  row.mean_abs_f = f.cwiseAbs().mean();
  const Vector m = y.cwiseProduct(f);
  row.min_margin = m.minCoeff();
  row.mean_margin = m.mean();
  row.max_interp_residual = (rho * f - y).cwiseAbs().maxCoeff();
  row.layer_residuals = constraint_residuals(net, data).per_sample_mean;

  if (val && val->size() > 0) {
    const Vector fv = chain_forward_batch(net.v, val->inputs);
    row.val_loss = (rho * fv - val->labels).squaredNorm();
    row.val_accuracy = classification_accuracy(rho * fv, val->labels);
  }
  return row;
}

TraceRow record(const NetworkParams& net, double index, const Dataset& data,
                const Dataset* val) {
  return record(decompose(net, NormMode::matrix), index, data, val);
}

ConstraintResiduals constraint_residuals(const NormalizedNet& net, const Dataset& data) {
  const Vector f = chain_forward_batch(net.v, data.inputs);
  const Vector& y = data.labels;
  const double rho = net.rho;
  const int depth = net.depth();

  ConstraintResiduals out;
  out.aggregate.assign(depth, 0.0);
  out.per_sample_mean.assign(depth, 0.0);

  std::vector<Matrix> aggregate(depth);
  for (int k = 0; k < depth; ++k) aggregate[k] = Matrix::Zero(net.v[k].rows(), net.v[k].cols());

  for (Eigen::Index n = 0; n < data.size(); ++n) {
    const std::vector<Matrix> grads = chain_grad_weighted(net.v, data.inputs.col(n),
                                                          Vector::Ones(1));
    const double prefactor = rho * f(n) - y(n);
    for (int k = 0; k < depth; ++k) {
      const Matrix deviation = grads[k] - net.v[k] * f(n);
      aggregate[k] += prefactor * deviation;
      out.per_sample_mean[k] += deviation.norm() / (1.0 + std::abs(f(n)));
    }
  }
  for (int k = 0; k < depth; ++k) {
    out.aggregate[k] = aggregate[k].norm();
    out.per_sample_mean[k] /= static_cast<double>(data.size());
  }
  return out;
}

std::vector<LayerShapeReport> projection_orthogonality_probe(const NormalizedNet& net) {
  std::vector<LayerShapeReport> reports;
  reports.reserve(net.v.size());
  for (const Matrix& v : net.v) {
    LayerShapeReport r;
    r.partial_isometry_defect = (v * v.transpose() * v - v).norm();
    const Eigen::Index cols = v.cols();
    r.scaled_orthogonality_defect =
        (v.transpose() * v - Matrix::Identity(cols, cols) / static_cast<double>(v.rows()))
            .norm();
    reports.push_back(r);
  }
  return reports;
}

NCReport nc_metrics(const Matrix& features, const Vector& labels, const Matrix& classifier) {
  const Eigen::Index n = features.cols();
  if (labels.size() != n) {
    throw std::invalid_argument("nc_metrics: " + std::to_string(n) + " feature columns but " +
                                std::to_string(labels.size()) + " labels");
  }
  if (classifier.rows() != 1 || classifier.cols() != features.rows()) {
    throw std::invalid_argument("nc_metrics: classifier must be 1 x feature-dim");
  }
  Eigen::Index n_pos = 0, n_neg = 0;
  for (Eigen::Index i = 0; i < n; ++i) (labels(i) > 0.0 ? n_pos : n_neg)++;
  if (n_pos == 0 || n_neg == 0) {
    throw std::invalid_argument("nc_metrics: a class is absent from the labels");
  }

  const Eigen::Index p = features.rows();
  Vector mean_pos = Vector::Zero(p), mean_neg = Vector::Zero(p);
  for (Eigen::Index i = 0; i < n; ++i) {
    (labels(i) > 0.0 ? mean_pos : mean_neg) += features.col(i);
  }
  mean_pos /= static_cast<double>(n_pos);
  mean_neg /= static_cast<double>(n_neg);
  const Vector global_mean = 0.5 * (mean_pos + mean_neg);  // equal class weights

  NCReport report;

  double within = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vector& mean = labels(i) > 0.0 ? mean_pos : mean_neg;
    within += (features.col(i) - mean).squaredNorm();
  }
  within /= static_cast<double>(n);
  const Vector centered_pos = mean_pos - global_mean;
  const Vector centered_neg = mean_neg - global_mean;
  const double between = 0.5 * (centered_pos.squaredNorm() + centered_neg.squaredNorm());
  report.nc1 = within / between;

  // cos via dot/sqrt(dot*dot) so exactly antipodal means give exactly -1.
  const double cos_means = centered_pos.dot(centered_neg) /
                           std::sqrt(centered_pos.squaredNorm() * centered_neg.squaredNorm());
  report.nc2_angle_dev = std::abs(cos_means - (-1.0));
  const double norm_pos = centered_pos.norm(), norm_neg = centered_neg.norm();
  const double norm_mean = 0.5 * (norm_pos + norm_neg);
  report.nc2_norm_dev = std::max(std::abs(norm_pos - norm_mean), std::abs(norm_neg - norm_mean)) /
                        norm_mean;

  const Vector mean_diff = mean_pos - mean_neg;
  const Vector w = classifier.row(0).transpose();
  report.nc3 = 1.0 - w.dot(mean_diff) / std::sqrt(w.squaredNorm() * mean_diff.squaredNorm());

  Eigen::Index disagreements = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double score = (classifier * features.col(i))(0);
    const double network_decision = score > 0.0 ? 1.0 : -1.0;
    const double dist_pos = (features.col(i) - mean_pos).squaredNorm();
    const double dist_neg = (features.col(i) - mean_neg).squaredNorm();
    const double ncc_decision = dist_pos < dist_neg ? 1.0 : -1.0;
    if (network_decision != ncc_decision) ++disagreements;
  }
  report.nc4 = static_cast<double>(disagreements) / static_cast<double>(n);
  return report;
}

double spearman_rank_correlation(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) {
    throw std::invalid_argument("spearman: needs two sequences of equal length >= 2");
  }
  auto ranks = [](const std::vector<double>& xs) {
    const std::size_t n = xs.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return xs[i] < xs[j]; });
    std::vector<double> rank(n);
    std::size_t i = 0;
    while (i < n) {  // ties get the average rank
      std::size_t j = i;
      while (j + 1 < n && xs[order[j + 1]] == xs[order[i]]) ++j;
      const double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
      for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
      i = j + 1;
    }
    return rank;
  };
  const std::vector<double> ra = ranks(a), rb = ranks(b);
  const std::size_t n = a.size();
  double mean = 0.5 * (static_cast<double>(n) + 1.0);
  double cov = 0.0, var_a = 0.0, var_b = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    cov += (ra[i] - mean) * (rb[i] - mean);
    var_a += (ra[i] - mean) * (ra[i] - mean);
    var_b += (rb[i] - mean) * (rb[i] - mean);
  }
  if (var_a == 0.0 || var_b == 0.0) return 0.0;
  return cov / std::sqrt(var_a * var_b);
}

SweepReport sweep_compare(std::vector<SweepRunRecord> runs, double tol_interpolation) {
  SweepReport report;
  std::vector<double> rho_vals, val_errors, lambdas;
  for (SweepRunRecord& run : runs) {
    run.near_interpolating = run.final_max_interp_residual < tol_interpolation;
    if (run.near_interpolating && run.final_rho > 0.0) {
      run.margin_inv_rho_dev = std::abs(run.final_min_margin - 1.0 / run.final_rho);
      report.max_margin_duality_dev =
          std::max(report.max_margin_duality_dev, run.margin_inv_rho_dev);
    }
    if (run.val_error) {
      rho_vals.push_back(run.final_rho);
      val_errors.push_back(*run.val_error);
    }
    lambdas.push_back(run.lambda);
  }
  if (rho_vals.size() >= 2) {
    report.spearman_rho_val_error = spearman_rank_correlation(rho_vals, val_errors);
  }
  const bool lambda_varies =
      runs.size() >= 2 &&
      !std::equal(lambdas.begin() + 1, lambdas.end(), lambdas.begin());
  if (lambda_varies) {
    std::vector<double> all_rho;
    for (const SweepRunRecord& run : runs) all_rho.push_back(run.final_rho);
    report.spearman_lambda_rho = spearman_rank_correlation(lambdas, all_rho);
  }
  report.runs = std::move(runs);
  return report;
}

}  // namespace sqloss
