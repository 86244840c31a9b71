#pragma once

#include "sqloss/net.hpp"

#include <cstdint>
#include <string>

namespace sqloss {

enum class SyntheticKind { gaussian_blobs, margin_separable, xor_like };

struct SyntheticSpec {
  int n_samples = 100;  // >= 2
  int raw_dim = 2;      // before the bias coordinate
  SyntheticKind kind = SyntheticKind::gaussian_blobs;
  double gap = 0.1;  // margin_separable: minimum raw-space margin, > 0
  std::uint64_t seed = 0;
  double val_fraction = 0.0;  // in [0, 1)
};

struct GeneratedData {
  Dataset train;
  Dataset val;
  Vector separator;   // raw-space unit separator the generator used (zero for xor_like)
  double raw_margin;  // min_n y_n <separator, raw_n> over all generated raw points
};

/// Samples raw points per kind with balanced labels, appends the bias coordinate
/// (value 1), scales every augmented vector to unit norm, then splits off
/// floor(n * val_fraction) samples by a seeded permutation.
GeneratedData generate(const SyntheticSpec& spec);

/// Rows are "label, feature_1, ..., feature_d". Labels must be -1/+1 or 0/1
/// (0 maps to -1). The bias-append and unit-normalize pipeline is applied.
Dataset load_csv(const std::string& path);

/// Inverse of the load pipeline: writes each sample's raw features (recovered by
/// dividing out the bias coordinate) with its label, in load_csv's format.
void save_csv(const Dataset& data, const std::string& path);

/// JSON checkpoint {mode, rho, layers: [{rows, cols, entries}]}, entries row-major
/// with 17 significant digits so reloading is bit-exact. Row mode adds the
/// per-layer row_norms needed for exact recomposition.
void save_checkpoint(const NormalizedNet& net, const std::string& path);

/// Raw weights are stored through their matrix-mode decomposition.
void save_checkpoint(const NetworkParams& net, const std::string& path);

NormalizedNet load_checkpoint(const std::string& path);

}  // namespace sqloss
