#pragma once

#include "mahgcn/common.hpp"

#include <iostream>
#include <vector>

namespace mahgcn {

/// ROI-by-ROI Pearson correlation network at one parcellation scale.
struct Bfn {
  int scale = 0;
  Matrix weights;

  /// Strict invariants hold for freshly built networks; harmonized networks
  /// keep only symmetry, unit diagonal and finiteness.
  void validate(bool strict_range = true) const {
    require(weights.rows() == scale && weights.cols() == scale, "bfn",
            "weights must be scale x scale");
    require(weights.allFinite(), "bfn", "non-finite edge weight");
    for (Index i = 0; i < weights.rows(); ++i) {
      require(std::abs(weights(i, i) - 1.0) < 1e-12, "bfn", "diagonal must be 1");
      for (Index j = 0; j < i; ++j) {
        require(weights(i, j) == weights(j, i), "bfn", "weights must be symmetric");
        if (strict_range)
          require(weights(i, j) >= -1.0 && weights(i, j) <= 1.0, "bfn",
                  "off-diagonal out of [-1,1]");
      }
    }
  }
};

/// Mean of member voxel rows per ROI.
inline Matrix roi_average(const Matrix& voxel_signals,
                          const std::vector<int>& membership) {
  require(static_cast<Index>(membership.size()) == voxel_signals.rows(), "shape",
          "membership length must equal voxel count");
  int n_rois = 0;
  for (int r : membership) n_rois = std::max(n_rois, r + 1);
  Matrix out = Matrix::Zero(n_rois, voxel_signals.cols());
  std::vector<int> counts(static_cast<std::size_t>(n_rois), 0);
  for (Index v = 0; v < voxel_signals.rows(); ++v) {
    int r = membership[static_cast<std::size_t>(v)];
    require(r >= 0, "roi", "negative ROI index");
    out.row(r) += voxel_signals.row(v);
    ++counts[static_cast<std::size_t>(r)];
  }
  for (int r = 0; r < n_rois; ++r) {
    require(counts[static_cast<std::size_t>(r)] > 0, "roi",
            "ROI " + std::to_string(r) + " has no voxels");
    out.row(r) /= static_cast<double>(counts[static_cast<std::size_t>(r)]);
  }
  return out;
}

/// Pearson correlation over all ROI pairs. A zero-variance row correlates 0
/// with everything (diagonal stays 1) and triggers a warning.
inline Bfn build_bfn(const Matrix& roi_series, bool warn_zero_variance = true) {
  Index n = roi_series.rows(), t = roi_series.cols();
  require(t >= 3, "bfn", "need at least 3 timepoints");

  Matrix centered = roi_series.colwise() - roi_series.rowwise().mean();
  Vector norms(n);
  for (Index i = 0; i < n; ++i) norms(i) = centered.row(i).norm();

  Bfn bfn;
  bfn.scale = static_cast<int>(n);
  bfn.weights = Matrix::Zero(n, n);
  for (Index i = 0; i < n; ++i) {
    bfn.weights(i, i) = 1.0;
    if (norms(i) == 0.0) {
      if (warn_zero_variance)
        std::cerr << "warning: zero-variance ROI " << i
                  << ", correlations set to 0\n";
      continue;
    }
    for (Index j = 0; j < i; ++j) {
      if (norms(j) == 0.0) continue;
      double r = centered.row(i).dot(centered.row(j)) / (norms(i) * norms(j));
      r = std::clamp(r, -1.0, 1.0);  // guard rounding
      bfn.weights(i, j) = r;
      bfn.weights(j, i) = r;
    }
  }
  return bfn;
}

}  // namespace mahgcn
