#pragma once

// Distances, class centroids and the pooled feature variance used as the
// temperature of every distance-based score.

#include "owr/types.hpp"

#include <cstdint>
#include <string>

namespace owr {

template <typename Scalar>
inline constexpr Scalar kVarianceFloor = Scalar(1e-8);

template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar squared_euclidean(const Eigen::MatrixBase<DerivedA>& a,
                                            const Eigen::MatrixBase<DerivedB>& b) {
  if (a.size() != b.size()) {
    throw ShapeError("squared_euclidean: dimension mismatch (" + std::to_string(a.size()) +
                     " vs " + std::to_string(b.size()) + ")");
  }
  // Row and column vectors are both accepted.
  return (a.reshaped() - b.reshaped()).squaredNorm();
}

/// Online estimate of the variance of every feature component seen so far,
/// pooled into one scalar. Batches are merged with the parallel-variance
/// update so the result does not depend on how the stream is partitioned.
template <typename Scalar>
struct RunningVariance {
  std::int64_t count = 0;  // number of pooled components absorbed
  Scalar mean = 0;
  Scalar m2 = 0;  // sum of squared deviations from `mean`

  /// Temperature value. Unit temperature before any data is seen.
  Scalar current() const {
    if (count == 0) return Scalar(1);
    return std::max(m2 / static_cast<Scalar>(count), kVarianceFloor<Scalar>);
  }
};

template <typename DerivedA, typename DerivedB, typename Scalar>
Scalar normalized_distance(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b,
                           const RunningVariance<Scalar>& var) {
  require_finite(a, "normalized_distance");
  require_finite(b, "normalized_distance");
  return squared_euclidean(a, b) / var.current();
}

/// Pooled population variance of all components of `batch`, floored.
template <typename Derived>
typename Derived::Scalar batch_variance(const Eigen::MatrixBase<Derived>& batch) {
  using Scalar = typename Derived::Scalar;
  if (batch.rows() == 0 || batch.size() == 0) throw ShapeError("batch_variance: empty batch");
  require_finite(batch, "batch_variance");
  const Scalar n = static_cast<Scalar>(batch.size());
  const Scalar mean = batch.sum() / n;
  const Scalar var = (batch.array() - mean).square().sum() / n;
  return std::max(var, kVarianceFloor<Scalar>);
}

template <typename Derived>
RunningVariance<typename Derived::Scalar> update_global_variance(
    RunningVariance<typename Derived::Scalar> var, const Eigen::MatrixBase<Derived>& batch) {
  using Scalar = typename Derived::Scalar;
  if (batch.size() == 0) throw ShapeError("update_global_variance: empty batch");
  require_finite(batch, "update_global_variance");
  const auto nb = static_cast<std::int64_t>(batch.size());
  const Scalar mean_b = batch.sum() / static_cast<Scalar>(nb);
  const Scalar m2_b = (batch.array() - mean_b).square().sum();
  if (var.count == 0) return {nb, mean_b, m2_b};
  const Scalar na = static_cast<Scalar>(var.count);
  const Scalar nbs = static_cast<Scalar>(nb);
  const Scalar total = na + nbs;
  const Scalar delta = mean_b - var.mean;
  var.mean += delta * nbs / total;
  var.m2 += m2_b + delta * delta * na * nbs / total;
  var.count += nb;
  return var;
}

/// Per-class running centroid and learned rejection radius.
template <typename Scalar>
struct ClassStats {
  ClassId class_id = 0;
  VectorX<Scalar> centroid;
  std::int64_t count = 0;
  Scalar threshold = 0;  // in normalized squared-distance units

  ClassStats() = default;
  ClassStats(ClassId id, Eigen::Index dim) : class_id(id), centroid(VectorX<Scalar>::Zero(dim)) {}

  bool usable() const { return count > 0; }
};

/// Count-weighted running mean over all rows of `batch`, which must all
/// belong to `stats.class_id`. An empty batch leaves the stats unchanged.
template <typename Scalar, typename Derived>
ClassStats<Scalar> update_centroid(ClassStats<Scalar> stats, const Eigen::MatrixBase<Derived>& batch) {
  if (batch.rows() == 0) return stats;
  if (batch.cols() != stats.centroid.size()) throw ShapeError("update_centroid: dimension mismatch");
  require_finite(batch, "update_centroid");
  const Scalar old_n = static_cast<Scalar>(stats.count);
  const Scalar new_n = old_n + static_cast<Scalar>(batch.rows());
  stats.centroid = (old_n * stats.centroid + batch.colwise().sum().transpose()) / new_n;
  stats.count += batch.rows();
  return stats;
}

}  // namespace owr
