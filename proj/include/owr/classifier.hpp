#pragma once

// Nearest-class-mean inference with the rejection rules: learned per-class
// radii, a single NNO radius, and the heuristic radius of the DeepNNO baseline.

#include "owr/losses.hpp"

#include <cmath>
#include <limits>
#include <span>
#include <type_traits>

namespace owr {

template <typename Scalar>
struct Prediction {
  ClassId label = kUnknown;
  VectorX<Scalar> distances;  // aligned with the centroid list; +inf for unusable classes
  bool rejected = true;
};

template <typename Scalar>
using CentroidSpan = std::type_identity_t<std::span<const ClassStats<Scalar>>>;

namespace detail {

// Smallest distance, ties resolved towards the smaller class id.
template <typename Scalar, typename Accept>
Eigen::Index argmin_class(const VectorX<Scalar>& d, std::span<const ClassStats<Scalar>> centroids, Accept accept) {
  Eigen::Index best = -1;
  for (Eigen::Index k = 0; k < d.size(); ++k) {
    if (!centroids[k].usable() || !accept(k)) continue;
    if (best < 0 || d[k] < d[best] || (d[k] == d[best] && centroids[k].class_id < centroids[best].class_id))
      best = k;
  }
  return best;
}

template <typename Derived, typename Scalar>
VectorX<Scalar> squared_distances(const Eigen::MatrixBase<Derived>& features,
                                  std::span<const ClassStats<Scalar>> centroids) {
  VectorX<Scalar> d(static_cast<Eigen::Index>(centroids.size()));
  for (std::size_t k = 0; k < centroids.size(); ++k)
    d[k] = centroids[k].usable() ? squared_euclidean(features, centroids[k].centroid)
                                 : std::numeric_limits<Scalar>::infinity();
  return d;
}

}  // namespace detail

/// Closest centroid; never rejects.
template <typename Derived, typename Scalar = typename Derived::Scalar>
Prediction<Scalar> ncm_predict(const Eigen::MatrixBase<Derived>& features, CentroidSpan<Scalar> centroids) {
  detail::require_usable(centroids);
  Prediction<Scalar> p;
  p.distances = detail::squared_distances(features, centroids);
  const Eigen::Index best = detail::argmin_class(p.distances, centroids, [](Eigen::Index) { return true; });
  p.label = centroids[best].class_id;
  p.rejected = false;
  return p;
}

/// Rejects iff the normalized distance exceeds the radius of every known
/// class. `thresholds` is aligned with `centroids`. With `strict`, the
/// accepted label is the nearest class whose own radius contains the sample;
/// otherwise it is the nearest class overall.
template <typename Derived, typename Scalar = typename Derived::Scalar>
Prediction<Scalar> predict_with_thresholds(const Eigen::MatrixBase<Derived>& features, CentroidSpan<Scalar> centroids,
                                           const RunningVariance<Scalar>& var,
                                           std::type_identity_t<std::span<const Scalar>> thresholds,
                                           bool strict = false) {
  detail::require_usable(centroids);
  if (thresholds.size() != centroids.size()) throw ShapeError("predict: threshold count mismatch");
  Prediction<Scalar> p;
  const Scalar temperature = var.current();
  // Argmin runs on raw distances so it agrees exactly with the NCM rule;
  // scaling by the temperature can merge near-ties.
  const VectorX<Scalar> raw = detail::squared_distances(features, centroids);
  p.distances = raw / temperature;
  bool any_accept = false;
  for (std::size_t k = 0; k < centroids.size(); ++k) {
    if (!centroids[k].usable()) continue;
    if (std::isnan(thresholds[k]) || thresholds[k] < 0)
      throw ShapeError("predict: missing threshold for class " + std::to_string(centroids[k].class_id));
    if (p.distances[k] <= thresholds[k]) any_accept = true;
  }
  if (!any_accept) return p;
  const Eigen::Index best = strict ? detail::argmin_class(raw, centroids,
                                                          [&](Eigen::Index k) { return p.distances[k] <= thresholds[k]; })
                                   : detail::argmin_class(raw, centroids, [](Eigen::Index) { return true; });
  p.label = centroids[best].class_id;
  p.rejected = false;
  return p;
}

/// Class-specific radii taken from each ClassStats::threshold.
template <typename Derived, typename Scalar = typename Derived::Scalar>
Prediction<Scalar> predict_with_rejection(const Eigen::MatrixBase<Derived>& features, CentroidSpan<Scalar> centroids,
                                          const RunningVariance<Scalar>& var, bool strict = false) {
  std::vector<Scalar> thresholds;
  thresholds.reserve(centroids.size());
  for (const auto& c : centroids) thresholds.push_back(c.threshold);
  return predict_with_thresholds(features, centroids, var, std::span<const Scalar>(thresholds), strict);
}

/// Rejects iff every class score z(1 - d/tau) is <= 0, else nearest class.
template <typename Derived, typename Scalar = typename Derived::Scalar>
Prediction<Scalar> nno_predict(const Eigen::MatrixBase<Derived>& features, CentroidSpan<Scalar> centroids, Scalar tau,
                               Scalar z = 1, DistanceKind kind = DistanceKind::euclidean) {
  Prediction<Scalar> p = ncm_predict(features, centroids);
  bool any_positive = false;
  for (const auto& c : centroids)
    if (c.usable() && nno_score(features, c.centroid, tau, z, kind) > 0) any_positive = true;
  if (!any_positive) {
    p.label = kUnknown;
    p.rejected = true;
  }
  return p;
}

enum class Outcome { true_positive, true_negative, false_positive, false_negative };

template <typename Scalar>
struct HeuristicThresholdState {
  Scalar tau = 1;
  Scalar step = Scalar(0.01);
};

inline constexpr double kMinTau = 1e-6;

/// Correct decisions raise tau by one step, wrong ones lower it.
template <typename Scalar>
HeuristicThresholdState<Scalar> deepnno_threshold_update(HeuristicThresholdState<Scalar> state, Outcome outcome) {
  switch (outcome) {
    case Outcome::true_positive:
    case Outcome::true_negative:
      state.tau += state.step;
      break;
    case Outcome::false_positive:
    case Outcome::false_negative:
      state.tau = std::max(Scalar(kMinTau), state.tau - state.step);
      break;
  }
  return state;
}

}  // namespace owr
