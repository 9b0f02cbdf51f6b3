#pragma once

// Training objectives with analytic gradients wrt the features. Centroids and
// temperatures are constants for differentiation.

#include "owr/metric_stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

namespace owr {

template <typename Scalar>
struct LossOutput {
  Scalar value = 0;
  MatrixX<Scalar> feature_grads;                  // same shape as the features argument
  std::optional<VectorX<Scalar>> threshold_grads;  // md_loss only
};

struct LossWeights {
  double global = 1.0;  // weight of the centroid term; 0 gives the local-only ablation
  double lambda = 1.0;  // local clustering
  double gamma = 1.0;   // distillation
};

enum class DistanceKind { euclidean, squared };

namespace detail {

template <typename Scalar>
Eigen::Index find_class(std::span<const ClassStats<Scalar>> centroids, ClassId label) {
  for (std::size_t k = 0; k < centroids.size(); ++k)
    if (centroids[k].class_id == label && centroids[k].usable()) return static_cast<Eigen::Index>(k);
  throw ShapeError("label " + std::to_string(label) + " has no usable centroid");
}

template <typename Scalar>
void require_usable(std::span<const ClassStats<Scalar>> centroids) {
  for (const auto& c : centroids)
    if (c.usable()) return;
  throw ShapeError("no usable centroids");
}

template <typename Scalar>
Scalar log_sum_exp(const std::vector<Scalar>& logits) {
  Scalar m = -std::numeric_limits<Scalar>::infinity();
  for (Scalar l : logits) m = std::max(m, l);
  if (!std::isfinite(m)) return m;
  Scalar s = 0;
  for (Scalar l : logits) s += std::exp(l - m);
  return m + std::log(s);
}

}  // namespace detail

/// Softmax over -d_k/T for every usable centroid. Entries for unusable
/// centroids are 0; the vector is aligned with `centroids`.
template <typename Derived, typename Scalar>
VectorX<Scalar> class_scores(const Eigen::MatrixBase<Derived>& features,
                             std::type_identity_t<std::span<const ClassStats<Scalar>>> centroids, Scalar temperature) {
  if (!(temperature > 0)) throw ShapeError("class_scores: temperature must be positive");
  detail::require_usable(centroids);
  const auto k = static_cast<Eigen::Index>(centroids.size());
  VectorX<Scalar> logits = VectorX<Scalar>::Constant(k, -std::numeric_limits<Scalar>::infinity());
  for (Eigen::Index i = 0; i < k; ++i)
    if (centroids[i].usable()) logits[i] = -squared_euclidean(features, centroids[i].centroid) / temperature;
  const Scalar m = logits.maxCoeff();
  VectorX<Scalar> p = (logits.array() - m).exp().matrix();
  return p / p.sum();
}

/// Softmax cross-entropy of the label against all known-class centroids.
template <typename Derived, typename Scalar>
LossOutput<Scalar> gc_loss(const Eigen::MatrixBase<Derived>& features, ClassId label,
                           std::type_identity_t<std::span<const ClassStats<Scalar>>> centroids,
                           Scalar temperature) {
  if (!(temperature > 0)) throw ShapeError("gc_loss: temperature must be positive");
  const Eigen::Index y = detail::find_class(centroids, label);
  const VectorX<Scalar> f = features.reshaped();
  std::vector<Scalar> logits;
  std::vector<Eigen::Index> used;
  for (std::size_t i = 0; i < centroids.size(); ++i) {
    if (!centroids[i].usable()) continue;
    logits.push_back(-squared_euclidean(f, centroids[i].centroid) / temperature);
    used.push_back(static_cast<Eigen::Index>(i));
  }
  const Scalar lse = detail::log_sum_exp(logits);
  LossOutput<Scalar> out;
  VectorX<Scalar> expected_mu = VectorX<Scalar>::Zero(f.size());
  Scalar label_logit = 0;
  for (std::size_t j = 0; j < used.size(); ++j) {
    const Scalar p = std::exp(logits[j] - lse);
    expected_mu += p * centroids[used[j]].centroid;
    if (used[j] == y) label_logit = logits[j];
  }
  out.value = std::max(Scalar(0), lse - label_logit);
  out.feature_grads = (Scalar(2) / temperature) * (expected_mu - centroids[y].centroid);
  out.feature_grads.resize(features.rows(), features.cols());
  return out;
}

template <typename Scalar>
struct LocalLossOutput : LossOutput<Scalar> {
  bool skipped = false;  // anchor had no same-class peer in the batch
};

/// Soft nearest neighbour loss for one anchor of the batch. Gradients flow to
/// the anchor and to every other batch member.
template <typename Derived, typename Scalar = typename Derived::Scalar>
LocalLossOutput<Scalar> lc_loss(const Eigen::MatrixBase<Derived>& batch, std::span<const ClassId> labels,
                                Eigen::Index anchor, Scalar temperature) {
  const Eigen::Index n = batch.rows();
  if (n < 2) throw ShapeError("lc_loss: batch needs at least two samples");
  if (static_cast<Eigen::Index>(labels.size()) != n) throw ShapeError("lc_loss: label count mismatch");
  if (anchor < 0 || anchor >= n) throw ShapeError("lc_loss: anchor out of range");
  if (!(temperature > 0)) throw ShapeError("lc_loss: temperature must be positive");

  LocalLossOutput<Scalar> out;
  out.feature_grads = MatrixX<Scalar>::Zero(n, batch.cols());
  const ClassId c = labels[anchor];

  std::vector<Scalar> logits(n, -std::numeric_limits<Scalar>::infinity());
  Scalar m_all = -std::numeric_limits<Scalar>::infinity();
  Scalar m_same = m_all;
  Eigen::Index peers = 0;
  for (Eigen::Index j = 0; j < n; ++j) {
    if (j == anchor) continue;
    logits[j] = -(batch.row(anchor) - batch.row(j)).squaredNorm() / temperature;
    m_all = std::max(m_all, logits[j]);
    if (labels[j] == c) {
      m_same = std::max(m_same, logits[j]);
      ++peers;
    }
  }
  if (peers == 0) {
    out.skipped = true;
    return out;
  }
  Scalar z_all = 0, z_same = 0;
  for (Eigen::Index j = 0; j < n; ++j) {
    if (j == anchor) continue;
    z_all += std::exp(logits[j] - m_all);
    if (labels[j] == c) z_same += std::exp(logits[j] - m_same);
  }
  const Scalar log_all = m_all + std::log(z_all);
  const Scalar log_same = m_same + std::log(z_same);
  out.value = peers == n - 1 ? Scalar(0) : std::max(Scalar(0), log_all - log_same);

  // dL/dd_j = (q_j [same class] - p_j) / T, d_j = |f_a - f_j|^2.
  for (Eigen::Index j = 0; j < n; ++j) {
    if (j == anchor) continue;
    Scalar g = -std::exp(logits[j] - log_all);
    if (labels[j] == c) g += std::exp(logits[j] - log_same);
    g /= temperature;
    const RowVectorX<Scalar> diff = Scalar(2) * g * (batch.row(anchor) - batch.row(j));
    out.feature_grads.row(anchor) += diff;
    out.feature_grads.row(j) -= diff;
  }
  return out;
}

inline constexpr double kNormGuard = 1e-12;

/// Euclidean (not squared) drift from the previous extractor's features.
template <typename DerivedA, typename DerivedB>
LossOutput<typename DerivedA::Scalar> ds_loss(const Eigen::MatrixBase<DerivedA>& features,
                                              const Eigen::MatrixBase<DerivedB>& old_features) {
  using Scalar = typename DerivedA::Scalar;
  if (features.size() != old_features.size()) throw ShapeError("ds_loss: dimension mismatch");
  LossOutput<Scalar> out;
  MatrixX<Scalar> diff = features - old_features.reshaped(features.rows(), features.cols());
  out.value = diff.norm();
  if (out.value < Scalar(kNormGuard))
    out.feature_grads = MatrixX<Scalar>::Zero(features.rows(), features.cols());
  else
    out.feature_grads = diff / out.value;
  return out;
}

template <typename Scalar>
struct TotalLossOutput : LossOutput<Scalar> {
  // Batch means of the unweighted components.
  Scalar global = 0;
  Scalar local = 0;
  Scalar distill = 0;
  int skipped_anchors = 0;
};

/// Mean over the batch of global*l_gc + lambda*l_lc + gamma*l_ds. The
/// distillation term is present only when `old_features` is given.
template <typename Derived, typename Scalar = typename Derived::Scalar>
TotalLossOutput<Scalar> total_loss(const Eigen::MatrixBase<Derived>& batch, std::span<const ClassId> labels,
                                   std::type_identity_t<std::span<const ClassStats<Scalar>>> centroids,
                                   Scalar temperature,
                                   const std::type_identity_t<MatrixX<Scalar>>* old_features,
                                   const LossWeights& weights) {
  const Eigen::Index n = batch.rows();
  if (n == 0) throw ShapeError("total_loss: empty batch");
  if (static_cast<Eigen::Index>(labels.size()) != n) throw ShapeError("total_loss: label count mismatch");
  if (old_features && (old_features->rows() != n || old_features->cols() != batch.cols()))
    throw ShapeError("total_loss: previous-extractor features shape mismatch");

  TotalLossOutput<Scalar> out;
  out.feature_grads = MatrixX<Scalar>::Zero(n, batch.cols());
  const Scalar inv_n = Scalar(1) / static_cast<Scalar>(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (weights.global != 0) {
      auto gc = gc_loss(batch.row(i), labels[i], centroids, temperature);
      out.global += gc.value * inv_n;
      out.feature_grads.row(i) += Scalar(weights.global) * gc.feature_grads;
    }
    if (weights.lambda != 0 && n >= 2) {
      auto lc = lc_loss(batch, labels, i, temperature);
      if (lc.skipped) ++out.skipped_anchors;
      out.local += lc.value * inv_n;
      out.feature_grads += Scalar(weights.lambda) * lc.feature_grads;
    }
    if (old_features && weights.gamma != 0) {
      auto ds = ds_loss(batch.row(i), old_features->row(i));
      out.distill += ds.value * inv_n;
      out.feature_grads.row(i) += Scalar(weights.gamma) * ds.feature_grads;
    }
  }
  out.feature_grads *= inv_n;
  out.value = Scalar(weights.global) * out.global + Scalar(weights.lambda) * out.local +
              Scalar(weights.gamma) * out.distill;
  if (!std::isfinite(out.value)) throw NumericError("total_loss: non-finite loss value");
  return out;
}

/// Hinge loss on the rejection radii for one sample. `distances` and
/// `thresholds` are aligned per known class; `label_index` selects the
/// sample's own class. In-class: max(0, d - delta); other classes:
/// max(0, delta - d). Subgradients are taken wrt the thresholds.
template <typename Scalar>
LossOutput<Scalar> md_loss(const VectorX<Scalar>& distances, Eigen::Index label_index,
                           const VectorX<Scalar>& thresholds) {
  if (distances.size() != thresholds.size()) throw ShapeError("md_loss: size mismatch");
  if (label_index < 0 || label_index >= distances.size()) throw ShapeError("md_loss: label out of range");
  if ((thresholds.array() < Scalar(0)).any()) throw ShapeError("md_loss: negative threshold");
  LossOutput<Scalar> out;
  VectorX<Scalar> grads = VectorX<Scalar>::Zero(distances.size());
  for (Eigen::Index k = 0; k < distances.size(); ++k) {
    if (k == label_index) {
      const Scalar h = distances[k] - thresholds[k];
      if (h > 0) {
        out.value += h;
        grads[k] = Scalar(-1);
      }
    } else {
      const Scalar h = thresholds[k] - distances[k];
      if (h > 0) {
        out.value += h;
        grads[k] = Scalar(1);
      }
    }
  }
  out.threshold_grads = std::move(grads);
  return out;
}

/// Linear score z * (1 - d/tau); non-positive means outside the class radius.
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar nno_score(const Eigen::MatrixBase<DerivedA>& features,
                                    const Eigen::MatrixBase<DerivedB>& centroid, typename DerivedA::Scalar tau,
                                    typename DerivedA::Scalar z = 1, DistanceKind kind = DistanceKind::euclidean) {
  if (!(tau > 0)) throw ShapeError("nno_score: tau must be positive");
  auto d = squared_euclidean(features, centroid);
  if (kind == DistanceKind::euclidean) d = std::sqrt(d);
  return z * (1 - d / tau);
}

template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar deepnno_score(const Eigen::MatrixBase<DerivedA>& features,
                                        const Eigen::MatrixBase<DerivedB>& centroid) {
  return std::exp(-0.5 * squared_euclidean(features, centroid));
}

inline constexpr double kScoreClamp = 1e-7;

/// One-vs-rest binary cross-entropy on exp(-|f - mu|^2 / 2) scores. The
/// own-class term is taken in the log domain (-log s = |f - mu|^2 / 2) so a
/// sample far from its centroid still gets pulled in; only the other-class
/// terms are clamped.
template <typename Derived, typename Scalar = typename Derived::Scalar>
LossOutput<Scalar> deepnno_bce(const Eigen::MatrixBase<Derived>& features, ClassId label,
                               std::type_identity_t<std::span<const ClassStats<Scalar>>> centroids) {
  detail::require_usable(centroids);
  const VectorX<Scalar> f = features.reshaped();
  VectorX<Scalar> grad = VectorX<Scalar>::Zero(f.size());
  LossOutput<Scalar> out;
  const Scalar lo = Scalar(kScoreClamp), hi = Scalar(1 - kScoreClamp);
  for (const auto& c : centroids) {
    if (!c.usable()) continue;
    const VectorX<Scalar> diff = f - c.centroid;
    const Scalar s_raw = std::exp(Scalar(-0.5) * diff.squaredNorm());
    const Scalar s = std::clamp(s_raw, lo, hi);
    const bool inside = s_raw > lo && s_raw < hi;
    if (c.class_id == label) {
      out.value += Scalar(0.5) * diff.squaredNorm();
      grad += diff;
    } else {
      out.value -= std::log(1 - s);
      if (inside) grad -= (s / (1 - s)) * diff;
    }
  }
  out.feature_grads = grad;
  out.feature_grads.resize(features.rows(), features.cols());
  return out;
}

/// Batch mean of deepnno_bce plus gamma times the distillation term.
template <typename Derived, typename Scalar = typename Derived::Scalar>
TotalLossOutput<Scalar> deepnno_total_loss(const Eigen::MatrixBase<Derived>& batch, std::span<const ClassId> labels,
                                           std::type_identity_t<std::span<const ClassStats<Scalar>>> centroids,
                                           const std::type_identity_t<MatrixX<Scalar>>* old_features,
                                           std::type_identity_t<Scalar> gamma) {
  const Eigen::Index n = batch.rows();
  if (n == 0 || static_cast<Eigen::Index>(labels.size()) != n) throw ShapeError("deepnno_total_loss: bad batch");
  TotalLossOutput<Scalar> out;
  out.feature_grads = MatrixX<Scalar>::Zero(n, batch.cols());
  const Scalar inv_n = Scalar(1) / static_cast<Scalar>(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    auto bce = deepnno_bce(batch.row(i), labels[i], centroids);
    out.global += bce.value * inv_n;
    out.feature_grads.row(i) += bce.feature_grads;
    if (old_features && gamma != 0) {
      auto ds = ds_loss(batch.row(i), old_features->row(i));
      out.distill += ds.value * inv_n;
      out.feature_grads.row(i) += gamma * ds.feature_grads;
    }
  }
  out.feature_grads *= inv_n;
  out.value = out.global + gamma * out.distill;
  if (!std::isfinite(out.value)) throw NumericError("deepnno_total_loss: non-finite loss value");
  return out;
}

}  // namespace owr
