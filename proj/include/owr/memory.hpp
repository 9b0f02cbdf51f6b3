#pragma once

// Fixed-budget exemplar memory: per-class quotas, herding selection, the
// rehearsal / held-out partition and rehearsal batch composition.

#include "owr/backbone.hpp"
#include "owr/datasets.hpp"

#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace owr {

enum class Partition { rehearsal, heldout };

struct Exemplar {
  RowVector input;  // raw input, so features refresh as the extractor changes
  ClassId label = 0;
  std::int64_t id = 0;  // row in the originating dataset
  Partition partition = Partition::rehearsal;
};

struct ExemplarMemory {
  int budget = 2000;
  double heldout_fraction = 0.2;
  // Per class, exemplars in selection order.
  std::map<ClassId, std::vector<Exemplar>> classes;

  std::size_t total() const;
  std::size_t count(ClassId c, Partition p) const;
  /// All exemplars of one partition (every class when `which` is empty).
  LabeledData gather(Partition p, std::span<const ClassId> which = {}) const;
  LabeledData gather_all() const;
};

/// floor(budget / |known|) each, remainder given one by one to the lowest class ids.
std::map<ClassId, int> rebalance(const ExemplarMemory& memory, std::span<const ClassId> known_classes);

/// Truncates every stored class to its quota. Held-out and rehearsal parts
/// each keep their selection-order prefix, so the held-out share stays
/// round(heldout_fraction * stored).
void apply_quotas(ExemplarMemory& memory, const std::map<ClassId, int>& quotas);

/// Greedy mean matching on precomputed features: each pick keeps the running
/// exemplar mean closest to `class_mean`. Returns row indices in pick order.
std::vector<Eigen::Index> herd_select_features(const Matrix& features, const Vector& class_mean, int quota);

std::vector<Eigen::Index> herd_select(const Matrix& class_samples, const Vector& class_feature_mean,
                                      const Extractor& extractor, int quota);

/// Seeded per-class shuffle tagging round(heldout_fraction * n) exemplars as
/// held-out. Returns the classes left without any held-out sample.
std::vector<ClassId> split_train_heldout(ExemplarMemory& memory, std::uint64_t seed);

/// One row of a composed batch records where it came from.
struct BatchSource {
  bool from_memory = false;
  std::int64_t id = 0;
};

struct TrainingBatch {
  Matrix inputs;
  std::vector<ClassId> labels;
  std::vector<BatchSource> sources;
};

/// Number of memory rows in a batch: round(fraction * batch_size), 0 when the
/// rehearsal partition is empty.
int memory_rows(int batch_size, double memory_fraction, bool memory_empty);

/// Single batch: memory rows drawn uniformly from the rehearsal partition,
/// the remainder from the current step's data, rows shuffled.
TrainingBatch compose_batch(const LabeledData& current, const ExemplarMemory& memory, int batch_size,
                            double memory_fraction, std::mt19937_64& rng);

/// One epoch: every current sample appears exactly once, each batch topped up
/// with rehearsal draws.
std::vector<TrainingBatch> compose_epoch(const LabeledData& current, const ExemplarMemory& memory, int batch_size,
                                         double memory_fraction, std::mt19937_64& rng);

}  // namespace owr
