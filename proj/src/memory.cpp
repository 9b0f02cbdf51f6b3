#include "owr/memory.hpp"

#include "owr/metric_stats.hpp"
#include "owr/rng.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

namespace owr {

std::size_t ExemplarMemory::total() const {
  std::size_t n = 0;
  for (const auto& [c, v] : classes) n += v.size();
  return n;
}

std::size_t ExemplarMemory::count(ClassId c, Partition p) const {
  auto it = classes.find(c);
  if (it == classes.end()) return 0;
  return static_cast<std::size_t>(
      std::count_if(it->second.begin(), it->second.end(), [&](const Exemplar& e) { return e.partition == p; }));
}

namespace {

template <typename Pred>
LabeledData gather_if(const ExemplarMemory& memory, Pred pred) {
  std::vector<const Exemplar*> picked;
  for (const auto& [c, v] : memory.classes)
    for (const auto& e : v)
      if (pred(e)) picked.push_back(&e);
  LabeledData out;
  const Eigen::Index dim = picked.empty() ? 0 : picked.front()->input.size();
  out.inputs.resize(static_cast<Eigen::Index>(picked.size()), dim);
  for (std::size_t i = 0; i < picked.size(); ++i) {
    out.inputs.row(static_cast<Eigen::Index>(i)) = picked[i]->input;
    out.labels.push_back(picked[i]->label);
    out.ids.push_back(picked[i]->id);
  }
  return out;
}

}  // namespace

LabeledData ExemplarMemory::gather(Partition p, std::span<const ClassId> which) const {
  return gather_if(*this, [&](const Exemplar& e) {
    return e.partition == p && (which.empty() || std::find(which.begin(), which.end(), e.label) != which.end());
  });
}

LabeledData ExemplarMemory::gather_all() const {
  return gather_if(*this, [](const Exemplar&) { return true; });
}

std::map<ClassId, int> rebalance(const ExemplarMemory& memory, std::span<const ClassId> known_classes) {
  if (known_classes.empty()) throw ConfigError("rebalance: no known classes");
  std::vector<ClassId> sorted(known_classes.begin(), known_classes.end());
  std::sort(sorted.begin(), sorted.end());
  const int k = static_cast<int>(sorted.size());
  const int base = memory.budget / k;
  const int surplus = memory.budget % k;
  std::map<ClassId, int> quotas;
  for (int i = 0; i < k; ++i) quotas[sorted[i]] = base + (i < surplus ? 1 : 0);
  return quotas;
}

void apply_quotas(ExemplarMemory& memory, const std::map<ClassId, int>& quotas) {
  for (auto it = memory.classes.begin(); it != memory.classes.end();) {
    auto q = quotas.find(it->first);
    if (q == quotas.end() || q->second <= 0) {
      it = memory.classes.erase(it);
      continue;
    }
    auto& stored = it->second;
    const auto quota = static_cast<std::size_t>(q->second);
    if (stored.size() > quota) {
      const std::size_t held_available = static_cast<std::size_t>(
          std::count_if(stored.begin(), stored.end(), [](const Exemplar& e) { return e.partition == Partition::heldout; }));
      const std::size_t held_keep =
          std::min(held_available, static_cast<std::size_t>(round_half_up(memory.heldout_fraction * quota)));
      const std::size_t rehearsal_keep = quota - held_keep;
      std::vector<Exemplar> kept;
      std::size_t held = 0, rehearsal = 0;
      for (auto& e : stored) {
        if (e.partition == Partition::heldout && held < held_keep) {
          ++held;
          kept.push_back(std::move(e));
        } else if (e.partition == Partition::rehearsal && rehearsal < rehearsal_keep) {
          ++rehearsal;
          kept.push_back(std::move(e));
        }
      }
      stored = std::move(kept);
    }
    ++it;
  }
}

std::vector<Eigen::Index> herd_select_features(const Matrix& features, const Vector& class_mean, int quota) {
  const Eigen::Index n = features.rows();
  std::vector<Eigen::Index> picked;
  if (n == 0 || quota <= 0) return picked;
  if (features.cols() != class_mean.size()) throw ShapeError("herd_select: feature dimension mismatch");
  const Eigen::Index take = std::min<Eigen::Index>(quota, n);
  std::vector<bool> used(static_cast<std::size_t>(n), false);
  RowVector running = RowVector::Zero(features.cols());
  for (Eigen::Index k = 1; k <= take; ++k) {
    Eigen::Index best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < n; ++i) {
      if (used[i]) continue;
      const double d = squared_euclidean(class_mean, (running + features.row(i)) / static_cast<double>(k));
      if (d < best_d) {
        best_d = d;
        best = i;
      }
    }
    used[best] = true;
    running += features.row(best);
    picked.push_back(best);
  }
  return picked;
}

std::vector<Eigen::Index> herd_select(const Matrix& class_samples, const Vector& class_feature_mean,
                                      const Extractor& extractor, int quota) {
  if (class_samples.rows() == 0) return {};
  return herd_select_features(extractor.features(class_samples), class_feature_mean, quota);
}

std::vector<ClassId> split_train_heldout(ExemplarMemory& memory, std::uint64_t seed) {
  std::vector<ClassId> without_heldout;
  for (auto& [c, stored] : memory.classes) {
    std::vector<std::size_t> order(stored.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(derive_seed(seed, {static_cast<std::uint64_t>(c), 0x4e1d}));
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_held =
        static_cast<std::size_t>(round_half_up(memory.heldout_fraction * static_cast<double>(stored.size())));
    for (auto& e : stored) e.partition = Partition::rehearsal;
    for (std::size_t i = 0; i < n_held; ++i) stored[order[i]].partition = Partition::heldout;
    if (n_held == 0) without_heldout.push_back(c);
  }
  return without_heldout;
}

int memory_rows(int batch_size, double memory_fraction, bool memory_empty) {
  if (batch_size < 1) throw ConfigError("batch size must be at least 1");
  if (!(memory_fraction >= 0 && memory_fraction < 1)) throw ConfigError("memory fraction must be in [0,1)");
  if (memory_empty) return 0;
  return static_cast<int>(round_half_up(memory_fraction * batch_size));
}

namespace {

// Uniform draws from the rehearsal rows without replacement, reshuffling
// whenever the pool is exhausted.
class RehearsalSampler {
 public:
  explicit RehearsalSampler(const ExemplarMemory& memory) {
    for (const auto& [c, v] : memory.classes)
      for (const auto& e : v)
        if (e.partition == Partition::rehearsal) pool_.push_back(&e);
  }
  bool empty() const { return pool_.empty(); }
  const Exemplar& next(std::mt19937_64& rng) {
    if (cursor_ == 0) std::shuffle(pool_.begin(), pool_.end(), rng);
    const Exemplar& e = *pool_[cursor_];
    cursor_ = (cursor_ + 1) % pool_.size();
    return e;
  }

 private:
  std::vector<const Exemplar*> pool_;
  std::size_t cursor_ = 0;
};

TrainingBatch assemble(const LabeledData& current, std::span<const Eigen::Index> current_rows,
                       RehearsalSampler& sampler, int n_memory, std::mt19937_64& rng) {
  struct Row {
    RowVector x;
    ClassId label;
    BatchSource src;
  };
  std::vector<Row> rows;
  for (Eigen::Index r : current_rows) rows.push_back({current.inputs.row(r), current.labels[r], {false, current.ids[r]}});
  for (int i = 0; i < n_memory; ++i) {
    const Exemplar& e = sampler.next(rng);
    rows.push_back({e.input, e.label, {true, e.id}});
  }
  std::shuffle(rows.begin(), rows.end(), rng);
  TrainingBatch b;
  const Eigen::Index dim = current.inputs.cols();
  b.inputs.resize(static_cast<Eigen::Index>(rows.size()), dim);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    b.inputs.row(static_cast<Eigen::Index>(i)) = rows[i].x;
    b.labels.push_back(rows[i].label);
    b.sources.push_back(rows[i].src);
  }
  return b;
}

}  // namespace

TrainingBatch compose_batch(const LabeledData& current, const ExemplarMemory& memory, int batch_size,
                            double memory_fraction, std::mt19937_64& rng) {
  RehearsalSampler sampler(memory);
  const int n_memory = memory_rows(batch_size, memory_fraction, sampler.empty());
  const int n_current = std::min<int>(batch_size - n_memory, static_cast<int>(current.size()));
  std::vector<Eigen::Index> rows(static_cast<std::size_t>(current.size()));
  std::iota(rows.begin(), rows.end(), Eigen::Index{0});
  std::shuffle(rows.begin(), rows.end(), rng);
  rows.resize(static_cast<std::size_t>(n_current));
  return assemble(current, rows, sampler, n_memory, rng);
}

std::vector<TrainingBatch> compose_epoch(const LabeledData& current, const ExemplarMemory& memory, int batch_size,
                                         double memory_fraction, std::mt19937_64& rng) {
  RehearsalSampler sampler(memory);
  const int n_memory = memory_rows(batch_size, memory_fraction, sampler.empty());
  const int n_current = std::max(1, batch_size - n_memory);
  std::vector<Eigen::Index> rows(static_cast<std::size_t>(current.size()));
  std::iota(rows.begin(), rows.end(), Eigen::Index{0});
  std::shuffle(rows.begin(), rows.end(), rng);
  std::vector<TrainingBatch> batches;
  for (std::size_t start = 0; start < rows.size(); start += static_cast<std::size_t>(n_current)) {
    const std::size_t len = std::min(rows.size() - start, static_cast<std::size_t>(n_current));
    batches.push_back(assemble(current, std::span(rows).subspan(start, len), sampler, n_memory, rng));
  }
  return batches;
}

}  // namespace owr
