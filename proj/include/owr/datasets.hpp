#pragma once

// Synthetic benchmarks, CSV feature ingestion and class schedules.

#include "owr/types.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace owr {

enum class Split { train, test };

/// Rows of a dataset selected for one purpose. `ids` are row indices into the
/// originating Dataset and identify samples across copies.
struct LabeledData {
  Matrix inputs;
  std::vector<ClassId> labels;
  std::vector<std::int64_t> ids;

  Eigen::Index size() const { return inputs.rows(); }
  bool empty() const { return inputs.rows() == 0; }
  LabeledData subset(std::span<const Eigen::Index> rows) const;
  static LabeledData concat(const LabeledData& a, const LabeledData& b);
};

struct Dataset {
  Matrix inputs;
  std::vector<ClassId> labels;
  std::vector<Split> splits;
  std::vector<ClassId> catalog;  // sorted, unique

  Eigen::Index size() const { return inputs.rows(); }
  int dim() const { return static_cast<int>(inputs.cols()); }

  /// Rows with the given split whose label is in `classes` (all classes when empty).
  LabeledData select(Split split, std::span<const ClassId> classes = {}) const;
  void validate() const;
};

enum class Generator { gaussian_blobs, rings };

struct SyntheticSpec {
  Generator generator = Generator::gaussian_blobs;
  int n_classes = 10;
  int dim = 8;
  int samples_per_class = 100;
  double variance_low = 0.1;
  double variance_high = 0.5;
  double spacing = 10.0;
  double test_fraction = 0.2;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Also returns the per-class variances actually drawn, aligned with the catalog.
struct SyntheticDataset {
  Dataset data;
  std::vector<double> class_variances;
};

SyntheticDataset gen_synthetic(const SyntheticSpec& spec);

struct CsvSchema {
  bool has_header = true;
  int label_column = 0;
  int split_column = -1;  // optional column holding "train"/"test"; all rows train when absent
};

Dataset load_feature_csv(const std::filesystem::path& path, const CsvSchema& schema = {});
void write_feature_csv(const std::filesystem::path& path, const Dataset& data, bool with_split_column = false);

/// Seeded per-class reassignment of TRAIN/TEST tags.
void assign_split(Dataset& data, double test_fraction, std::uint64_t seed);

struct EpisodeSchedule {
  std::vector<std::vector<ClassId>> class_sets;  // C_0 .. C_S
  std::vector<ClassId> unknown_pool;
  std::uint64_t seed = 0;

  int steps() const { return static_cast<int>(class_sets.size()); }
  /// Union of the class sets up to and including step t.
  std::vector<ClassId> known_at(int t) const;
  void validate() const;
};

EpisodeSchedule make_schedule(std::span<const ClassId> catalog, int n_known, int initial_classes, int step_size,
                              std::uint64_t order_seed);

std::string schedule_to_json(const EpisodeSchedule& schedule);
EpisodeSchedule schedule_from_json(const std::string& text);
void save_schedule(const std::filesystem::path& path, const EpisodeSchedule& schedule);
EpisodeSchedule load_schedule(const std::filesystem::path& path);

}  // namespace owr
