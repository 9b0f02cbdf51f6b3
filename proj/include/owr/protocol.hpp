#pragma once

// Open-world lifecycle: initial and incremental steps, each made of feature
// training with online statistics followed by rejection-radius learning.

#include "owr/backbone.hpp"
#include "owr/classifier.hpp"
#include "owr/datasets.hpp"
#include "owr/losses.hpp"
#include "owr/memory.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace owr {

enum class Method { ours, nno, deepnno };
enum class ThresholdMode { class_specific, global };
// Where radii are fitted: unseen held-out memory (two-stage) or the samples
// the extractor was trained on (single-stage).
enum class ThresholdSource { heldout, training };
enum class SelectionRule { herding, random };

std::string to_string(Method m);
Method method_from_string(const std::string& s);

struct TrainConfig {
  int epochs_initial = 12;
  int epochs_incremental = 4;
  double learning_rate = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-3;
  int batch_size = 128;
  LossWeights weights;
  double grad_clip = 5.0;  // joint gradient norm bound, 0 disables
  // Weight kept by centroid and variance statistics at the start of every
  // feature-training epoch; 1 accumulates over the whole history.
  double stats_decay = 0.1;
  double threshold_lr = 0.01;
  int threshold_epochs = 50;
  std::uint64_t seed = 0;

  int memory_budget = 2000;
  double memory_fraction = 0.4;
  double heldout_fraction = 0.2;
  SelectionRule selection = SelectionRule::herding;
  // Held-out exemplars of new classes are drawn before feature training so
  // they are never trained on. When false, memory is split after training.
  bool reserve_heldout = true;
  ThresholdMode threshold_mode = ThresholdMode::class_specific;
  ThresholdSource threshold_source = ThresholdSource::heldout;
  bool strict_accept = false;
  double heldout_jitter = 0.0;  // std of Gaussian feature jitter on held-out features

  double nno_z = 1.0;
  DistanceKind nno_distance = DistanceKind::euclidean;
  double nno_tau_quantile = 0.95;
  double deepnno_initial_tau = 1.0;
  double deepnno_step_fraction = 0.01;

  void validate() const;
};

/// Everything needed to classify: extractor, per-class statistics, the
/// global variance and the method's rejection parameters.
struct OwrModel {
  Method method = Method::ours;
  Extractor extractor;
  std::vector<ClassStats<double>> classes;  // sorted by class id
  RunningVariance<double> variance;
  ExemplarMemory memory;
  int step = -1;
  bool strict_accept = false;
  HeuristicThresholdState<double> tau;  // single radius of the NNO-style methods
  double nno_z = 1.0;
  DistanceKind nno_distance = DistanceKind::euclidean;

  std::vector<ClassId> known_classes() const;
  ClassStats<double>& stats(ClassId c);
  const ClassStats<double>& stats(ClassId c) const;
  Matrix features(const Matrix& inputs) const { return extractor.features(inputs); }

  Prediction<double> classify_closed(const RowVector& features) const;
  Prediction<double> classify(const RowVector& features) const;
};

OwrModel make_model(Method method, const ExtractorConfig& extractor, const TrainConfig& config);

struct LogRecord {
  int step = 0;
  int epoch = 0;
  int batch = 0;
  double loss = 0;
  double global = 0;
  double local = 0;
  double distill = 0;
  double temperature = 0;
  double global_variance = 0;
  int skipped_anchors = 0;
  double tau = 0;
};

struct StepReport {
  std::vector<LogRecord> log;
  LabeledData stage1_data;  // current-step rows used for feature training
  LabeledData rehearsal;    // memory rows available for rehearsal during the step
  FrozenExtractor<double> previous;
  std::vector<ClassId> heldout_fallback;  // classes whose radii used rehearsal samples
};

/// Feature training for one epoch over `current` plus rehearsal memory.
std::vector<LogRecord> stage1_train_epoch(OwrModel& model, const LabeledData& current,
                                          const FrozenExtractor<double>* previous, const TrainConfig& config,
                                          OptimizerState<double>& optimizer, int epoch);

struct ThresholdFit {
  Vector thresholds;  // aligned with model.classes
  std::vector<ClassId> fallback_classes;
};

/// Subgradient descent on the radius hinge loss. `distances` is n x K
/// (normalized), `label_index` the own-class column of each row. In global
/// mode all radii are tied to a single value.
Vector learn_thresholds(const Matrix& distances, std::span<const Eigen::Index> label_index, Vector initial,
                        ThresholdMode mode, double learning_rate, int epochs, std::uint64_t seed);

/// Mean own-class distance per class; classes without rows get the overall
/// mean. In global mode every entry is the overall mean.
Vector initial_thresholds(const Matrix& distances, std::span<const Eigen::Index> label_index, ThresholdMode mode);

/// Normalized distance of each sample to every class centroid of the model.
Matrix normalized_distances(const OwrModel& model, const Matrix& features);

/// Fits radii on `samples` with the extractor, centroids and variance frozen,
/// and writes them into the model's class statistics.
ThresholdFit stage2_learn_thresholds(OwrModel& model, const LabeledData& samples, const TrainConfig& config);

/// Heuristic DeepNNO radius fitted on fixed features: for each sample the own
/// class and the nearest other class yield one decision each.
HeuristicThresholdState<double> fit_heuristic_tau(const OwrModel& model, const Matrix& features,
                                                  std::span<const ClassId> labels, HeuristicThresholdState<double> state,
                                                  int epochs, std::uint64_t seed);

/// Samples for radius learning after a step: held-out memory (classes without
/// held-out samples fall back to their rehearsal exemplars, listed in
/// `fallback`) or the data the extractor was trained on during the step.
LabeledData threshold_samples(const OwrModel& model, const StepReport& report, ThresholdSource source,
                              std::vector<ClassId>* fallback = nullptr);

StepReport run_incremental_step(OwrModel& model, const EpisodeSchedule& schedule, int t, const LabeledData& train_t,
                                const TrainConfig& config);

/// FNV-1a over the raw parameter bytes, layer by layer.
std::uint64_t parameter_checksum(const Extractor& extractor);

}  // namespace owr
