#pragma once

// Experiment configuration and the drivers behind the command line: full
// runs over class orders and repetitions, ablations and method comparison.

#include "owr/evaluation.hpp"
#include "owr/protocol.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace owr {

struct DatasetSource {
  enum class Kind { synthetic, csv };
  Kind kind = Kind::synthetic;
  SyntheticSpec synthetic;
  std::string csv_path;
  CsvSchema csv_schema;
  double csv_test_fraction = 0.2;  // used when the file has no split column
  std::uint64_t csv_split_seed = 0;
};

struct ScheduleSpec {
  int n_known = 6;
  int initial = 2;
  int step = 2;
  std::vector<std::uint64_t> order_seeds{0};
  int runs = 1;
};

struct ExperimentConfig {
  DatasetSource dataset;
  ScheduleSpec schedule;
  Method method = Method::ours;
  std::vector<int> layer_dims{32, 16};
  Activation activation = Activation::relu;
  TrainConfig training;
  std::string output_dir;  // empty: $OWR_OUTPUT_ROOT, else "owr_runs"
  int workers = 1;

  void validate() const;
};

ExperimentConfig default_experiment_config();

/// Full configuration, output placement included.
std::string config_to_json(const ExperimentConfig& config);
/// Everything needed to replay the numbers; output placement is left out so
/// artifacts do not depend on where they were written.
std::string replay_config_json(const ExperimentConfig& config);
/// Rejects unknown keys and reports offending fields by path.
ExperimentConfig config_from_json(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

std::filesystem::path resolve_output_dir(const ExperimentConfig& config);

Dataset load_dataset(const DatasetSource& source);

struct RunSeeds {
  std::uint64_t order_seed = 0;
  int run = 0;
  std::uint64_t train_seed = 0;
  std::uint64_t init_seed = 0;
};

RunSeeds make_run_seeds(const ExperimentConfig& config, std::uint64_t order_seed, int run);

struct StepOutcome {
  MetricsReport report;
  std::optional<double> median_drift;  // old-class memory samples, previous vs current extractor
  std::uint64_t checksum = 0;
};

struct ExperimentResult {
  RunSeeds seeds;
  EpisodeSchedule schedule;
  std::vector<StepOutcome> steps;
  MetricsReport average;
  std::vector<LogRecord> log;
  std::vector<std::string> checkpoints;  // serialized model after each step
  OwrModel model;
};

/// Called after every step with the trained model and the step's report.
using StepHook = std::function<void(const OwrModel&, const StepReport&, int)>;

ExperimentResult run_experiment(const ExperimentConfig& config, const Dataset& data, std::uint64_t order_seed, int run,
                                const StepHook& hook = {});

struct SuiteResult {
  std::vector<ExperimentResult> experiments;  // orders outer, runs inner
  std::vector<MetricsReport> per_step;        // mean over experiments
  MetricsReport average;
};

/// Runs every (order seed, run) pair, optionally on several threads; the
/// result does not depend on the worker count.
SuiteResult run_suite(const ExperimentConfig& config, const Dataset& data);

/// Writes the per-experiment directories and the summary files.
void write_suite(const std::filesystem::path& dir, const ExperimentConfig& config, const SuiteResult& suite);

std::string report_json(const MetricsReport& report);
std::string reports_table(std::span<const MetricsReport> reports, const MetricsReport* average);

struct LossAblationRow {
  std::string name;
  LossWeights weights;
  std::vector<double> owr_per_step;  // mean over experiments
  double owr_h_average = 0;
  std::vector<double> owr_per_experiment;  // mean over steps, one per experiment
};

std::vector<LossAblationRow> ablate_losses(const ExperimentConfig& config, const Dataset& data);

struct RejectionAblationRow {
  std::string name;
  double known_rejection_rate = 0;  // means over experiments of per-experiment step averages
  double open_set_acc = 0;
  double diff = 0;
  std::vector<double> diff_per_experiment;
  std::vector<std::uint64_t> checksums;  // extractor used at each step of each experiment
};

/// Four rejection strategies evaluated on the extractor trained by our method.
std::vector<RejectionAblationRow> ablate_rejection(const ExperimentConfig& config, const Dataset& data);

std::string loss_ablation_table(std::span<const LossAblationRow> rows);
std::string rejection_ablation_table(std::span<const RejectionAblationRow> rows);

struct ComparisonRow {
  Method method;
  SuiteResult suite;
};

std::vector<ComparisonRow> compare_methods(const ExperimentConfig& config, const Dataset& data);
std::string comparison_table(std::span<const ComparisonRow> rows);

/// Evaluates a stored model on the test split of the schedule's classes.
/// `delta_override` replaces every rejection radius when set.
MetricsReport evaluate_checkpoint(const OwrModel& model, const Dataset& data, const EpisodeSchedule& schedule,
                                  std::optional<double> delta_override = std::nullopt);

}  // namespace owr
