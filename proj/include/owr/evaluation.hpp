#pragma once

// Closed-world, open-set and open-world metrics.

#include "owr/protocol.hpp"

#include <optional>
#include <span>
#include <vector>

namespace owr {

struct MetricsReport {
  int step = 0;
  int known_classes = 0;
  double cw_no_rej = 0;
  double cw_rej = 0;
  // Missing when there are no unknown test samples.
  std::optional<double> open_set_acc;
  std::optional<double> owr;
  std::optional<double> owr_h;
  // Missing when no known sample is classified correctly without rejection.
  std::optional<double> known_rejection_rate;
  std::optional<double> rejection_diff;
};

double eval_closed_no_rejection(const OwrModel& model, const LabeledData& known_test);
double eval_closed_with_rejection(const OwrModel& model, const LabeledData& known_test);
double eval_open_set(const OwrModel& model, const Matrix& unknown_inputs);

struct OwrScores {
  double owr = 0;
  double owr_h = 0;
};

/// Arithmetic and harmonic mean; the harmonic mean of (0, 0) is 0.
OwrScores compose_owr(double cw_rej, double open_set_acc);

struct RejectionRates {
  std::optional<double> known_rejection_rate;  // over correctly classified known samples only
  double open_set_acc = 0;
  std::optional<double> diff;  // open_set_acc - known_rejection_rate
};

RejectionRates rejection_rate_diff(const OwrModel& model, const LabeledData& known_test, const Matrix& unknown_inputs);

/// All metrics for one step. `unknown_inputs` may be empty.
MetricsReport evaluate_step(const OwrModel& model, const LabeledData& known_test, const Matrix& unknown_inputs);

/// Unweighted mean of every field over the reports; optional fields are
/// averaged over the reports where they are present.
MetricsReport average_reports(std::span<const MetricsReport> reports);

/// |f_after(x) - f_before(x)| for every row of `inputs`.
std::vector<double> feature_drift(const Extractor& before, const Extractor& after, const Matrix& inputs);

double median(std::vector<double> values);

}  // namespace owr
