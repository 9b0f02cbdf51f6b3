#include "owr/evaluation.hpp"

#include <algorithm>

namespace owr {

namespace {

// Closed-world and open-set decisions computed from one forward pass.
struct Decisions {
  std::vector<ClassId> closed;
  std::vector<ClassId> open;
};

Decisions decide(const OwrModel& model, const Matrix& inputs) {
  Decisions d;
  if (inputs.rows() == 0) return d;
  const Matrix f = model.features(inputs);
  for (Eigen::Index i = 0; i < f.rows(); ++i) {
    const RowVector row = f.row(i);
    d.closed.push_back(model.classify_closed(row).label);
    d.open.push_back(model.classify(row).label);
  }
  return d;
}

double fraction_equal(const std::vector<ClassId>& predicted, std::span<const ClassId> truth) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) hits += predicted[i] == truth[i];
  return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

double fraction_unknown(const std::vector<ClassId>& predicted) {
  const auto n = std::count(predicted.begin(), predicted.end(), kUnknown);
  return static_cast<double>(n) / static_cast<double>(predicted.size());
}

void require_samples(Eigen::Index n, const char* what) {
  if (n == 0) throw ConfigError(std::string(what) + ": empty test set");
}

std::optional<double> known_rejection(const Decisions& d, std::span<const ClassId> truth) {
  std::size_t correct = 0, rejected = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (d.closed[i] != truth[i]) continue;
    ++correct;
    rejected += d.open[i] == kUnknown;
  }
  if (correct == 0) return std::nullopt;
  return static_cast<double>(rejected) / static_cast<double>(correct);
}

}  // namespace

double eval_closed_no_rejection(const OwrModel& model, const LabeledData& known_test) {
  require_samples(known_test.size(), "closed world");
  return fraction_equal(decide(model, known_test.inputs).closed, known_test.labels);
}

double eval_closed_with_rejection(const OwrModel& model, const LabeledData& known_test) {
  require_samples(known_test.size(), "closed world with rejection");
  return fraction_equal(decide(model, known_test.inputs).open, known_test.labels);
}

double eval_open_set(const OwrModel& model, const Matrix& unknown_inputs) {
  require_samples(unknown_inputs.rows(), "open set");
  return fraction_unknown(decide(model, unknown_inputs).open);
}

OwrScores compose_owr(double cw_rej, double open_set_acc) {
  OwrScores s;
  s.owr = (cw_rej + open_set_acc) / 2;
  const double sum = cw_rej + open_set_acc;
  s.owr_h = sum > 0 ? 2 * cw_rej * open_set_acc / sum : 0.0;
  return s;
}

RejectionRates rejection_rate_diff(const OwrModel& model, const LabeledData& known_test, const Matrix& unknown_inputs) {
  require_samples(known_test.size(), "rejection rates");
  RejectionRates r;
  r.open_set_acc = eval_open_set(model, unknown_inputs);
  r.known_rejection_rate = known_rejection(decide(model, known_test.inputs), known_test.labels);
  if (r.known_rejection_rate) r.diff = r.open_set_acc - *r.known_rejection_rate;
  return r;
}

MetricsReport evaluate_step(const OwrModel& model, const LabeledData& known_test, const Matrix& unknown_inputs) {
  require_samples(known_test.size(), "evaluation");
  MetricsReport m;
  m.step = model.step;
  m.known_classes = static_cast<int>(model.classes.size());
  const Decisions known = decide(model, known_test.inputs);
  m.cw_no_rej = fraction_equal(known.closed, known_test.labels);
  m.cw_rej = fraction_equal(known.open, known_test.labels);
  m.known_rejection_rate = known_rejection(known, known_test.labels);
  if (unknown_inputs.rows() > 0) {
    m.open_set_acc = fraction_unknown(decide(model, unknown_inputs).open);
    const auto s = compose_owr(m.cw_rej, *m.open_set_acc);
    m.owr = s.owr;
    m.owr_h = s.owr_h;
    if (m.known_rejection_rate) m.rejection_diff = *m.open_set_acc - *m.known_rejection_rate;
  }
  return m;
}

MetricsReport average_reports(std::span<const MetricsReport> reports) {
  MetricsReport avg;
  if (reports.empty()) return avg;
  avg.step = -1;
  auto mean_of = [&](auto field) {
    double sum = 0;
    int n = 0;
    for (const auto& r : reports) {
      const std::optional<double> v = field(r);
      if (v) {
        sum += *v;
        ++n;
      }
    }
    return n > 0 ? std::optional<double>(sum / n) : std::nullopt;
  };
  avg.known_classes = reports.back().known_classes;
  avg.cw_no_rej = *mean_of([](const MetricsReport& r) { return std::optional<double>(r.cw_no_rej); });
  avg.cw_rej = *mean_of([](const MetricsReport& r) { return std::optional<double>(r.cw_rej); });
  avg.open_set_acc = mean_of([](const MetricsReport& r) { return r.open_set_acc; });
  avg.owr = mean_of([](const MetricsReport& r) { return r.owr; });
  avg.owr_h = mean_of([](const MetricsReport& r) { return r.owr_h; });
  avg.known_rejection_rate = mean_of([](const MetricsReport& r) { return r.known_rejection_rate; });
  avg.rejection_diff = mean_of([](const MetricsReport& r) { return r.rejection_diff; });
  return avg;
}

std::vector<double> feature_drift(const Extractor& before, const Extractor& after, const Matrix& inputs) {
  std::vector<double> out;
  if (inputs.rows() == 0) return out;
  const Matrix delta = after.features(inputs) - before.features(inputs);
  for (Eigen::Index i = 0; i < delta.rows(); ++i) out.push_back(delta.row(i).norm());
  return out;
}

double median(std::vector<double> values) {
  if (values.empty()) throw ConfigError("median of an empty set");
  std::sort(values.begin(), values.end());
  const std::size_t mid = values.size() / 2;
  return values.size() % 2 ? values[mid] : 0.5 * (values[mid - 1] + values[mid]);
}

}  // namespace owr
