#include "owr/protocol.hpp"

#include "owr/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <numeric>
#include <set>

namespace owr {

std::string to_string(Method m) {
  switch (m) {
    case Method::ours:
      return "ours";
    case Method::nno:
      return "nno";
    case Method::deepnno:
      return "deepnno";
  }
  return "?";
}

Method method_from_string(const std::string& s) {
  if (s == "ours") return Method::ours;
  if (s == "nno") return Method::nno;
  if (s == "deepnno") return Method::deepnno;
  throw ConfigError("unknown method '" + s + "' (expected ours, nno or deepnno)");
}

void TrainConfig::validate() const {
  if (epochs_initial < 1 || epochs_incremental < 1) throw ConfigError("training: epochs must be positive");
  if (!(learning_rate >= 0)) throw ConfigError("training: learning_rate must be non-negative");
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("training: momentum must be in [0,1)");
  if (!(weight_decay >= 0)) throw ConfigError("training: weight_decay must be non-negative");
  if (batch_size < 2) throw ConfigError("training: batch_size must be at least 2");
  if (weights.global < 0 || weights.lambda < 0 || weights.gamma < 0)
    throw ConfigError("training: loss weights must be non-negative");
  if (!(stats_decay >= 0 && stats_decay <= 1)) throw ConfigError("training: stats_decay must be in [0,1]");
  if (!(grad_clip >= 0)) throw ConfigError("training: grad_clip must be non-negative");
  if (!(threshold_lr > 0)) throw ConfigError("training: threshold_lr must be positive");
  if (threshold_epochs < 1) throw ConfigError("training: threshold_epochs must be positive");
  if (memory_budget < 1) throw ConfigError("training: memory_budget must be positive");
  if (!(memory_fraction >= 0 && memory_fraction < 1)) throw ConfigError("training: memory_fraction must be in [0,1)");
  if (!(heldout_fraction >= 0 && heldout_fraction < 1))
    throw ConfigError("training: heldout_fraction must be in [0,1)");
  if (!(heldout_jitter >= 0)) throw ConfigError("training: heldout_jitter must be non-negative");
  if (!(nno_z > 0)) throw ConfigError("training: nno_z must be positive");
  if (!(nno_tau_quantile > 0 && nno_tau_quantile <= 1)) throw ConfigError("training: nno_tau_quantile must be in (0,1]");
  if (!(deepnno_initial_tau > 0) || !(deepnno_step_fraction > 0))
    throw ConfigError("training: deepnno tau and step must be positive");
}

std::vector<ClassId> OwrModel::known_classes() const {
  std::vector<ClassId> out;
  for (const auto& c : classes) out.push_back(c.class_id);
  return out;
}

ClassStats<double>& OwrModel::stats(ClassId c) {
  for (auto& s : classes)
    if (s.class_id == c) return s;
  throw ConfigError("class " + std::to_string(c) + " is not known to the model");
}

const ClassStats<double>& OwrModel::stats(ClassId c) const {
  return const_cast<OwrModel*>(this)->stats(c);
}

Prediction<double> OwrModel::classify_closed(const RowVector& f) const {
  return ncm_predict(f, std::span<const ClassStats<double>>(classes));
}

Prediction<double> OwrModel::classify(const RowVector& f) const {
  const std::span<const ClassStats<double>> cs(classes);
  if (method == Method::ours) return predict_with_rejection(f, cs, variance, strict_accept);
  return nno_predict(f, cs, tau.tau, nno_z, nno_distance);
}

OwrModel make_model(Method method, const ExtractorConfig& extractor, const TrainConfig& config) {
  config.validate();
  OwrModel m;
  m.method = method;
  m.extractor = Extractor(extractor);
  m.memory.budget = config.memory_budget;
  m.memory.heldout_fraction = method == Method::ours ? config.heldout_fraction : 0.0;
  m.strict_accept = config.strict_accept;
  m.nno_z = config.nno_z;
  m.nno_distance = config.nno_distance;
  m.tau = {config.deepnno_initial_tau, config.deepnno_step_fraction * config.deepnno_initial_tau};
  return m;
}

namespace {

double nno_distance(const RowVector& f, const Vector& mu, DistanceKind kind) {
  const double d = squared_euclidean(f, mu);
  return kind == DistanceKind::euclidean ? std::sqrt(d) : d;
}

// Own class -> TP/FN, nearest other class -> FP/TN.
HeuristicThresholdState<double> heuristic_update(const OwrModel& model, const RowVector& f, ClassId label,
                                                 HeuristicThresholdState<double> state) {
  double own = -1;
  double nearest_other = std::numeric_limits<double>::infinity();
  for (const auto& c : model.classes) {
    if (!c.usable()) continue;
    const double d = nno_distance(f, c.centroid, model.nno_distance);
    if (c.class_id == label) own = d;
    else nearest_other = std::min(nearest_other, d);
  }
  if (own >= 0)
    state = deepnno_threshold_update(state, own < state.tau ? Outcome::true_positive : Outcome::false_negative);
  if (std::isfinite(nearest_other))
    state = deepnno_threshold_update(state,
                                     nearest_other < state.tau ? Outcome::false_positive : Outcome::true_negative);
  return state;
}

void absorb_features(OwrModel& model, const Matrix& features, std::span<const ClassId> labels) {
  std::map<ClassId, std::vector<Eigen::Index>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(static_cast<Eigen::Index>(i));
  for (const auto& [c, rows] : by_class) {
    Matrix block(static_cast<Eigen::Index>(rows.size()), features.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) block.row(static_cast<Eigen::Index>(i)) = features.row(rows[i]);
    auto& s = model.stats(c);
    s = update_centroid(s, block);
  }
  model.variance = update_global_variance(model.variance, features);
}

// Shrinks the weight of statistics gathered with earlier versions of the
// extractor. Counts stay >= 1 so seen classes remain usable.
void decay_statistics(OwrModel& model, double factor) {
  if (factor >= 1) return;
  auto shrink = [&](std::int64_t n) { return std::max<std::int64_t>(1, std::llround(static_cast<double>(n) * factor)); };
  for (auto& c : model.classes)
    if (c.count > 0) c.count = shrink(c.count);
  if (model.variance.count > 0) {
    const std::int64_t n = shrink(model.variance.count);
    model.variance.m2 *= static_cast<double>(n) / static_cast<double>(model.variance.count);
    model.variance.count = n;
  }
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw ConfigError("quantile of an empty set");
  std::sort(values.begin(), values.end());
  const auto idx = static_cast<std::size_t>(std::ceil(q * static_cast<double>(values.size())));
  return values[std::clamp<std::size_t>(idx, 1, values.size()) - 1];
}

std::vector<Eigen::Index> label_columns(const OwrModel& model, std::span<const ClassId> labels) {
  std::vector<Eigen::Index> out;
  out.reserve(labels.size());
  for (ClassId l : labels) {
    auto it = std::find_if(model.classes.begin(), model.classes.end(),
                           [&](const ClassStats<double>& c) { return c.class_id == l; });
    if (it == model.classes.end()) throw ConfigError("label " + std::to_string(l) + " is not a known class");
    out.push_back(static_cast<Eigen::Index>(it - model.classes.begin()));
  }
  return out;
}

}  // namespace

std::vector<LogRecord> stage1_train_epoch(OwrModel& model, const LabeledData& current,
                                          const FrozenExtractor<double>* previous, const TrainConfig& config,
                                          OptimizerState<double>& optimizer, int epoch) {
  std::mt19937_64 rng(derive_seed(config.seed, {static_cast<std::uint64_t>(model.step + 1),
                                                 static_cast<std::uint64_t>(epoch), 0xba7c}));
  const auto batches = compose_epoch(current, model.memory, config.batch_size, config.memory_fraction, rng);
  decay_statistics(model, config.stats_decay);
  const LossWeights weights = model.method == Method::nno ? LossWeights{1.0, 0.0, 0.0} : config.weights;
  std::vector<LogRecord> log;
  int index = 0;
  for (const auto& batch : batches) {
    auto fwd = model.extractor.forward(batch.inputs);
    const double temperature = batch_variance(fwd.features);
    absorb_features(model, fwd.features, batch.labels);

    Matrix old_features;
    const Matrix* old = nullptr;
    if (previous && *previous) {
      old_features = previous->features(batch.inputs);
      old = &old_features;
    }
    const std::span<const ClassStats<double>> centroids(model.classes);
    TotalLossOutput<double> loss;
    if (model.method == Method::deepnno) {
      loss = deepnno_total_loss(fwd.features, batch.labels, centroids, old, weights.gamma);
      for (Eigen::Index i = 0; i < fwd.features.rows(); ++i)
        model.tau = heuristic_update(model, fwd.features.row(i), batch.labels[i], model.tau);
    } else {
      loss = total_loss(fwd.features, batch.labels, centroids, temperature, old, weights);
    }
    auto grads = model.extractor.backward(fwd.cache, loss.feature_grads);
    clip_gradient_norm(grads, config.grad_clip);
    sgd_step(model.extractor, optimizer, grads);

    log.push_back({model.step + 1, epoch, index++, loss.value, loss.global, loss.local, loss.distill, temperature,
                   model.variance.current(), loss.skipped_anchors, model.tau.tau});
  }
  return log;
}

Matrix normalized_distances(const OwrModel& model, const Matrix& features) {
  const double temperature = model.variance.current();
  Matrix d(features.rows(), static_cast<Eigen::Index>(model.classes.size()));
  for (Eigen::Index i = 0; i < features.rows(); ++i)
    for (std::size_t k = 0; k < model.classes.size(); ++k)
      d(i, static_cast<Eigen::Index>(k)) = squared_euclidean(features.row(i), model.classes[k].centroid) / temperature;
  return d;
}

Vector initial_thresholds(const Matrix& distances, std::span<const Eigen::Index> label_index, ThresholdMode mode) {
  const Eigen::Index k = distances.cols();
  Vector sum = Vector::Zero(k);
  Vector count = Vector::Zero(k);
  for (std::size_t i = 0; i < label_index.size(); ++i) {
    sum[label_index[i]] += distances(static_cast<Eigen::Index>(i), label_index[i]);
    count[label_index[i]] += 1;
  }
  const double overall = count.sum() > 0 ? sum.sum() / count.sum() : 0.0;
  Vector out(k);
  for (Eigen::Index c = 0; c < k; ++c)
    out[c] = (mode == ThresholdMode::global || count[c] == 0) ? overall : sum[c] / count[c];
  return out;
}

Vector learn_thresholds(const Matrix& distances, std::span<const Eigen::Index> label_index, Vector initial,
                        ThresholdMode mode, double learning_rate, int epochs, std::uint64_t seed) {
  if (static_cast<Eigen::Index>(label_index.size()) != distances.rows() || initial.size() != distances.cols())
    throw ShapeError("learn_thresholds: shape mismatch");
  Vector delta = initial.cwiseMax(0.0);
  if (mode == ThresholdMode::global) delta.setConstant(delta.size() > 0 ? delta[0] : 0.0);
  std::vector<Eigen::Index> order(label_index.size());
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::mt19937_64 rng(seed);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (Eigen::Index i : order) {
      const Vector d = distances.row(i).transpose();
      const auto g = *md_loss(d, label_index[i], delta).threshold_grads;
      if (mode == ThresholdMode::global)
        delta.setConstant(std::max(0.0, delta[0] - learning_rate * g.sum()));
      else
        delta = (delta - learning_rate * g).cwiseMax(0.0);
    }
  }
  return delta;
}

ThresholdFit stage2_learn_thresholds(OwrModel& model, const LabeledData& samples, const TrainConfig& config) {
  if (samples.empty()) throw ConfigError("threshold learning: no samples available");
  Matrix features = model.features(samples.inputs);
  if (config.heldout_jitter > 0) {
    std::mt19937_64 rng(derive_seed(config.seed, {static_cast<std::uint64_t>(model.step), 0x717e}));
    std::normal_distribution<double> noise(0.0, config.heldout_jitter);
    for (Eigen::Index i = 0; i < features.size(); ++i) features.data()[i] += noise(rng);
  }
  const Matrix d = normalized_distances(model, features);
  const auto idx = label_columns(model, samples.labels);
  const Vector init = initial_thresholds(d, idx, config.threshold_mode);
  ThresholdFit fit;
  fit.thresholds = learn_thresholds(d, idx, init, config.threshold_mode, config.threshold_lr, config.threshold_epochs,
                                    derive_seed(config.seed, {static_cast<std::uint64_t>(model.step), 0x57a9e2}));
  for (std::size_t k = 0; k < model.classes.size(); ++k)
    model.classes[k].threshold = fit.thresholds[static_cast<Eigen::Index>(k)];
  return fit;
}

HeuristicThresholdState<double> fit_heuristic_tau(const OwrModel& model, const Matrix& features,
                                                  std::span<const ClassId> labels, HeuristicThresholdState<double> state,
                                                  int epochs, std::uint64_t seed) {
  std::vector<Eigen::Index> order(labels.size());
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::mt19937_64 rng(seed);
  for (int e = 0; e < epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (Eigen::Index i : order) state = heuristic_update(model, features.row(i), labels[i], state);
  }
  return state;
}

LabeledData threshold_samples(const OwrModel& model, const StepReport& report, ThresholdSource source,
                              std::vector<ClassId>* fallback) {
  if (source == ThresholdSource::training) return LabeledData::concat(report.stage1_data, report.rehearsal);
  LabeledData samples = model.memory.gather(Partition::heldout);
  for (ClassId c : model.known_classes()) {
    if (model.memory.count(c, Partition::heldout) > 0) continue;
    const std::vector<ClassId> one{c};
    samples = LabeledData::concat(samples, model.memory.gather(Partition::rehearsal, one));
    if (fallback) fallback->push_back(c);
  }
  return samples;
}

StepReport run_incremental_step(OwrModel& model, const EpisodeSchedule& schedule, int t, const LabeledData& train_t,
                                const TrainConfig& config) {
  config.validate();
  if (t != model.step + 1)
    throw ConfigError("step " + std::to_string(t) + " requested after step " + std::to_string(model.step));
  if (t >= schedule.steps()) throw ConfigError("step " + std::to_string(t) + " beyond the schedule");
  if (train_t.empty()) throw ConfigError("step " + std::to_string(t) + ": no training data");
  const auto& new_classes = schedule.class_sets[t];
  const std::set<ClassId> new_set(new_classes.begin(), new_classes.end());
  for (ClassId l : train_t.labels)
    if (!new_set.count(l))
      throw ConfigError("step " + std::to_string(t) + ": label " + std::to_string(l) + " is not in this step's class set");
  const auto known = schedule.known_at(t);

  StepReport report;
  report.previous = snapshot(model.extractor);
  for (ClassId c : new_classes) {
    if (std::any_of(model.classes.begin(), model.classes.end(), [&](const auto& s) { return s.class_id == c; }))
      throw ConfigError("class " + std::to_string(c) + " was already learned");
    model.classes.emplace_back(c, model.extractor.feature_dim());
  }
  std::sort(model.classes.begin(), model.classes.end(),
            [](const auto& a, const auto& b) { return a.class_id < b.class_id; });

  const auto quotas = rebalance(model.memory, known);
  std::map<ClassId, std::vector<Eigen::Index>> rows_of;
  for (Eigen::Index i = 0; i < train_t.size(); ++i) rows_of[train_t.labels[i]].push_back(i);

  // Held-out exemplars of the new classes, kept away from feature training.
  std::map<ClassId, std::vector<Eigen::Index>> reserved;
  std::vector<Eigen::Index> stage1_rows;
  const bool reserve = config.reserve_heldout && model.memory.heldout_fraction > 0;
  for (auto& [c, rows] : rows_of) {
    if (reserve) {
      std::vector<Eigen::Index> shuffled = rows;
      std::mt19937_64 rng(derive_seed(config.seed, {static_cast<std::uint64_t>(t), static_cast<std::uint64_t>(c), 0x4e5e}));
      std::shuffle(shuffled.begin(), shuffled.end(), rng);
      const auto keep = std::min<std::size_t>(static_cast<std::size_t>(quotas.at(c)), rows.size());
      auto n_held = static_cast<std::size_t>(round_half_up(model.memory.heldout_fraction * static_cast<double>(keep)));
      n_held = std::min(n_held, rows.size() - 1);
      reserved[c].assign(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(n_held));
      const std::set<Eigen::Index> held(reserved[c].begin(), reserved[c].end());
      for (Eigen::Index r : rows)
        if (!held.count(r)) stage1_rows.push_back(r);
    } else {
      stage1_rows.insert(stage1_rows.end(), rows.begin(), rows.end());
    }
  }
  std::sort(stage1_rows.begin(), stage1_rows.end());
  report.stage1_data = train_t.subset(stage1_rows);
  report.rehearsal = model.memory.gather(Partition::rehearsal);

  // Stage 1: feature extractor and online statistics.
  if (model.method == Method::nno && t > 0) {
    absorb_features(model, model.features(report.stage1_data.inputs), report.stage1_data.labels);
  } else {
    OptimizerState<double> optimizer(model.extractor, config.learning_rate, config.momentum, config.weight_decay);
    const FrozenExtractor<double>* previous = t > 0 ? &report.previous : nullptr;
    const int epochs = t == 0 ? config.epochs_initial : config.epochs_incremental;
    for (int e = 0; e < epochs; ++e) {
      auto log = stage1_train_epoch(model, report.stage1_data, previous, config, optimizer, e);
      report.log.insert(report.log.end(), log.begin(), log.end());
    }
  }
  if (model.method == Method::nno && t == 0) {
    const Matrix f = model.features(report.stage1_data.inputs);
    std::vector<double> own;
    for (Eigen::Index i = 0; i < f.rows(); ++i)
      own.push_back(nno_distance(f.row(i), model.stats(report.stage1_data.labels[i]).centroid, model.nno_distance));
    model.tau.tau = std::max(kMinTau, quantile(own, config.nno_tau_quantile));
  }

  // Memory: shrink old classes, select exemplars for the new ones.
  apply_quotas(model.memory, quotas);
  ExemplarMemory fresh;
  fresh.budget = model.memory.budget;
  fresh.heldout_fraction = model.memory.heldout_fraction;
  for (const auto& [c, rows] : rows_of) {
    const std::set<Eigen::Index> held(reserved[c].begin(), reserved[c].end());
    std::vector<Eigen::Index> pool;
    for (Eigen::Index r : rows)
      if (!held.count(r)) pool.push_back(r);
    const int quota = std::max(0, quotas.at(c) - static_cast<int>(held.size()));
    const LabeledData pool_data = train_t.subset(pool);
    std::vector<Eigen::Index> picked;
    if (config.selection == SelectionRule::herding) {
      const Matrix f = model.features(pool_data.inputs);
      picked = herd_select_features(f, f.colwise().mean().transpose(), quota);
    } else {
      picked.resize(pool.size());
      std::iota(picked.begin(), picked.end(), Eigen::Index{0});
      std::mt19937_64 rng(derive_seed(config.seed, {static_cast<std::uint64_t>(t), static_cast<std::uint64_t>(c), 0x5e1}));
      std::shuffle(picked.begin(), picked.end(), rng);
      picked.resize(std::min<std::size_t>(picked.size(), static_cast<std::size_t>(quota)));
    }
    auto& stored = fresh.classes[c];
    for (Eigen::Index p : picked)
      stored.push_back({pool_data.inputs.row(p), c, pool_data.ids[p], Partition::rehearsal});
    for (Eigen::Index r : reserved[c])
      stored.push_back({train_t.inputs.row(r), c, train_t.ids[r], Partition::heldout});
  }
  if (!reserve && fresh.heldout_fraction > 0)
    split_train_heldout(fresh, derive_seed(config.seed, {static_cast<std::uint64_t>(t), 0x5b11}));
  for (auto& [c, stored] : fresh.classes) model.memory.classes[c] = std::move(stored);

  model.step = t;

  // Stage 2: radii on samples the extractor has not been trained on.
  if (model.method == Method::ours) {
    const LabeledData samples = threshold_samples(model, report, config.threshold_source, &report.heldout_fallback);
    stage2_learn_thresholds(model, samples, config);
  }
  return report;
}

std::uint64_t parameter_checksum(const Extractor& extractor) {
  std::uint64_t h = 1469598103934665603ULL;
  auto feed = [&](const double* data, Eigen::Index n) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < static_cast<std::size_t>(n) * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& l : extractor.parameters()) {
    feed(l.weight.data(), l.weight.size());
    feed(l.bias.data(), l.bias.size());
  }
  return h;
}

}  // namespace owr
