#include "owr/experiment.hpp"

#include "owr/checkpoint.hpp"
#include "owr/io.hpp"
#include "owr/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <limits>
#include <set>
#include <sstream>
#include <thread>

namespace owr {

using nlohmann::json;

namespace {

// ---- config (de)serialization ------------------------------------------------

const char* generator_name(Generator g) { return g == Generator::rings ? "rings" : "gaussian_blobs"; }

template <typename Enum>
Enum parse_enum(const std::string& value, std::initializer_list<std::pair<const char*, Enum>> options,
                const std::string& path) {
  std::string names;
  for (const auto& [name, e] : options) {
    if (value == name) return e;
    names += names.empty() ? name : std::string(", ") + name;
  }
  throw ConfigError(path + ": unknown value '" + value + "' (expected " + names + ")");
}

void check_keys(const json& section, std::initializer_list<const char*> allowed, const std::string& path) {
  if (!section.is_object()) throw ConfigError(path + ": expected an object");
  for (const auto& [key, value] : section.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError((path.empty() ? key : path + "." + key) + ": unknown key");
  }
}

template <typename T>
void read(const json& section, const char* key, T& out, const std::string& path) {
  if (!section.contains(key)) return;
  try {
    out = section.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(path + "." + key + ": wrong type");
  }
}

json config_object(const ExperimentConfig& c, bool with_output) {
  const auto& s = c.dataset.synthetic;
  const auto& t = c.training;
  json j;
  j["dataset"] = {
      {"kind", c.dataset.kind == DatasetSource::Kind::csv ? "csv" : "synthetic"},
      {"synthetic",
       {{"generator", generator_name(s.generator)},
        {"n_classes", s.n_classes},
        {"dim", s.dim},
        {"samples_per_class", s.samples_per_class},
        {"variance_low", s.variance_low},
        {"variance_high", s.variance_high},
        {"spacing", s.spacing},
        {"test_fraction", s.test_fraction},
        {"seed", s.seed}}},
      {"csv",
       {{"path", c.dataset.csv_path},
        {"has_header", c.dataset.csv_schema.has_header},
        {"label_column", c.dataset.csv_schema.label_column},
        {"split_column", c.dataset.csv_schema.split_column},
        {"test_fraction", c.dataset.csv_test_fraction},
        {"split_seed", c.dataset.csv_split_seed}}}};
  j["schedule"] = {{"n_known", c.schedule.n_known},
                   {"initial", c.schedule.initial},
                   {"step", c.schedule.step},
                   {"order_seeds", c.schedule.order_seeds},
                   {"runs", c.schedule.runs}};
  j["method"] = {{"name", to_string(c.method)},
                 {"strict_accept", t.strict_accept},
                 {"threshold_mode", t.threshold_mode == ThresholdMode::global ? "global" : "class_specific"},
                 {"threshold_source", t.threshold_source == ThresholdSource::training ? "training" : "heldout"},
                 {"heldout_jitter", t.heldout_jitter},
                 {"nno_z", t.nno_z},
                 {"nno_distance", t.nno_distance == DistanceKind::squared ? "squared" : "euclidean"},
                 {"nno_tau_quantile", t.nno_tau_quantile},
                 {"deepnno_initial_tau", t.deepnno_initial_tau},
                 {"deepnno_step_fraction", t.deepnno_step_fraction}};
  j["model"] = {{"layer_dims", c.layer_dims}, {"activation", c.activation == Activation::relu ? "relu" : "identity"}};
  j["training"] = {{"epochs_initial", t.epochs_initial},
                   {"epochs_incremental", t.epochs_incremental},
                   {"learning_rate", t.learning_rate},
                   {"momentum", t.momentum},
                   {"weight_decay", t.weight_decay},
                   {"batch_size", t.batch_size},
                   {"grad_clip", t.grad_clip},
                   {"stats_decay", t.stats_decay},
                   {"global_weight", t.weights.global},
                   {"lambda", t.weights.lambda},
                   {"gamma", t.weights.gamma},
                   {"threshold_lr", t.threshold_lr},
                   {"threshold_epochs", t.threshold_epochs},
                   {"seed", t.seed},
                   {"memory_budget", t.memory_budget},
                   {"memory_fraction", t.memory_fraction},
                   {"heldout_fraction", t.heldout_fraction},
                   {"selection", t.selection == SelectionRule::random ? "random" : "herding"},
                   {"reserve_heldout", t.reserve_heldout}};
  if (with_output) j["output"] = {{"dir", c.output_dir}, {"workers", c.workers}};
  return j;
}

// ---- formatting ----------------------------------------------------------------

std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string fixed(const std::optional<double>& v) { return v ? fixed(*v) : std::string("-"); }

std::string hex(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json report_object(const MetricsReport& r) {
  return {{"step", r.step},
          {"known_classes", r.known_classes},
          {"cw_no_rej", r.cw_no_rej},
          {"cw_rej", r.cw_rej},
          {"open_set_acc", optional_json(r.open_set_acc)},
          {"owr", optional_json(r.owr)},
          {"owr_h", optional_json(r.owr_h)},
          {"known_rejection_rate", optional_json(r.known_rejection_rate)},
          {"rejection_diff", optional_json(r.rejection_diff)}};
}

std::string pad(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : std::string(width - s.size(), ' ') + s;
}

// Right-aligned columns; the first column is left-aligned.
std::string render_table(const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width;
  for (const auto& r : rows)
    for (std::size_t i = 0; i < r.size(); ++i) {
      if (width.size() <= i) width.push_back(0);
      width[i] = std::max(width[i], r[i].size());
    }
  std::string out;
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) {
      if (i == 0)
        out += r[i] + std::string(width[0] - r[i].size(), ' ');
      else
        out += "  " + pad(r[i], width[i]);
    }
    out += "\n";
  }
  return out;
}

std::string plot_tsv(std::span<const MetricsReport> reports) {
  std::string out = "step\tcw_no_rej\tcw_rej\topen_set_acc\towr\towr_h\n";
  auto cell = [](const std::optional<double>& v) { return v ? fixed(*v, 6) : std::string("nan"); };
  for (const auto& r : reports)
    out += std::to_string(r.step) + "\t" + fixed(r.cw_no_rej, 6) + "\t" + fixed(r.cw_rej, 6) + "\t" +
           cell(r.open_set_acc) + "\t" + cell(r.owr) + "\t" + cell(r.owr_h) + "\n";
  return out;
}

json seeds_object(const RunSeeds& s) {
  return {{"order_seed", s.order_seed}, {"run", s.run}, {"train_seed", s.train_seed}, {"init_seed", s.init_seed}};
}

// ---- execution -----------------------------------------------------------------

template <typename F>
void parallel_for(int n, int workers, F&& body) {
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
  std::atomic<int> next{0};
  auto work = [&] {
    for (int i; (i = next++) < n;) {
      try {
        body(i);
      } catch (...) {
        errors[static_cast<std::size_t>(i)] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> threads;
  for (int k = 1; k < std::min(workers, n); ++k) threads.emplace_back(work);
  work();
  for (auto& th : threads) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::vector<std::pair<std::uint64_t, int>> experiment_ids(const ExperimentConfig& config) {
  std::vector<std::pair<std::uint64_t, int>> ids;
  for (auto o : config.schedule.order_seeds)
    for (int r = 0; r < config.schedule.runs; ++r) ids.emplace_back(o, r);
  return ids;
}

std::vector<ExperimentResult> run_all(const ExperimentConfig& config, const Dataset& data) {
  const auto ids = experiment_ids(config);
  std::vector<ExperimentResult> results(ids.size());
  parallel_for(static_cast<int>(ids.size()), config.workers, [&](int i) {
    results[static_cast<std::size_t>(i)] = run_experiment(config, data, ids[i].first, ids[i].second);
  });
  return results;
}

SuiteResult summarize(std::vector<ExperimentResult> experiments) {
  SuiteResult suite;
  suite.experiments = std::move(experiments);
  const std::size_t steps = suite.experiments.empty() ? 0 : suite.experiments.front().steps.size();
  for (std::size_t t = 0; t < steps; ++t) {
    std::vector<MetricsReport> at_t;
    for (const auto& e : suite.experiments) at_t.push_back(e.steps[t].report);
    suite.per_step.push_back(average_reports(at_t));
    suite.per_step.back().step = static_cast<int>(t);
  }
  suite.average = average_reports(suite.per_step);
  return suite;
}

double mean(const std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

// ---- config -------------------------------------------------------------------

void ExperimentConfig::validate() const {
  if (dataset.kind == DatasetSource::Kind::synthetic) {
    dataset.synthetic.validate();
  } else {
    if (dataset.csv_path.empty()) throw ConfigError("dataset.csv.path: required for csv datasets");
    if (dataset.csv_test_fraction <= 0 || dataset.csv_test_fraction >= 1)
      throw ConfigError("dataset.csv.test_fraction: must be in (0, 1)");
  }
  if (schedule.n_known < 1) throw ConfigError("schedule.n_known: must be positive");
  if (schedule.initial < 1 || schedule.initial > schedule.n_known)
    throw ConfigError("schedule.initial: must be in [1, n_known]");
  if (schedule.step < 1) throw ConfigError("schedule.step: must be positive");
  if ((schedule.n_known - schedule.initial) % schedule.step != 0)
    throw ConfigError("schedule.step: n_known - initial must be divisible by step");
  if (schedule.order_seeds.empty()) throw ConfigError("schedule.order_seeds: at least one seed required");
  if (schedule.runs < 1) throw ConfigError("schedule.runs: must be positive");
  if (layer_dims.empty()) throw ConfigError("model.layer_dims: at least one layer required");
  for (int d : layer_dims)
    if (d < 1) throw ConfigError("model.layer_dims: widths must be positive");
  if (activation == Activation::identity && layer_dims.size() != 1)
    throw ConfigError("model.activation: identity is only allowed for a single layer");
  if (workers < 1) throw ConfigError("output.workers: must be positive");
  try {
    training.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("training: ") + e.what());
  }
}

ExperimentConfig default_experiment_config() { return ExperimentConfig{}; }

std::string config_to_json(const ExperimentConfig& config) { return config_object(config, true).dump(2) + "\n"; }

std::string replay_config_json(const ExperimentConfig& config) { return config_object(config, false).dump(); }

ExperimentConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  ExperimentConfig c;
  check_keys(j, {"dataset", "schedule", "method", "model", "training", "output"}, "");
  if (j.contains("dataset")) {
    const auto& d = j["dataset"];
    check_keys(d, {"kind", "synthetic", "csv"}, "dataset");
    std::string kind = "synthetic";
    read(d, "kind", kind, "dataset");
    c.dataset.kind = parse_enum<DatasetSource::Kind>(
        kind, {{"synthetic", DatasetSource::Kind::synthetic}, {"csv", DatasetSource::Kind::csv}}, "dataset.kind");
    if (d.contains("synthetic")) {
      const auto& s = d["synthetic"];
      auto& out = c.dataset.synthetic;
      check_keys(s,
                 {"generator", "n_classes", "dim", "samples_per_class", "variance_low", "variance_high", "spacing",
                  "test_fraction", "seed"},
                 "dataset.synthetic");
      std::string gen = generator_name(out.generator);
      read(s, "generator", gen, "dataset.synthetic");
      out.generator = parse_enum<Generator>(gen, {{"gaussian_blobs", Generator::gaussian_blobs}, {"rings", Generator::rings}},
                                            "dataset.synthetic.generator");
      read(s, "n_classes", out.n_classes, "dataset.synthetic");
      read(s, "dim", out.dim, "dataset.synthetic");
      read(s, "samples_per_class", out.samples_per_class, "dataset.synthetic");
      read(s, "variance_low", out.variance_low, "dataset.synthetic");
      read(s, "variance_high", out.variance_high, "dataset.synthetic");
      read(s, "spacing", out.spacing, "dataset.synthetic");
      read(s, "test_fraction", out.test_fraction, "dataset.synthetic");
      read(s, "seed", out.seed, "dataset.synthetic");
    }
    if (d.contains("csv")) {
      const auto& s = d["csv"];
      check_keys(s, {"path", "has_header", "label_column", "split_column", "test_fraction", "split_seed"}, "dataset.csv");
      read(s, "path", c.dataset.csv_path, "dataset.csv");
      read(s, "has_header", c.dataset.csv_schema.has_header, "dataset.csv");
      read(s, "label_column", c.dataset.csv_schema.label_column, "dataset.csv");
      read(s, "split_column", c.dataset.csv_schema.split_column, "dataset.csv");
      read(s, "test_fraction", c.dataset.csv_test_fraction, "dataset.csv");
      read(s, "split_seed", c.dataset.csv_split_seed, "dataset.csv");
    }
  }
  if (j.contains("schedule")) {
    const auto& s = j["schedule"];
    check_keys(s, {"n_known", "initial", "step", "order_seeds", "runs"}, "schedule");
    read(s, "n_known", c.schedule.n_known, "schedule");
    read(s, "initial", c.schedule.initial, "schedule");
    read(s, "step", c.schedule.step, "schedule");
    read(s, "order_seeds", c.schedule.order_seeds, "schedule");
    read(s, "runs", c.schedule.runs, "schedule");
  }
  auto& t = c.training;
  if (j.contains("method")) {
    const auto& m = j["method"];
    check_keys(m,
               {"name", "strict_accept", "threshold_mode", "threshold_source", "heldout_jitter", "nno_z", "nno_distance",
                "nno_tau_quantile", "deepnno_initial_tau", "deepnno_step_fraction"},
               "method");
    std::string name = to_string(c.method);
    read(m, "name", name, "method");
    try {
      c.method = method_from_string(name);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("method.name: ") + e.what());
    }
    read(m, "strict_accept", t.strict_accept, "method");
    std::string mode = "class_specific", source = "heldout", distance = "euclidean";
    read(m, "threshold_mode", mode, "method");
    read(m, "threshold_source", source, "method");
    read(m, "nno_distance", distance, "method");
    t.threshold_mode = parse_enum<ThresholdMode>(
        mode, {{"class_specific", ThresholdMode::class_specific}, {"global", ThresholdMode::global}}, "method.threshold_mode");
    t.threshold_source = parse_enum<ThresholdSource>(
        source, {{"heldout", ThresholdSource::heldout}, {"training", ThresholdSource::training}}, "method.threshold_source");
    t.nno_distance = parse_enum<DistanceKind>(
        distance, {{"euclidean", DistanceKind::euclidean}, {"squared", DistanceKind::squared}}, "method.nno_distance");
    read(m, "heldout_jitter", t.heldout_jitter, "method");
    read(m, "nno_z", t.nno_z, "method");
    read(m, "nno_tau_quantile", t.nno_tau_quantile, "method");
    read(m, "deepnno_initial_tau", t.deepnno_initial_tau, "method");
    read(m, "deepnno_step_fraction", t.deepnno_step_fraction, "method");
  }
  if (j.contains("model")) {
    const auto& m = j["model"];
    check_keys(m, {"layer_dims", "activation"}, "model");
    read(m, "layer_dims", c.layer_dims, "model");
    std::string act = "relu";
    read(m, "activation", act, "model");
    c.activation = parse_enum<Activation>(act, {{"relu", Activation::relu}, {"identity", Activation::identity}},
                                          "model.activation");
  }
  if (j.contains("training")) {
    const auto& s = j["training"];
    check_keys(s,
               {"epochs_initial", "epochs_incremental", "learning_rate", "momentum", "weight_decay", "batch_size",
                "grad_clip", "stats_decay", "global_weight", "lambda", "gamma", "threshold_lr", "threshold_epochs", "seed", "memory_budget",
                "memory_fraction", "heldout_fraction", "selection", "reserve_heldout"},
               "training");
    read(s, "epochs_initial", t.epochs_initial, "training");
    read(s, "epochs_incremental", t.epochs_incremental, "training");
    read(s, "learning_rate", t.learning_rate, "training");
    read(s, "momentum", t.momentum, "training");
    read(s, "weight_decay", t.weight_decay, "training");
    read(s, "batch_size", t.batch_size, "training");
    read(s, "grad_clip", t.grad_clip, "training");
    read(s, "stats_decay", t.stats_decay, "training");
    read(s, "global_weight", t.weights.global, "training");
    read(s, "lambda", t.weights.lambda, "training");
    read(s, "gamma", t.weights.gamma, "training");
    read(s, "threshold_lr", t.threshold_lr, "training");
    read(s, "threshold_epochs", t.threshold_epochs, "training");
    read(s, "seed", t.seed, "training");
    read(s, "memory_budget", t.memory_budget, "training");
    read(s, "memory_fraction", t.memory_fraction, "training");
    read(s, "heldout_fraction", t.heldout_fraction, "training");
    std::string sel = "herding";
    read(s, "selection", sel, "training");
    t.selection = parse_enum<SelectionRule>(sel, {{"herding", SelectionRule::herding}, {"random", SelectionRule::random}},
                                            "training.selection");
    read(s, "reserve_heldout", t.reserve_heldout, "training");
  }
  if (j.contains("output")) {
    const auto& o = j["output"];
    check_keys(o, {"dir", "workers"}, "output");
    read(o, "dir", c.output_dir, "output");
    read(o, "workers", c.workers, "output");
  }
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  return config_from_json(read_text(path));
}

std::filesystem::path resolve_output_dir(const ExperimentConfig& config) {
  if (!config.output_dir.empty()) return config.output_dir;
  if (const char* root = std::getenv("OWR_OUTPUT_ROOT"); root && *root) return root;
  return "owr_runs";
}

Dataset load_dataset(const DatasetSource& source) {
  if (source.kind == DatasetSource::Kind::synthetic) return gen_synthetic(source.synthetic).data;
  if (!std::filesystem::exists(source.csv_path)) throw ConfigError("dataset file not found: " + source.csv_path);
  Dataset d = load_feature_csv(source.csv_path, source.csv_schema);
  if (source.csv_schema.split_column < 0) assign_split(d, source.csv_test_fraction, source.csv_split_seed);
  return d;
}

// ---- single experiment --------------------------------------------------------

RunSeeds make_run_seeds(const ExperimentConfig& config, std::uint64_t order_seed, int run) {
  RunSeeds s;
  s.order_seed = order_seed;
  s.run = run;
  s.train_seed = derive_seed(config.training.seed, {order_seed, static_cast<std::uint64_t>(run)});
  s.init_seed = derive_seed(s.train_seed, {0x1417});
  return s;
}

ExperimentResult run_experiment(const ExperimentConfig& config, const Dataset& data, std::uint64_t order_seed, int run,
                                const StepHook& hook) {
  ExperimentResult res;
  res.seeds = make_run_seeds(config, order_seed, run);
  res.schedule = make_schedule(data.catalog, config.schedule.n_known, config.schedule.initial, config.schedule.step,
                               order_seed);
  TrainConfig tc = config.training;
  tc.seed = res.seeds.train_seed;
  ExtractorConfig ec;
  ec.input_dim = data.dim();
  ec.layer_dims = config.layer_dims;
  ec.activation = config.activation;
  ec.init_seed = res.seeds.init_seed;
  res.model = make_model(config.method, ec, tc);

  json embedded = {{"config", json::parse(replay_config_json(config))}, {"seeds", seeds_object(res.seeds)}};
  const std::string embedded_text = embedded.dump();
  const Matrix unknown = data.select(Split::test, res.schedule.unknown_pool).inputs;

  for (int t = 0; t < res.schedule.steps(); ++t) {
    const auto& fresh = res.schedule.class_sets[static_cast<std::size_t>(t)];
    const StepReport sr = run_incremental_step(res.model, res.schedule, t, data.select(Split::train, fresh), tc);
    res.log.insert(res.log.end(), sr.log.begin(), sr.log.end());

    StepOutcome out;
    const auto known = res.schedule.known_at(t);
    out.report = evaluate_step(res.model, data.select(Split::test, known), unknown);
    out.checksum = parameter_checksum(res.model.extractor);
    if (t > 0 && sr.previous) {
      const std::set<ClassId> fresh_set(fresh.begin(), fresh.end());
      std::vector<ClassId> old;
      for (ClassId c : known)
        if (!fresh_set.count(c)) old.push_back(c);
      LabeledData rows = LabeledData::concat(res.model.memory.gather(Partition::rehearsal, old),
                                             res.model.memory.gather(Partition::heldout, old));
      if (!rows.empty()) out.median_drift = median(feature_drift(sr.previous.model(), res.model.extractor, rows.inputs));
    }
    res.steps.push_back(out);
    res.checkpoints.push_back(checkpoint_to_json(res.model, embedded_text));
    if (hook) hook(res.model, sr, t);
  }
  std::vector<MetricsReport> reports;
  for (const auto& s : res.steps) reports.push_back(s.report);
  res.average = average_reports(reports);
  return res;
}

SuiteResult run_suite(const ExperimentConfig& config, const Dataset& data) {
  config.validate();
  return summarize(run_all(config, data));
}

// ---- artifacts ------------------------------------------------------------------

std::string report_json(const MetricsReport& report) { return report_object(report).dump(); }

std::string reports_table(std::span<const MetricsReport> reports, const MetricsReport* average) {
  std::vector<std::vector<std::string>> rows{
      {"step", "known", "cw_no_rej", "cw_rej", "open_set", "owr", "owr_h", "known_rej", "diff"}};
  auto row = [](const std::string& label, const MetricsReport& r) {
    return std::vector<std::string>{label,         std::to_string(r.known_classes), fixed(r.cw_no_rej),
                                    fixed(r.cw_rej), fixed(r.open_set_acc),         fixed(r.owr),
                                    fixed(r.owr_h),  fixed(r.known_rejection_rate), fixed(r.rejection_diff)};
  };
  for (const auto& r : reports) rows.push_back(row(std::to_string(r.step), r));
  if (average) {
    auto avg = row("avg", *average);
    avg[1] = "-";
    rows.push_back(avg);
  }
  return render_table(rows);
}

void write_suite(const std::filesystem::path& dir, const ExperimentConfig& config, const SuiteResult& suite) {
  const json replay = json::parse(replay_config_json(config));
  std::size_t index = 0;
  for (const auto& e : suite.experiments) {
    const std::size_t order_index = index / static_cast<std::size_t>(config.schedule.runs);
    const auto sub = dir / ("order" + std::to_string(order_index) + "_run" + std::to_string(e.seeds.run));
    ++index;
    const json header = {{"record", "config"},
                         {"config", replay},
                         {"seeds", seeds_object(e.seeds)},
                         {"schedule", json::parse(schedule_to_json(e.schedule))}};

    std::string metrics = header.dump() + "\n";
    std::vector<MetricsReport> reports;
    for (const auto& s : e.steps) {
      json rec = report_object(s.report);
      rec["record"] = "step";
      rec["median_drift"] = optional_json(s.median_drift);
      rec["checksum"] = hex(s.checksum);
      metrics += rec.dump() + "\n";
      reports.push_back(s.report);
    }
    json avg = report_object(e.average);
    avg["record"] = "average";
    avg.erase("step");
    avg.erase("known_classes");
    metrics += avg.dump() + "\n";
    write_text_atomic(sub / "metrics.jsonl", metrics);

    const std::string comment = "# " + header.dump() + "\n";
    write_text_atomic(sub / "metrics.txt", comment + reports_table(reports, &e.average));
    write_text_atomic(sub / "plot.tsv", comment + plot_tsv(reports));

    std::string log = header.dump() + "\n";
    for (const auto& l : e.log)
      log += json{{"record", "batch"},
                  {"step", l.step},
                  {"epoch", l.epoch},
                  {"batch", l.batch},
                  {"loss", l.loss},
                  {"global", l.global},
                  {"local", l.local},
                  {"distill", l.distill},
                  {"temperature", l.temperature},
                  {"global_variance", l.global_variance},
                  {"skipped_anchors", l.skipped_anchors},
                  {"tau", l.tau}}
                 .dump() +
             "\n";
    write_text_atomic(sub / "train_log.jsonl", log);
    for (std::size_t t = 0; t < e.checkpoints.size(); ++t)
      write_text_atomic(sub / ("checkpoint_step" + std::to_string(t) + ".json"), e.checkpoints[t]);
    write_text_atomic(sub / "schedule.json", schedule_to_json(e.schedule));
  }

  json seeds = json::array();
  for (const auto& e : suite.experiments) seeds.push_back(seeds_object(e.seeds));
  const json header = {{"record", "config"}, {"config", replay}, {"experiments", seeds}};
  std::string summary = header.dump() + "\n";
  for (const auto& r : suite.per_step) {
    json rec = report_object(r);
    rec["record"] = "step_mean";
    summary += rec.dump() + "\n";
  }
  json avg = report_object(suite.average);
  avg["record"] = "average";
  avg.erase("step");
  avg.erase("known_classes");
  summary += avg.dump() + "\n";
  write_text_atomic(dir / "summary.jsonl", summary);
  const std::string comment = "# " + header.dump() + "\n";
  write_text_atomic(dir / "summary.txt", comment + reports_table(suite.per_step, &suite.average));
  write_text_atomic(dir / "summary_plot.tsv", comment + plot_tsv(suite.per_step));
}

// ---- ablations and comparison -------------------------------------------------

std::vector<LossAblationRow> ablate_losses(const ExperimentConfig& config, const Dataset& data) {
  config.validate();
  const double gamma = config.training.weights.gamma;
  std::vector<LossAblationRow> rows{{"GC", {1, 0, gamma}, {}, 0, {}},
                                    {"LC", {0, 1, gamma}, {}, 0, {}},
                                    {"GC+LC", {1, 1, gamma}, {}, 0, {}}};
  for (auto& row : rows) {
    ExperimentConfig c = config;
    c.method = Method::ours;
    c.training.weights = row.weights;
    const SuiteResult suite = run_suite(c, data);
    for (const auto& r : suite.per_step) row.owr_per_step.push_back(r.owr.value_or(std::nan("")));
    row.owr_h_average = suite.average.owr_h.value_or(std::nan(""));
    for (const auto& e : suite.experiments) row.owr_per_experiment.push_back(e.average.owr.value_or(std::nan("")));
  }
  return rows;
}

std::vector<RejectionAblationRow> ablate_rejection(const ExperimentConfig& config, const Dataset& data) {
  ExperimentConfig c = config;
  c.method = Method::ours;
  c.training.threshold_mode = ThresholdMode::class_specific;
  c.training.threshold_source = ThresholdSource::heldout;
  c.validate();

  std::vector<RejectionAblationRow> rows{
      {"class-specific two-stage", 0, 0, 0, {}, {}},
      {"class-specific single-stage", 0, 0, 0, {}, {}},
      {"global two-stage", 0, 0, 0, {}, {}},
      {"heuristic (DeepNNO)", 0, 0, 0, {}, {}}};
  constexpr std::size_t kRows = 4;

  struct PerExperiment {
    std::array<std::vector<double>, kRows> known, open, diff;
    std::array<std::vector<std::uint64_t>, kRows> checksums;
  };
  const auto ids = experiment_ids(c);
  std::vector<PerExperiment> stats(ids.size());

  parallel_for(static_cast<int>(ids.size()), c.workers, [&](int i) {
    const auto [order_seed, run] = ids[static_cast<std::size_t>(i)];
    const EpisodeSchedule schedule =
        make_schedule(data.catalog, c.schedule.n_known, c.schedule.initial, c.schedule.step, order_seed);
    const Matrix unknown = data.select(Split::test, schedule.unknown_pool).inputs;
    TrainConfig tc = c.training;
    tc.seed = make_run_seeds(c, order_seed, run).train_seed;
    auto& st = stats[static_cast<std::size_t>(i)];

    auto hook = [&](const OwrModel& trained, const StepReport& sr, int t) {
      const LabeledData known_test = data.select(Split::test, schedule.known_at(t));
      std::array<OwrModel, kRows> variants{trained, trained, trained, trained};

      TrainConfig single = tc;
      single.threshold_source = ThresholdSource::training;
      stage2_learn_thresholds(variants[1], threshold_samples(variants[1], sr, ThresholdSource::training), single);

      TrainConfig global = tc;
      global.threshold_mode = ThresholdMode::global;
      stage2_learn_thresholds(variants[2], threshold_samples(variants[2], sr, ThresholdSource::heldout), global);

      auto& heuristic = variants[3];
      heuristic.method = Method::deepnno;
      const LabeledData train = threshold_samples(heuristic, sr, ThresholdSource::training);
      heuristic.tau = fit_heuristic_tau(heuristic, heuristic.features(train.inputs), train.labels,
                                        {tc.deepnno_initial_tau, tc.deepnno_step_fraction * tc.deepnno_initial_tau},
                                        tc.threshold_epochs, derive_seed(tc.seed, {static_cast<std::uint64_t>(t), 0x4e40}));

      for (std::size_t k = 0; k < kRows; ++k) {
        const RejectionRates rates = rejection_rate_diff(variants[k], known_test, unknown);
        if (rates.known_rejection_rate) st.known[k].push_back(*rates.known_rejection_rate);
        st.open[k].push_back(rates.open_set_acc);
        if (rates.diff) st.diff[k].push_back(*rates.diff);
        st.checksums[k].push_back(parameter_checksum(variants[k].extractor));
      }
    };
    run_experiment(c, data, order_seed, run, hook);
  });

  for (std::size_t k = 0; k < kRows; ++k) {
    std::vector<double> known, open;
    for (const auto& st : stats) {
      known.push_back(mean(st.known[k]));
      open.push_back(mean(st.open[k]));
      rows[k].diff_per_experiment.push_back(mean(st.diff[k]));
      rows[k].checksums.insert(rows[k].checksums.end(), st.checksums[k].begin(), st.checksums[k].end());
    }
    rows[k].known_rejection_rate = mean(known);
    rows[k].open_set_acc = mean(open);
    rows[k].diff = mean(rows[k].diff_per_experiment);
  }
  return rows;
}

std::string loss_ablation_table(std::span<const LossAblationRow> rows) {
  std::vector<std::vector<std::string>> out;
  std::vector<std::string> head{"losses"};
  const std::size_t steps = rows.empty() ? 0 : rows.front().owr_per_step.size();
  for (std::size_t t = 0; t < steps; ++t) head.push_back("owr@" + std::to_string(t));
  head.push_back("owr_h avg");
  out.push_back(head);
  for (const auto& r : rows) {
    std::vector<std::string> line{r.name};
    for (double v : r.owr_per_step) line.push_back(fixed(v));
    line.push_back(fixed(r.owr_h_average));
    out.push_back(line);
  }
  return render_table(out);
}

std::string rejection_ablation_table(std::span<const RejectionAblationRow> rows) {
  std::vector<std::vector<std::string>> out{{"rejection", "known_rej", "unknown_rej", "diff", "extractor"}};
  for (const auto& r : rows)
    out.push_back({r.name, fixed(r.known_rejection_rate), fixed(r.open_set_acc), fixed(r.diff),
                   r.checksums.empty() ? "-" : hex(r.checksums.front())});
  return render_table(out);
}

std::vector<ComparisonRow> compare_methods(const ExperimentConfig& config, const Dataset& data) {
  std::vector<ComparisonRow> rows;
  for (Method m : {Method::ours, Method::nno, Method::deepnno}) {
    ExperimentConfig c = config;
    c.method = m;
    rows.push_back({m, run_suite(c, data)});
  }
  return rows;
}

std::string comparison_table(std::span<const ComparisonRow> rows) {
  std::vector<std::vector<std::string>> out{{"method", "cw_no_rej", "cw_rej", "open_set", "owr", "owr_h"}};
  for (const auto& r : rows) {
    const auto& a = r.suite.average;
    out.push_back({to_string(r.method), fixed(a.cw_no_rej), fixed(a.cw_rej), fixed(a.open_set_acc), fixed(a.owr),
                   fixed(a.owr_h)});
  }
  return render_table(out);
}

MetricsReport evaluate_checkpoint(const OwrModel& model, const Dataset& data, const EpisodeSchedule& schedule,
                                  std::optional<double> delta_override) {
  if (model.step < 0 || model.step >= schedule.steps())
    throw ConfigError("checkpoint step " + std::to_string(model.step) + " is outside the schedule");
  const auto known = schedule.known_at(model.step);
  auto sorted = known;
  std::sort(sorted.begin(), sorted.end());
  if (sorted != model.known_classes())
    throw ConfigError("checkpoint classes do not match the schedule at step " + std::to_string(model.step));
  OwrModel m = model;
  if (delta_override) {
    if (std::isnan(*delta_override) || *delta_override < 0) throw ConfigError("delta override must be >= 0");
    for (auto& c : m.classes) c.threshold = *delta_override;
    if (m.method != Method::ours) {
      if (*delta_override <= 0) throw ConfigError("delta override must be > 0 for threshold-based baselines");
      m.tau.tau = *delta_override;
    }
  }
  return evaluate_step(m, data.select(Split::test, known), data.select(Split::test, schedule.unknown_pool).inputs);
}

}  // namespace owr
