// Command-line driver: owr {config init, run, eval, ablate, compare}.

#include "owr/checkpoint.hpp"
#include "owr/experiment.hpp"
#include "owr/io.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <iostream>
#include <optional>

namespace {

using namespace owr;

struct CommonOptions {
  std::string config;
  std::string output;
  int workers = 0;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("-c,--config", o.config, "experiment config (JSON)")->required();
  cmd->add_option("-o,--output", o.output, "output directory (overrides the config)");
  cmd->add_option("-j,--workers", o.workers, "parallel experiments (overrides the config)");
  cmd->add_option("--seed", o.seed, "training seed override");
}

ExperimentConfig resolve(const CommonOptions& o) {
  ExperimentConfig c = load_config(o.config);
  if (!o.output.empty()) c.output_dir = o.output;
  if (o.workers > 0) c.workers = o.workers;
  if (o.seed) c.training.seed = *o.seed;
  c.validate();
  return c;
}

int cmd_config_init(const std::string& out) {
  const std::string text = config_to_json(default_experiment_config());
  if (out.empty())
    std::cout << text;
  else
    write_text_atomic(out, text);
  return 0;
}

int cmd_run(const CommonOptions& o) {
  const ExperimentConfig c = resolve(o);
  const Dataset data = load_dataset(c.dataset);
  const SuiteResult suite = run_suite(c, data);
  const auto dir = resolve_output_dir(c);
  write_suite(dir, c, suite);
  std::cout << reports_table(suite.per_step, &suite.average) << "written to " << dir.string() << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, std::string config_path, std::string schedule_path,
             const std::optional<std::string>& delta, const std::string& out) {
  std::string embedded;
  const OwrModel model = load_checkpoint(checkpoint, &embedded);
  ExperimentConfig c;
  if (!config_path.empty()) {
    c = load_config(config_path);
  } else {
    if (embedded.empty()) throw ConfigError("checkpoint carries no config; pass --config");
    c = config_from_json(nlohmann::json::parse(embedded).at("config").dump());
  }
  if (schedule_path.empty())
    schedule_path = (std::filesystem::path(checkpoint).parent_path() / "schedule.json").string();
  const EpisodeSchedule schedule = load_schedule(schedule_path);
  std::optional<double> override_value;
  if (delta) {
    try {
      override_value = std::stod(*delta);
    } catch (const std::exception&) {
      throw ConfigError("--delta-override: not a number: " + *delta);
    }
  }
  const MetricsReport report = evaluate_checkpoint(model, load_dataset(c.dataset), schedule, override_value);
  const std::string line = report_json(report) + "\n";
  std::cout << reports_table(std::span<const MetricsReport>(&report, 1), nullptr) << line;
  if (!out.empty()) write_text_atomic(out, line);
  return 0;
}

int cmd_ablate(const CommonOptions& o, const std::string& axis) {
  const ExperimentConfig c = resolve(o);
  const Dataset data = load_dataset(c.dataset);
  const auto dir = resolve_output_dir(c);
  std::string table;
  nlohmann::json rows = nlohmann::json::array();
  if (axis == "losses") {
    const auto result = ablate_losses(c, data);
    table = loss_ablation_table(result);
    for (const auto& r : result)
      rows.push_back({{"row", r.name},
                      {"global_weight", r.weights.global},
                      {"lambda", r.weights.lambda},
                      {"gamma", r.weights.gamma},
                      {"owr_per_step", r.owr_per_step},
                      {"owr_h_average", r.owr_h_average},
                      {"owr_per_experiment", r.owr_per_experiment}});
  } else {
    const auto result = ablate_rejection(c, data);
    table = rejection_ablation_table(result);
    for (const auto& r : result)
      rows.push_back({{"row", r.name},
                      {"known_rejection_rate", r.known_rejection_rate},
                      {"open_set_acc", r.open_set_acc},
                      {"diff", r.diff},
                      {"diff_per_experiment", r.diff_per_experiment},
                      {"checksums", r.checksums}});
  }
  const auto header = nlohmann::json{{"record", "config"}, {"axis", axis}, {"config", nlohmann::json::parse(replay_config_json(c))}};
  std::string jsonl = header.dump() + "\n";
  for (const auto& r : rows) jsonl += r.dump() + "\n";
  write_text_atomic(dir / ("ablate_" + axis + ".jsonl"), jsonl);
  write_text_atomic(dir / ("ablate_" + axis + ".txt"), "# " + header.dump() + "\n" + table);
  std::cout << table;
  return 0;
}

int cmd_compare(const CommonOptions& o) {
  const ExperimentConfig c = resolve(o);
  const Dataset data = load_dataset(c.dataset);
  const auto dir = resolve_output_dir(c);
  const auto rows = compare_methods(c, data);
  for (const auto& r : rows) {
    ExperimentConfig mc = c;
    mc.method = r.method;
    write_suite(dir / to_string(r.method), mc, r.suite);
  }
  const std::string table = comparison_table(rows);
  write_text_atomic(dir / "compare.txt",
                    "# " + nlohmann::json{{"config", nlohmann::json::parse(replay_config_json(c))}}.dump() + "\n" + table);
  std::cout << table;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Open world recognition with learned class-specific rejection"};
  app.require_subcommand(1);

  auto* config_cmd = app.add_subcommand("config", "configuration helpers");
  config_cmd->require_subcommand(1);
  auto* init = config_cmd->add_subcommand("init", "print the default configuration");
  std::string init_out;
  init->add_option("-o,--out", init_out, "write to a file instead of stdout");

  CommonOptions run_opts, ablate_opts, compare_opts;
  auto* run = app.add_subcommand("run", "train and evaluate every order and run of a config");
  add_common(run, run_opts);

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint without training");
  std::string checkpoint, eval_config, schedule, eval_out;
  std::optional<std::string> delta;
  eval->add_option("-k,--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("-c,--config", eval_config, "experiment config (default: the one stored in the checkpoint)");
  eval->add_option("-s,--schedule", schedule, "schedule file (default: schedule.json next to the checkpoint)");
  eval->add_option("--delta-override", delta, "replace every rejection radius, e.g. inf");
  eval->add_option("-o,--out", eval_out, "write the report record to a file");

  auto* ablate = app.add_subcommand("ablate", "loss or rejection ablation");
  add_common(ablate, ablate_opts);
  std::string axis;
  ablate->add_option("--axis", axis, "losses or rejection")->required()->check(CLI::IsMember({"losses", "rejection"}));

  auto* compare = app.add_subcommand("compare", "our method against NNO and DeepNNO");
  add_common(compare, compare_opts);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*init) return cmd_config_init(init_out);
    if (*run) return cmd_run(run_opts);
    if (*eval) return cmd_eval(checkpoint, eval_config, schedule, delta, eval_out);
    if (*ablate) return cmd_ablate(ablate_opts, axis);
    if (*compare) return cmd_compare(compare_opts);
  } catch (const owr::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
