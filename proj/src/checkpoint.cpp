#include "owr/checkpoint.hpp"

#include "owr/io.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <limits>

namespace owr {

using nlohmann::json;

namespace {

json vector_json(const Eigen::Ref<const Vector>& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Vector vector_from(const json& j) {
  const auto values = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
}

json matrix_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) rows.push_back(vector_json(m.row(r).transpose()));
  return rows;
}

Matrix matrix_from(const json& j, Eigen::Index cols) {
  Matrix m(static_cast<Eigen::Index>(j.size()), cols);
  for (std::size_t r = 0; r < j.size(); ++r) {
    const Vector row = vector_from(j[r]);
    if (row.size() != cols) throw ConfigError("checkpoint: ragged matrix");
    m.row(static_cast<Eigen::Index>(r)) = row.transpose();
  }
  return m;
}

json real_json(double v) {
  if (std::isinf(v) && v > 0) return "inf";
  return v;
}

double real_from(const json& j) {
  if (j.is_string() && j.get<std::string>() == "inf") return std::numeric_limits<double>::infinity();
  return j.get<double>();
}

}  // namespace

std::string checkpoint_to_json(const OwrModel& model, const std::string& experiment_json) {
  json j;
  j["format"] = "owr-checkpoint";
  j["version"] = kCheckpointVersion;
  j["step"] = model.step;
  j["method"] = to_string(model.method);

  const auto& cfg = model.extractor.config();
  json ex;
  ex["input_dim"] = cfg.input_dim;
  ex["layer_dims"] = cfg.layer_dims;
  ex["activation"] = cfg.activation == Activation::relu ? "relu" : "identity";
  ex["init_seed"] = cfg.init_seed;
  json layers = json::array();
  for (const auto& l : model.extractor.parameters())
    layers.push_back({{"weight", matrix_json(l.weight)}, {"bias", vector_json(l.bias)}});
  ex["layers"] = layers;
  j["extractor"] = ex;

  json classes = json::array();
  for (const auto& c : model.classes)
    classes.push_back({{"id", c.class_id},
                       {"count", c.count},
                       {"threshold", real_json(c.threshold)},
                       {"centroid", vector_json(c.centroid)}});
  j["classes"] = classes;
  j["variance"] = {{"count", model.variance.count}, {"mean", model.variance.mean}, {"m2", model.variance.m2}};
  j["rejection"] = {{"strict", model.strict_accept},
                    {"tau", real_json(model.tau.tau)},
                    {"tau_step", model.tau.step},
                    {"z", model.nno_z},
                    {"distance", model.nno_distance == DistanceKind::euclidean ? "euclidean" : "squared"}};

  json mem;
  mem["budget"] = model.memory.budget;
  mem["heldout_fraction"] = model.memory.heldout_fraction;
  json mem_classes = json::array();
  for (const auto& [c, stored] : model.memory.classes) {
    json ex_list = json::array();
    for (const auto& e : stored)
      ex_list.push_back({{"id", e.id},
                         {"partition", e.partition == Partition::heldout ? "heldout" : "rehearsal"},
                         {"input", vector_json(e.input.transpose())}});
    mem_classes.push_back({{"id", c}, {"exemplars", ex_list}});
  }
  mem["classes"] = mem_classes;
  j["memory"] = mem;
  if (!experiment_json.empty()) j["experiment"] = json::parse(experiment_json);
  return j.dump(1) + "\n";
}

OwrModel checkpoint_from_json(const std::string& text, std::string* experiment_json) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("checkpoint: ") + e.what());
  }
  if (j.value("format", "") != "owr-checkpoint") throw ConfigError("checkpoint: not an owr checkpoint");
  const int version = j.value("version", -1);
  if (version != kCheckpointVersion)
    throw ConfigError("checkpoint: version mismatch (expected " + std::to_string(kCheckpointVersion) + ", found " +
                      std::to_string(version) + ")");
  try {
    OwrModel m;
    m.step = j.at("step").get<int>();
    m.method = method_from_string(j.at("method").get<std::string>());

    const auto& ex = j.at("extractor");
    ExtractorConfig cfg;
    cfg.input_dim = ex.at("input_dim").get<int>();
    cfg.layer_dims = ex.at("layer_dims").get<std::vector<int>>();
    cfg.activation = ex.at("activation").get<std::string>() == "relu" ? Activation::relu : Activation::identity;
    cfg.init_seed = ex.at("init_seed").get<std::uint64_t>();
    ParameterSet<double> params;
    int fan_in = cfg.input_dim;
    for (const auto& l : ex.at("layers")) {
      params.push_back({matrix_from(l.at("weight"), fan_in), vector_from(l.at("bias"))});
      fan_in = static_cast<int>(params.back().weight.rows());
    }
    m.extractor = Extractor(cfg, std::move(params));

    for (const auto& c : j.at("classes")) {
      ClassStats<double> s;
      s.class_id = c.at("id").get<ClassId>();
      s.count = c.at("count").get<std::int64_t>();
      s.threshold = real_from(c.at("threshold"));
      s.centroid = vector_from(c.at("centroid"));
      if (s.centroid.size() != cfg.feature_dim()) throw ConfigError("checkpoint: centroid dimension mismatch");
      m.classes.push_back(std::move(s));
    }
    const auto& v = j.at("variance");
    m.variance = {v.at("count").get<std::int64_t>(), v.at("mean").get<double>(), v.at("m2").get<double>()};
    const auto& r = j.at("rejection");
    m.strict_accept = r.at("strict").get<bool>();
    m.tau = {real_from(r.at("tau")), r.at("tau_step").get<double>()};
    m.nno_z = r.at("z").get<double>();
    m.nno_distance = r.at("distance").get<std::string>() == "squared" ? DistanceKind::squared : DistanceKind::euclidean;

    const auto& mem = j.at("memory");
    m.memory.budget = mem.at("budget").get<int>();
    m.memory.heldout_fraction = mem.at("heldout_fraction").get<double>();
    for (const auto& c : mem.at("classes")) {
      const ClassId id = c.at("id").get<ClassId>();
      auto& stored = m.memory.classes[id];
      for (const auto& e : c.at("exemplars")) {
        Exemplar x;
        x.label = id;
        x.id = e.at("id").get<std::int64_t>();
        x.partition = e.at("partition").get<std::string>() == "heldout" ? Partition::heldout : Partition::rehearsal;
        x.input = vector_from(e.at("input")).transpose();
        stored.push_back(std::move(x));
      }
    }
    if (experiment_json) *experiment_json = j.contains("experiment") ? j["experiment"].dump() : std::string{};
    return m;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("checkpoint: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const OwrModel& model, const std::string& experiment_json) {
  write_text_atomic(path, checkpoint_to_json(model, experiment_json));
}

OwrModel load_checkpoint(const std::filesystem::path& path, std::string* experiment_json) {
  return checkpoint_from_json(read_text(path), experiment_json);
}

}  // namespace owr
