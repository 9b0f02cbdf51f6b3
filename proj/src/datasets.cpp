#include "owr/datasets.hpp"

#include "owr/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

namespace owr {

namespace {

std::string location(const std::filesystem::path& path, std::size_t line) {
  return path.string() + ":" + std::to_string(line);
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(trim(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace

LabeledData LabeledData::subset(std::span<const Eigen::Index> rows) const {
  LabeledData out;
  out.inputs.resize(static_cast<Eigen::Index>(rows.size()), inputs.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.inputs.row(static_cast<Eigen::Index>(i)) = inputs.row(rows[i]);
    out.labels.push_back(labels[rows[i]]);
    out.ids.push_back(ids[rows[i]]);
  }
  return out;
}

LabeledData LabeledData::concat(const LabeledData& a, const LabeledData& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  if (a.inputs.cols() != b.inputs.cols()) throw ShapeError("concat: input dimension mismatch");
  LabeledData out;
  out.inputs.resize(a.size() + b.size(), a.inputs.cols());
  out.inputs << a.inputs, b.inputs;
  out.labels = a.labels;
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  out.ids = a.ids;
  out.ids.insert(out.ids.end(), b.ids.begin(), b.ids.end());
  return out;
}

LabeledData Dataset::select(Split split, std::span<const ClassId> classes) const {
  const std::set<ClassId> wanted(classes.begin(), classes.end());
  std::vector<Eigen::Index> rows;
  for (Eigen::Index i = 0; i < size(); ++i)
    if (splits[i] == split && (wanted.empty() || wanted.count(labels[i]))) rows.push_back(i);
  LabeledData out;
  out.inputs.resize(static_cast<Eigen::Index>(rows.size()), inputs.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.inputs.row(static_cast<Eigen::Index>(i)) = inputs.row(rows[i]);
    out.labels.push_back(labels[rows[i]]);
    out.ids.push_back(rows[i]);
  }
  return out;
}

void Dataset::validate() const {
  if (static_cast<Eigen::Index>(labels.size()) != size() || static_cast<Eigen::Index>(splits.size()) != size())
    throw ConfigError("dataset: labels/splits do not match the sample count");
  if (!inputs.allFinite()) throw ConfigError("dataset: non-finite input values");
  if (!std::is_sorted(catalog.begin(), catalog.end()) ||
      std::adjacent_find(catalog.begin(), catalog.end()) != catalog.end())
    throw ConfigError("dataset: catalog must be sorted and unique");
  for (ClassId l : labels)
    if (!std::binary_search(catalog.begin(), catalog.end(), l))
      throw ConfigError("dataset: label " + std::to_string(l) + " missing from catalog");
}

void SyntheticSpec::validate() const {
  if (n_classes < 2) throw ConfigError("synthetic: n_classes must be at least 2");
  if (dim < 1) throw ConfigError("synthetic: dim must be positive");
  if (generator == Generator::rings && dim < 2) throw ConfigError("synthetic: rings need dim >= 2");
  if (samples_per_class < 1) throw ConfigError("synthetic: samples_per_class must be positive");
  if (!(variance_low > 0) || !(variance_high >= variance_low))
    throw ConfigError("synthetic: variance range must satisfy 0 < low <= high");
  if (!(spacing > 0)) throw ConfigError("synthetic: spacing must be positive");
  if (!(test_fraction >= 0 && test_fraction < 1)) throw ConfigError("synthetic: test_fraction must be in [0,1)");
}

void assign_split(Dataset& data, double test_fraction, std::uint64_t seed) {
  data.splits.assign(static_cast<std::size_t>(data.size()), Split::train);
  for (ClassId c : data.catalog) {
    std::vector<Eigen::Index> rows;
    for (Eigen::Index i = 0; i < data.size(); ++i)
      if (data.labels[i] == c) rows.push_back(i);
    std::mt19937_64 rng(derive_seed(seed, {static_cast<std::uint64_t>(c), 0x5b117}));
    std::shuffle(rows.begin(), rows.end(), rng);
    const auto n_test = static_cast<std::size_t>(round_half_up(test_fraction * static_cast<double>(rows.size())));
    for (std::size_t i = 0; i < n_test && i < rows.size(); ++i) data.splits[rows[i]] = Split::test;
  }
}

SyntheticDataset gen_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  SyntheticDataset out;
  for (int k = 0; k < spec.n_classes; ++k)
    out.class_variances.push_back(spec.variance_low + (spec.variance_high - spec.variance_low) * unit(rng));

  const Eigen::Index n = static_cast<Eigen::Index>(spec.n_classes) * spec.samples_per_class;
  Dataset& d = out.data;
  d.inputs.resize(n, spec.dim);
  d.labels.reserve(static_cast<std::size_t>(n));

  Matrix centers(spec.n_classes, spec.dim);
  if (spec.generator == Generator::gaussian_blobs) {
    Matrix g(spec.dim, spec.n_classes);
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = gauss(rng);
    if (spec.n_classes <= spec.dim) {
      // Orthonormal directions scaled so every pair of centers is `spacing` apart.
      Matrix q = Eigen::HouseholderQR<Matrix>(g).householderQ() * Matrix::Identity(spec.dim, spec.n_classes);
      centers = q.transpose() * (spec.spacing / std::numbers::sqrt2);
    } else {
      for (int k = 0; k < spec.n_classes; ++k)
        centers.row(k) = g.col(k).normalized().transpose() * (spec.spacing / std::numbers::sqrt2);
    }
  }

  Eigen::Index row = 0;
  for (int k = 0; k < spec.n_classes; ++k) {
    const double sd = std::sqrt(out.class_variances[k]);
    for (int s = 0; s < spec.samples_per_class; ++s, ++row) {
      if (spec.generator == Generator::gaussian_blobs) {
        for (int j = 0; j < spec.dim; ++j) d.inputs(row, j) = centers(k, j) + sd * gauss(rng);
      } else {
        const double radius = spec.spacing * (k + 1) + sd * gauss(rng);
        const double angle = 2.0 * std::numbers::pi * unit(rng);
        d.inputs(row, 0) = radius * std::cos(angle);
        d.inputs(row, 1) = radius * std::sin(angle);
        for (int j = 2; j < spec.dim; ++j) d.inputs(row, j) = sd * gauss(rng);
      }
      d.labels.push_back(k);
    }
  }
  for (int k = 0; k < spec.n_classes; ++k) d.catalog.push_back(k);
  assign_split(d, spec.test_fraction, spec.seed);
  d.validate();
  return out;
}

Dataset load_feature_csv(const std::filesystem::path& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open dataset file " + path.string());
  Dataset d;
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t line_no = 0;
  std::size_t columns = 0;
  bool header_pending = schema.has_header;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto fields = split_fields(line);
    if (columns == 0) {
      columns = fields.size();
      const std::size_t reserved = 1 + (schema.split_column >= 0 ? 1 : 0);
      if (columns <= reserved) throw ConfigError(location(path, line_no) + ": no feature columns");
      if (schema.label_column < 0 || static_cast<std::size_t>(schema.label_column) >= columns ||
          (schema.split_column >= 0 && static_cast<std::size_t>(schema.split_column) >= columns) ||
          schema.split_column == schema.label_column)
        throw ConfigError(location(path, line_no) + ": schema columns out of range");
    } else if (fields.size() != columns) {
      throw ConfigError(location(path, line_no) + ": expected " + std::to_string(columns) + " columns, found " +
                        std::to_string(fields.size()));
    }
    if (header_pending) {
      header_pending = false;
      for (const auto& f : fields)
        if (f.empty()) throw ConfigError(location(path, line_no) + ": malformed header (empty column name)");
      continue;
    }
    std::vector<double> values;
    for (std::size_t c = 0; c < fields.size(); ++c) {
      const auto f = fields[c];
      if (static_cast<int>(c) == schema.label_column) {
        ClassId label = 0;
        auto [p, ec] = std::from_chars(f.data(), f.data() + f.size(), label);
        if (ec != std::errc() || p != f.data() + f.size() || f.empty())
          throw ConfigError(location(path, line_no) + ": label '" + std::string(f) + "' is not an integer");
        d.labels.push_back(label);
      } else if (static_cast<int>(c) == schema.split_column) {
        if (f == "train") d.splits.push_back(Split::train);
        else if (f == "test") d.splits.push_back(Split::test);
        else throw ConfigError(location(path, line_no) + ": split must be 'train' or 'test'");
      } else {
        double v = 0;
        auto [p, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
        if (f.empty() || ec != std::errc() || p != f.data() + f.size())
          throw ConfigError(location(path, line_no) + ": column " + std::to_string(c + 1) + " value '" +
                            std::string(f) + "' is not numeric");
        if (!std::isfinite(v))
          throw ConfigError(location(path, line_no) + ": column " + std::to_string(c + 1) + " is not finite");
        values.push_back(v);
      }
    }
    rows.push_back(std::move(values));
  }
  if (header_pending && columns == 0) throw ConfigError(path.string() + ": empty file");
  if (rows.empty()) throw ConfigError(path.string() + ": no data rows");
  d.inputs.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c)
      d.inputs(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
  if (schema.split_column < 0) d.splits.assign(rows.size(), Split::train);
  std::set<ClassId> cat(d.labels.begin(), d.labels.end());
  d.catalog.assign(cat.begin(), cat.end());
  d.validate();
  return d;
}

void write_feature_csv(const std::filesystem::path& path, const Dataset& data, bool with_split_column) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << "label";
  for (int j = 0; j < data.dim(); ++j) out << ",f" << j;
  if (with_split_column) out << ",split";
  out << '\n';
  for (Eigen::Index i = 0; i < data.size(); ++i) {
    out << data.labels[i];
    for (int j = 0; j < data.dim(); ++j) out << ',' << format_double(data.inputs(i, j));
    if (with_split_column) out << ',' << (data.splits[i] == Split::train ? "train" : "test");
    out << '\n';
  }
}

std::vector<ClassId> EpisodeSchedule::known_at(int t) const {
  if (t < 0 || t >= steps()) throw ConfigError("schedule: step " + std::to_string(t) + " out of range");
  std::vector<ClassId> out;
  for (int i = 0; i <= t; ++i) out.insert(out.end(), class_sets[i].begin(), class_sets[i].end());
  std::sort(out.begin(), out.end());
  return out;
}

void EpisodeSchedule::validate() const {
  if (class_sets.empty()) throw ConfigError("schedule: no class sets");
  std::set<ClassId> seen;
  for (const auto& set : class_sets) {
    if (set.empty()) throw ConfigError("schedule: empty class set");
    for (ClassId c : set)
      if (!seen.insert(c).second) throw ConfigError("schedule: class " + std::to_string(c) + " repeated");
  }
  for (ClassId c : unknown_pool)
    if (!seen.insert(c).second) throw ConfigError("schedule: unknown class " + std::to_string(c) + " is also known");
}

EpisodeSchedule make_schedule(std::span<const ClassId> catalog, int n_known, int initial_classes, int step_size,
                              std::uint64_t order_seed) {
  const int total = static_cast<int>(catalog.size());
  if (n_known < 1 || n_known + 1 > total)
    throw ConfigError("schedule: need 1 <= n_known < number of classes (" + std::to_string(total) + ")");
  if (initial_classes < 1 || initial_classes > n_known)
    throw ConfigError("schedule: initial classes must be in [1, n_known]");
  if (step_size < 1 || (n_known - initial_classes) % step_size != 0)
    throw ConfigError("schedule: n_known - initial classes must be divisible by the step size");
  std::vector<ClassId> order(catalog.begin(), catalog.end());
  std::mt19937_64 rng(order_seed);
  std::shuffle(order.begin(), order.end(), rng);

  EpisodeSchedule s;
  s.seed = order_seed;
  s.class_sets.emplace_back(order.begin(), order.begin() + initial_classes);
  for (int start = initial_classes; start < n_known; start += step_size)
    s.class_sets.emplace_back(order.begin() + start, order.begin() + start + step_size);
  s.unknown_pool.assign(order.begin() + n_known, order.end());
  return s;
}

std::string schedule_to_json(const EpisodeSchedule& schedule) {
  nlohmann::json j;
  j["format"] = "owr-schedule";
  j["version"] = 1;
  j["seed"] = schedule.seed;
  j["class_sets"] = schedule.class_sets;
  j["unknown_pool"] = schedule.unknown_pool;
  return j.dump(2) + "\n";
}

EpisodeSchedule schedule_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("schedule: ") + e.what());
  }
  EpisodeSchedule s;
  try {
    s.seed = j.at("seed").get<std::uint64_t>();
    s.class_sets = j.at("class_sets").get<std::vector<std::vector<ClassId>>>();
    s.unknown_pool = j.at("unknown_pool").get<std::vector<ClassId>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("schedule: ") + e.what());
  }
  s.validate();
  return s;
}

void save_schedule(const std::filesystem::path& path, const EpisodeSchedule& schedule) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << schedule_to_json(schedule);
}

EpisodeSchedule load_schedule(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open schedule file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return schedule_from_json(ss.str());
}

}  // namespace owr
