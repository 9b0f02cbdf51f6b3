#include <doctest.h>

#include "owr/checkpoint.hpp"
#include "owr/evaluation.hpp"
#include "owr/io.hpp"

#include <filesystem>
#include <limits>

using namespace owr;

namespace {

OwrModel trained_model(Method method) {
  SyntheticSpec spec;
  spec.n_classes = 6;
  spec.dim = 3;
  spec.samples_per_class = 30;
  spec.seed = 4;
  const auto data = gen_synthetic(spec).data;
  const auto schedule = make_schedule(data.catalog, 4, 2, 2, 1);
  ExtractorConfig ec;
  ec.input_dim = 3;
  ec.layer_dims = {8, 4};
  ec.init_seed = 3;
  TrainConfig tc;
  tc.epochs_initial = 2;
  tc.epochs_incremental = 1;
  tc.batch_size = 16;
  tc.threshold_epochs = 3;
  auto model = make_model(method, ec, tc);
  for (int t = 0; t < schedule.steps(); ++t)
    run_incremental_step(model, schedule, t, data.select(Split::train, schedule.class_sets[t]), tc);
  return model;
}

}  // namespace

TEST_CASE("checkpoint round trip is bit exact") {
  for (Method method : {Method::ours, Method::nno, Method::deepnno}) {
    auto model = trained_model(method);
    model.classes.back().threshold = std::numeric_limits<double>::infinity();
    const std::string text = checkpoint_to_json(model, R"({"note": 1})");
    std::string experiment;
    const auto back = checkpoint_from_json(text, &experiment);
    CHECK(experiment.find("note") != std::string::npos);
    CHECK(checkpoint_to_json(back, R"({"note": 1})") == text);

    CHECK(back.method == model.method);
    CHECK(back.step == model.step);
    CHECK(parameter_checksum(back.extractor) == parameter_checksum(model.extractor));
    REQUIRE(back.classes.size() == model.classes.size());
    for (std::size_t k = 0; k < model.classes.size(); ++k) {
      CHECK(back.classes[k].class_id == model.classes[k].class_id);
      CHECK(back.classes[k].count == model.classes[k].count);
      CHECK(back.classes[k].centroid == model.classes[k].centroid);
      CHECK(back.classes[k].threshold == model.classes[k].threshold);
    }
    CHECK(std::isinf(back.classes.back().threshold));
    CHECK(back.variance.count == model.variance.count);
    CHECK(back.variance.m2 == model.variance.m2);
    CHECK(back.tau.tau == model.tau.tau);
    CHECK(back.memory.total() == model.memory.total());
    for (const auto& [c, v] : model.memory.classes) {
      const auto& w = back.memory.classes.at(c);
      REQUIRE(w.size() == v.size());
      for (std::size_t i = 0; i < v.size(); ++i) {
        CHECK(w[i].id == v[i].id);
        CHECK(w[i].partition == v[i].partition);
        CHECK(w[i].input == v[i].input);
      }
    }
    const Matrix probe = Matrix::Random(20, 3) * 4.0;
    const Matrix fa = model.features(probe), fb = back.features(probe);
    CHECK(fa == fb);
    for (Eigen::Index i = 0; i < probe.rows(); ++i)
      CHECK(model.classify(fa.row(i)).label == back.classify(fb.row(i)).label);
  }
}

TEST_CASE("checkpoint files and errors") {
  const auto dir = std::filesystem::temp_directory_path() / "owr_test_checkpoint";
  std::filesystem::remove_all(dir);
  const auto model = trained_model(Method::ours);
  const auto path = dir / "nested" / "model.json";
  save_checkpoint(path, model);
  CHECK(std::filesystem::exists(path));
  CHECK_FALSE(std::filesystem::exists(path.string() + ".tmp"));
  const auto back = load_checkpoint(path);
  CHECK(parameter_checksum(back.extractor) == parameter_checksum(model.extractor));

  std::string text = read_text(path);
  const std::string key = "\"version\": 1";
  const auto at = text.find(key);
  REQUIRE(at != std::string::npos);
  text.replace(at, key.size(), "\"version\": 7");
  try {
    checkpoint_from_json(text);
    FAIL("expected a version error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("version mismatch (expected 1, found 7)") != std::string::npos);
  }
  CHECK_THROWS_AS(checkpoint_from_json(read_text(path).substr(0, 200)), ConfigError);
  CHECK_THROWS_AS(checkpoint_from_json(R"({"format": "other", "version": 1})"), ConfigError);
  CHECK_THROWS_AS(load_checkpoint(dir / "absent.json"), ConfigError);
}
