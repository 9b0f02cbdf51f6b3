// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.
// Usage: acceptance <owr binary> <configs dir> <scratch dir>

#include "gradcheck.hpp"
#include "owr/evaluation.hpp"
#include "owr/experiment.hpp"
#include "owr/io.hpp"
#include "owr/losses.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

using namespace owr;
using owr::testing::numeric_gradient;
using owr::testing::random_matrix;
using owr::testing::relative_error;
namespace fs = std::filesystem;

namespace {

constexpr int kSeeds = 5;
constexpr int kInstances = 100;
constexpr double kGradTol = 1e-4;
constexpr double kMargin = 1e-3;

int failures = 0;

void verdict(int id, bool ok, const std::string& detail) {
  std::printf("%s criterion %d: %s\n", ok ? "PASS" : "FAIL", id, detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

double median_of(std::vector<double> v) { return median(std::move(v)); }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<ClassStats<double>> centroids_from(const Matrix& rows) {
  std::vector<ClassStats<double>> out;
  for (Eigen::Index k = 0; k < rows.rows(); ++k) {
    ClassStats<double> c(static_cast<ClassId>(k), rows.cols());
    c.centroid = rows.row(k).transpose();
    c.count = 1;
    out.push_back(c);
  }
  return out;
}

using Span = std::span<const ClassStats<double>>;

// Worst relative error over `kInstances` accepted draws of `trial`, which
// returns nullopt for draws rejected as too close to a kink.
double worst_error(std::uint64_t seed, const std::function<std::optional<double>(std::mt19937_64&)>& trial) {
  std::mt19937_64 rng(seed);
  double worst = 0;
  int done = 0;
  while (done < kInstances) {
    if (auto e = trial(rng)) {
      worst = std::max(worst, *e);
      ++done;
    }
  }
  return worst;
}

Eigen::Index pick(std::mt19937_64& rng, Eigen::Index lo, Eigen::Index hi) {
  return lo + static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
}

void criterion_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::pair<std::string, double>> worst;

  worst.emplace_back("gc", worst_error(1, [](std::mt19937_64& rng) -> std::optional<double> {
    const Eigen::Index d = pick(rng, 1, 8), k = pick(rng, 2, 6);
    const auto cs = centroids_from(random_matrix(rng, k, d));
    const Matrix x = random_matrix(rng, d, 1);
    const double temp = 0.25 + static_cast<double>(rng() % 16) / 4.0;
    const ClassId label = static_cast<ClassId>(rng() % static_cast<std::uint64_t>(k));
    const auto a = gc_loss(x, label, Span(cs), temp);
    const Matrix n = numeric_gradient([&](const Matrix& p) { return gc_loss(p, label, Span(cs), temp).value; }, x);
    return relative_error(a.feature_grads, n);
  }));

  worst.emplace_back("lc", worst_error(2, [](std::mt19937_64& rng) -> std::optional<double> {
    const Eigen::Index d = pick(rng, 1, 8), n = pick(rng, 2, 16);
    const Matrix batch = random_matrix(rng, n, d);
    std::vector<ClassId> labels(static_cast<std::size_t>(n));
    for (auto& l : labels) l = static_cast<ClassId>(rng() % 3);
    const Eigen::Index anchor = pick(rng, 0, n - 1);
    const double temp = batch_variance(batch);
    const auto a = lc_loss(batch, labels, anchor, temp);
    if (a.skipped) return std::nullopt;
    const Matrix g =
        numeric_gradient([&](const Matrix& b) { return lc_loss(b, labels, anchor, temp).value; }, batch);
    return relative_error(a.feature_grads, g);
  }));

  worst.emplace_back("ds", worst_error(3, [](std::mt19937_64& rng) -> std::optional<double> {
    const Eigen::Index d = pick(rng, 1, 8);
    const Matrix f = random_matrix(rng, d, 1), g = random_matrix(rng, d, 1);
    if ((f - g).norm() < kMargin) return std::nullopt;
    const Matrix n = numeric_gradient([&](const Matrix& p) { return ds_loss(p, g).value; }, f);
    return relative_error(ds_loss(f, g).feature_grads, n);
  }));

  worst.emplace_back("bce", worst_error(4, [](std::mt19937_64& rng) -> std::optional<double> {
    const Eigen::Index d = pick(rng, 1, 8), k = pick(rng, 1, 5);
    const auto cs = centroids_from(random_matrix(rng, k, d, 0.8));
    const Matrix x = random_matrix(rng, d, 1, 0.8);
    const ClassId label = static_cast<ClassId>(rng() % static_cast<std::uint64_t>(k));
    const auto a = deepnno_bce(x, label, Span(cs));
    const Matrix n = numeric_gradient([&](const Matrix& p) { return deepnno_bce(p, label, Span(cs)).value; }, x);
    return relative_error(a.feature_grads, n);
  }));

  // Combined objective through a two-layer MLP, wrt every parameter. The
  // temperature is a constant of the step, as in training.
  worst.emplace_back("end-to-end", worst_error(5, [](std::mt19937_64& rng) -> std::optional<double> {
    ExtractorConfig cfg;
    cfg.input_dim = static_cast<int>(pick(rng, 1, 8));
    cfg.layer_dims = {static_cast<int>(pick(rng, 2, 8)), static_cast<int>(pick(rng, 1, 8))};
    cfg.init_seed = rng();
    const Extractor net(cfg);
    ExtractorConfig old_cfg = cfg;
    old_cfg.init_seed = rng();
    const Extractor old_net(old_cfg);
    const Eigen::Index n = pick(rng, 2, 16), k = pick(rng, 1, 4);
    const Matrix x = random_matrix(rng, n, cfg.input_dim);
    std::vector<ClassId> labels(static_cast<std::size_t>(n));
    for (auto& l : labels) l = static_cast<ClassId>(rng() % static_cast<std::uint64_t>(k));
    const auto cs = centroids_from(random_matrix(rng, k, cfg.feature_dim()));
    const Matrix old = old_net.features(x);

    auto fwd = net.forward(x);
    if ((fwd.cache.pre[0].array().abs() < kMargin).any()) return std::nullopt;
    for (Eigen::Index i = 0; i < n; ++i)
      if ((fwd.features.row(i) - old.row(i)).norm() < kMargin) return std::nullopt;
    const double temp = batch_variance(fwd.features);
    const LossWeights w{1.0, 1.0, 1.0};
    const auto loss = total_loss(fwd.features, labels, Span(cs), temp, &old, w);
    const auto grads = net.backward(fwd.cache, loss.feature_grads);

    double err = 0;
    for (std::size_t l = 0; l < grads.size(); ++l) {
      auto eval_with = [&](auto&& set) {
        return [&, set](const Matrix& value) {
          Extractor probe = net;
          set(probe.mutable_parameters()[l], value);
          return total_loss(probe.features(x), labels, Span(cs), temp, &old, w).value;
        };
      };
      const auto fw = eval_with([](Layer<double>& layer, const Matrix& v) { layer.weight = v; });
      const auto fb = eval_with([](Layer<double>& layer, const Matrix& v) { layer.bias = v; });
      err = std::max(err, relative_error(grads[l].weight, numeric_gradient(fw, net.parameters()[l].weight)));
      err = std::max(err, relative_error(grads[l].bias, numeric_gradient(fb, net.parameters()[l].bias)));
    }
    return err;
  }));

  bool ok = true;
  std::string detail;
  for (const auto& [name, e] : worst) {
    ok &= e < kGradTol;
    detail += name + " " + fmt("%.1e", e) + ", ";
  }
  const double secs = seconds_since(t0);
  ok &= secs < 60;
  verdict(1, ok, "gradient checks, worst relative error over 100 instances: " + detail + fmt("%.1fs", secs));
}

void criterion_fixtures() {
  double worst = 0;
  auto track = [&](double got, double want) { worst = std::max(worst, std::abs(got - want)); };

  const auto two = centroids_from(Matrix{{1.0, 0.0}, {0.0, 2.0}});
  track(gc_loss(Vector(Vector::Zero(2)), 0, Span(two), 1.0).value, std::log1p(std::exp(-3.0)));

  const Matrix batch{{0.0, 0.0}, {1.0, 0.0}, {0.0, 1.0}};
  const std::vector<ClassId> labels{0, 0, 1};
  track(lc_loss(batch, labels, 0, 1.0).value, std::log(2.0));

  Vector a(2);
  a << 3, 4;
  track(ds_loss(a, Vector(Vector::Zero(2))).value, 5.0);

  Vector d(1), delta(1);
  d << 2.5;
  delta << 2.0;
  track(md_loss(d, 0, delta).value, 0.5);
  Vector d2(2), delta2(2);
  d2 << 0.5, 1.0;
  delta2 << 1.0, 2.0;
  track(md_loss(d2, 0, delta2).value, 1.0);

  verdict(2, worst <= 1e-10, fmt("loss fixtures, worst absolute error %.1e", worst));
}

void criterion_statistics() {
  std::mt19937_64 rng(2024);
  double worst = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const Eigen::Index n = 2 + static_cast<Eigen::Index>(rng() % 60), dim = pick(rng, 1, 8);
    Matrix data = random_matrix(rng, n, dim, 0.5 + trial % 7);
    data.array() += static_cast<double>(trial % 11) * 3.0;

    RunningVariance<double> var{};
    ClassStats<double> c(0, dim);
    for (Eigen::Index start = 0; start < n;) {
      const Eigen::Index len = std::min<Eigen::Index>(pick(rng, 1, 9), n - start);
      var = update_global_variance(var, data.middleRows(start, len));
      c = update_centroid(c, data.middleRows(start, len));
      start += len;
    }
    const double mean_all = data.mean();
    const double two_pass = (data.array() - mean_all).square().sum() / static_cast<double>(data.size());
    const Vector mean = data.colwise().mean().transpose();
    worst = std::max(worst, std::abs(var.current() - two_pass) / two_pass);
    worst = std::max(worst, (c.centroid - mean).norm() / std::max(mean.norm(), 1e-12));
  }
  verdict(3, worst <= 1e-8, fmt("streamed centroids and variance vs batch oracles, worst relative error %.1e", worst));
}

void criterion_metrics() {
  const auto s = compose_owr(0.8, 0.6);
  bool ok = std::abs(s.owr - 0.7) <= 1e-12 && std::abs(s.owr_h - 0.96 / 1.4) <= 1e-12;
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int violations = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto r = compose_owr(u(rng), u(rng));
    violations += r.owr_h > r.owr + 1e-15;
  }
  const auto reject_all = compose_owr(0.0, 1.0);
  ok &= violations == 0 && reject_all.owr == 0.5 && reject_all.owr_h == 0.0;
  verdict(4, ok,
          fmt("owr(0.8,0.6)=(%.4f, %.4f); owr_h > owr in %.0f of 1000 pairs; ", s.owr, s.owr_h, violations) +
              fmt("reject-all (0,1) gives (%.1f, %.1f)", reject_all.owr, reject_all.owr_h));
}

ExperimentConfig seeded(ExperimentConfig c, int seed) {
  c.dataset.synthetic.seed = static_cast<std::uint64_t>(seed);
  c.schedule.order_seeds = {static_cast<std::uint64_t>(seed)};
  c.training.seed = static_cast<std::uint64_t>(seed);
  return c;
}

void criterion_blobs(const ExperimentConfig& base) {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<double> cw, owr_h;
  for (int seed = 0; seed < kSeeds; ++seed) {
    const auto c = seeded(base, seed);
    const auto res = run_experiment(c, load_dataset(c.dataset), c.schedule.order_seeds[0], 0);
    cw.push_back(res.steps.back().report.cw_no_rej);
    owr_h.push_back(res.steps.back().report.owr_h.value_or(0.0));
  }
  const double secs = seconds_since(t0);
  const double mc = median_of(cw), mh = median_of(owr_h);
  verdict(5, mc >= 0.95 && mh >= 0.75 && secs < 300,
          fmt("blobs, final step medians over 5 seeds: cw_no_rej %.4f (>= 0.95), owr_h %.4f (>= 0.75), %.0fs", mc, mh,
              secs));
}

void criteria_rings(const ExperimentConfig& base) {
  std::vector<double> two_stage, single_stage, global, gc, lc, both, drift_on, drift_off;
  auto mean = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  auto experiment_drift = [](const ExperimentResult& r) {
    std::vector<double> d;
    for (const auto& s : r.steps)
      if (s.median_drift) d.push_back(*s.median_drift);
    return median(d);
  };
  for (int seed = 0; seed < kSeeds; ++seed) {
    auto c = seeded(base, seed);
    const auto data = load_dataset(c.dataset);
    for (const auto& row : ablate_rejection(c, data)) {
      if (row.name == "class-specific two-stage") two_stage.push_back(row.diff);
      if (row.name == "class-specific single-stage") single_stage.push_back(row.diff);
      if (row.name == "global two-stage") global.push_back(row.diff);
    }
    for (const auto& row : ablate_losses(c, data)) {
      const double v = mean(row.owr_per_experiment);
      if (row.name == "GC") gc.push_back(v);
      if (row.name == "LC") lc.push_back(v);
      if (row.name == "GC+LC") both.push_back(v);
    }
    for (double gamma : {1.0, 0.0}) {
      c.training.weights.gamma = gamma;
      std::vector<double> per_run;
      for (int run = 0; run < c.schedule.runs; ++run)
        per_run.push_back(experiment_drift(run_experiment(c, data, c.schedule.order_seeds[0], run)));
      (gamma > 0 ? drift_on : drift_off).push_back(median(per_run));
    }
  }
  const double ts = median_of(two_stage), ss = median_of(single_stage), gl = median_of(global);
  verdict(6, ts > gl && ts > ss,
          fmt("rings rejection ablation, median diff over 5 seeds: class-specific two-stage %.4f, single-stage %.4f, "
              "global two-stage %.4f",
              ts, ss, gl));
  const double mg = median_of(gc), ml = median_of(lc), mb = median_of(both);
  verdict(7, mb >= std::max(mg, ml),
          fmt("rings loss ablation, median OWR over 5 seeds: GC+LC %.4f vs GC %.4f, LC %.4f", mb, mg, ml));
  const double d1 = median_of(drift_on), d0 = median_of(drift_off);
  verdict(8, d1 <= d0, fmt("rings median feature drift on memory samples: gamma=1 %.4f, gamma=0 %.4f", d1, d0));
}

void criterion_determinism(const std::string& owr, const fs::path& config, const fs::path& scratch) {
  const fs::path a = scratch / "determinism_a", b = scratch / "determinism_b";
  fs::remove_all(a);
  fs::remove_all(b);
  auto run = [&](const fs::path& out) {
    const std::string cmd = "\"" + owr + "\" run -c \"" + config.string() + "\" -o \"" + out.string() + "\" > /dev/null";
    return std::system(cmd.c_str()) == 0;
  };
  bool ok = run(a) && run(b);
  int files = 0;
  if (ok) {
    for (const auto& e : fs::recursive_directory_iterator(a)) {
      if (!e.is_regular_file()) continue;
      const auto rel = fs::relative(e.path(), a);
      const auto name = rel.filename().string();
      if (name.rfind("metrics", 0) != 0 && name.rfind("summary", 0) != 0 && name != "plot.tsv") continue;
      ++files;
      ok &= fs::exists(b / rel) && read_text(e.path()) == read_text(b / rel);
    }
  }
  ok &= files > 0;
  verdict(9, ok, fmt("two `owr run` executions, %.0f metrics files compared byte for byte", files));
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 4) {
    std::fprintf(stderr, "usage: %s <owr binary> <configs dir> <scratch dir>\n", argv[0]);
    return 2;
  }
  const std::string owr = argv[1];
  const fs::path configs = argv[2], scratch = argv[3];
  fs::create_directories(scratch);
  try {
    criterion_gradients();
    criterion_fixtures();
    criterion_statistics();
    criterion_metrics();
    criterion_blobs(load_config(configs / "blobs.json"));
    criteria_rings(load_config(configs / "rings_benchmark.json"));
    criterion_determinism(owr, configs / "blobs.json", scratch);
  } catch (const std::exception& e) {
    std::printf("FAIL acceptance aborted: %s\n", e.what());
    return 1;
  }
  return failures == 0 ? 0 : 1;
}
