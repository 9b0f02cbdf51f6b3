#include <doctest.h>

#include "gradcheck.hpp"
#include "owr/losses.hpp"

#include <cmath>
#include <random>
#include <vector>

using namespace owr;
using owr::testing::numeric_gradient;
using owr::testing::random_matrix;
using owr::testing::relative_error;

namespace {

std::vector<ClassStats<double>> make_centroids(const Matrix& rows, ClassId first_id = 0) {
  std::vector<ClassStats<double>> out;
  for (Eigen::Index k = 0; k < rows.rows(); ++k) {
    ClassStats<double> c(first_id + k, rows.cols());
    c.centroid = rows.row(k).transpose();
    c.count = 1;
    out.push_back(c);
  }
  return out;
}

using Span = std::span<const ClassStats<double>>;

}  // namespace

TEST_CASE("class_scores") {
  const auto cs = make_centroids(Matrix{{1.0, 0.0}, {0.0, 2.0}});
  Vector f = Vector::Zero(2);
  Vector s = class_scores(f, Span(cs), 1.0);
  const double e3 = std::exp(-3.0);
  CHECK(s[0] == doctest::Approx(1 / (1 + e3)).epsilon(1e-14));
  CHECK(s[1] == doctest::Approx(e3 / (1 + e3)).epsilon(1e-14));

  const auto one = make_centroids(Matrix{{5.0, 5.0}});
  CHECK(class_scores(f, Span(one), 0.3)[0] == 1.0);

  const auto ring = make_centroids(Matrix{{1.0, 0.0}, {0.0, 1.0}, {-1.0, 0.0}, {0.0, -1.0}});
  Vector u = class_scores(f, Span(ring), 2.0);
  for (Eigen::Index k = 0; k < 4; ++k) CHECK(u[k] == doctest::Approx(0.25));

  std::vector<ClassStats<double>> empty_stats{ClassStats<double>(0, 2)};
  CHECK_THROWS_AS(class_scores(f, Span(empty_stats), 1.0), ShapeError);
  CHECK_THROWS_AS(class_scores(f, Span(cs), 0.0), ShapeError);
}

TEST_CASE("class_scores sums to one and ignores a common distance offset") {
  std::mt19937_64 rng(17);
  for (int t = 0; t < 100; ++t) {
    const Eigen::Index d = 1 + static_cast<Eigen::Index>(rng() % 8);
    const Eigen::Index k = 1 + static_cast<Eigen::Index>(rng() % 6);
    Matrix mus = random_matrix(rng, k, d, 2.0);
    Vector f = random_matrix(rng, d, 1);
    const auto cs = make_centroids(mus);
    const double temp = 0.1 + static_cast<double>(rng() % 100) / 20.0;
    Vector s = class_scores(f, Span(cs), temp);
    CHECK(std::abs(s.sum() - 1.0) < 1e-12);

    // A private extra coordinate on the sample adds the same amount to every distance.
    Matrix mus_ext(k, d + 1);
    mus_ext << mus, Vector::Zero(k);
    Vector f_ext(d + 1);
    f_ext << f, 1.7;
    const auto cs_ext = make_centroids(mus_ext);
    CHECK((class_scores(f_ext, Span(cs_ext), temp) - s).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("gc_loss") {
  const auto cs = make_centroids(Matrix{{1.0, 0.0}, {0.0, 2.0}}, 1);
  Vector f = Vector::Zero(2);
  auto out = gc_loss(f, 1, Span(cs), 1.0);
  CHECK(std::abs(out.value - std::log1p(std::exp(-3.0))) < 1e-10);
  CHECK(out.value == doctest::Approx(0.04859).epsilon(1e-4));
  CHECK(out.feature_grads.rows() == 2);
  CHECK(out.feature_grads.cols() == 1);

  const auto single = make_centroids(Matrix{{3.0, -1.0}}, 4);
  CHECK(gc_loss(f, 4, Span(single), 0.7).value == 0.0);
  CHECK_THROWS_AS(gc_loss(f, 99, Span(cs), 1.0), ShapeError);

  std::mt19937_64 rng(3);
  for (int t = 0; t < 100; ++t) {
    const Eigen::Index d = 1 + static_cast<Eigen::Index>(rng() % 8);
    const Eigen::Index k = 2 + static_cast<Eigen::Index>(rng() % 5);
    const auto c = make_centroids(random_matrix(rng, k, d));
    Matrix x = random_matrix(rng, d, 1);
    const double temp = 0.5 + static_cast<double>(rng() % 10) / 4.0;
    const ClassId label = static_cast<ClassId>(rng() % k);
    auto analytic = gc_loss(x, label, Span(c), temp);
    Matrix numeric = numeric_gradient([&](const Matrix& p) { return gc_loss(p, label, Span(c), temp).value; }, x);
    CHECK(relative_error(analytic.feature_grads, numeric) < 1e-4);
  }
}

TEST_CASE("gc_loss decreases as the own centroid approaches") {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 50; ++t) {
    Matrix mus = random_matrix(rng, 4, 3, 2.0);
    Vector f = random_matrix(rng, 3, 1);
    auto cs = make_centroids(mus);
    const double before = gc_loss(f, 2, Span(cs), 1.0).value;
    // Moving the own centroid towards the sample is the same as moving the
    // sample towards it with every other distance unchanged.
    cs[2].centroid = f + 0.8 * (cs[2].centroid - f);
    CHECK(gc_loss(f, 2, Span(cs), 1.0).value < before);
  }
}

TEST_CASE("lc_loss") {
  // Anchor at the origin, one peer and one intruder both at squared distance 1.
  Matrix batch{{0.0, 0.0}, {1.0, 0.0}, {0.0, 1.0}};
  std::vector<ClassId> labels{0, 0, 1};
  auto out = lc_loss(batch, labels, 0, 1.0);
  CHECK(std::abs(out.value - std::log(2.0)) < 1e-10);
  CHECK_FALSE(out.skipped);

  std::vector<ClassId> same{5, 5, 5};
  CHECK(lc_loss(batch, same, 1, 1.0).value == 0.0);

  std::vector<ClassId> lonely{0, 1, 1};
  auto skip = lc_loss(batch, lonely, 0, 1.0);
  CHECK(skip.skipped);
  CHECK(skip.value == 0.0);
  CHECK(skip.feature_grads.isZero(0.0));

  CHECK_THROWS_AS(lc_loss(Matrix{{1.0}}, std::vector<ClassId>{0}, 0, 1.0), ShapeError);
}

TEST_CASE("lc_loss is positive whenever another class is present") {
  std::mt19937_64 rng(99);
  for (int t = 0; t < 100; ++t) {
    const Eigen::Index n = 3 + static_cast<Eigen::Index>(rng() % 10);
    Matrix batch = random_matrix(rng, n, 4);
    std::vector<ClassId> labels(n, 0);
    const Eigen::Index intruder = 1 + static_cast<Eigen::Index>(rng() % (n - 1));
    CHECK(lc_loss(batch, labels, 0, 1.0).value == 0.0);
    labels[intruder] = 1;
    if (n > 2) CHECK(lc_loss(batch, labels, 0, 1.0).value > 0.0);
  }
}

TEST_CASE("lc_loss gradients reach the anchor and its neighbours") {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 100; ++t) {
    const Eigen::Index n = 2 + static_cast<Eigen::Index>(rng() % 15);
    const Eigen::Index d = 1 + static_cast<Eigen::Index>(rng() % 8);
    Matrix batch = random_matrix(rng, n, d);
    std::vector<ClassId> labels(n);
    for (auto& l : labels) l = static_cast<ClassId>(rng() % 3);
    const Eigen::Index anchor = static_cast<Eigen::Index>(rng() % n);
    const double temp = 0.5 + static_cast<double>(rng() % 8) / 4.0;
    auto analytic = lc_loss(batch, labels, anchor, temp);
    Matrix numeric =
        numeric_gradient([&](const Matrix& b) { return lc_loss(b, labels, anchor, temp).value; }, batch);
    CHECK(relative_error(analytic.feature_grads, numeric) < 1e-4);
  }
}

TEST_CASE("ds_loss") {
  Vector a(2), b(2);
  a << 3, 4;
  b << 0, 0;
  auto out = ds_loss(a, b);
  CHECK(out.value == 5.0);
  CHECK(out.feature_grads.isApprox(a / 5.0));
  auto zero = ds_loss(a, a);
  CHECK(zero.value == 0.0);
  CHECK(zero.feature_grads.isZero(0.0));
  CHECK_THROWS_AS(ds_loss(a, Vector::Zero(3)), ShapeError);

  std::mt19937_64 rng(12);
  for (int t = 0; t < 100; ++t) {
    const Eigen::Index d = 1 + static_cast<Eigen::Index>(rng() % 8);
    Matrix f = random_matrix(rng, d, 1), g = random_matrix(rng, d, 1);
    if ((f - g).norm() < 1e-3) continue;
    Matrix numeric = numeric_gradient([&](const Matrix& p) { return ds_loss(p, g).value; }, f);
    CHECK(relative_error(ds_loss(f, g).feature_grads, numeric) < 1e-4);
  }
}

TEST_CASE("total_loss") {
  std::mt19937_64 rng(31);
  for (int t = 0; t < 100; ++t) {
    const Eigen::Index n = 2 + static_cast<Eigen::Index>(rng() % 15);
    const Eigen::Index d = 1 + static_cast<Eigen::Index>(rng() % 8);
    const Eigen::Index k = 1 + static_cast<Eigen::Index>(rng() % 4);
    Matrix batch = random_matrix(rng, n, d);
    Matrix old = batch + random_matrix(rng, n, d, 0.3);
    std::vector<ClassId> labels(n);
    for (auto& l : labels) l = static_cast<ClassId>(rng() % k);
    const auto cs = make_centroids(random_matrix(rng, k, d));
    const double temp = batch_variance(batch);
    LossWeights w{1.0, 0.5 + static_cast<double>(rng() % 3), 0.25 * static_cast<double>(rng() % 5)};

    auto out = total_loss(batch, labels, Span(cs), temp, &old, w);
    double hand = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      hand += gc_loss(batch.row(i), labels[i], Span(cs), temp).value;
      hand += w.lambda * lc_loss(batch, labels, i, temp).value;
      hand += w.gamma * ds_loss(batch.row(i), old.row(i)).value;
    }
    CHECK(std::abs(out.value - hand / static_cast<double>(n)) < 1e-12);

    bool near_kink = false;
    for (Eigen::Index i = 0; i < n; ++i) near_kink |= (batch.row(i) - old.row(i)).norm() < 1e-3;
    if (!near_kink) {
      Matrix numeric = numeric_gradient(
          [&](const Matrix& b) { return total_loss(b, labels, Span(cs), temp, &old, w).value; }, batch);
      CHECK(relative_error(out.feature_grads, numeric) < 1e-4);
    }

    auto gc_only = total_loss(batch, labels, Span(cs), temp, &old, LossWeights{1.0, 0.0, 0.0});
    double mean_gc = 0;
    for (Eigen::Index i = 0; i < n; ++i) mean_gc += gc_loss(batch.row(i), labels[i], Span(cs), temp).value;
    CHECK(std::abs(gc_only.value - mean_gc / static_cast<double>(n)) < 1e-12);

    auto initial = total_loss(batch, labels, Span(cs), temp, nullptr, w);
    CHECK(initial.distill == 0.0);
    CHECK(std::abs(initial.value - (out.value - w.gamma * out.distill)) < 1e-12);
  }
}

TEST_CASE("md_loss") {
  Vector d(1), delta(1);
  d << 2.5;
  delta << 2.0;
  auto in_class = md_loss(d, 0, delta);
  CHECK(in_class.value == doctest::Approx(0.5).epsilon(1e-12));
  CHECK((*in_class.threshold_grads)[0] == -1.0);

  Vector d2(2), delta2(2);
  d2 << 0.5, 1.0;
  delta2 << 1.0, 2.0;
  auto out_class = md_loss(d2, 0, delta2);
  CHECK(out_class.value == doctest::Approx(1.0).epsilon(1e-12));
  CHECK((*out_class.threshold_grads)[1] == 1.0);
  CHECK((*out_class.threshold_grads)[0] == 0.0);

  Vector eq(3);
  eq << 1.0, 2.0, 3.0;
  auto boundary = md_loss(eq, 1, eq);
  CHECK(boundary.value == 0.0);
  CHECK(boundary.threshold_grads->isZero(0.0));

  Vector neg(1);
  neg << -0.1;
  CHECK_THROWS_AS(md_loss(d, 0, neg), ShapeError);
}

TEST_CASE("md_loss vanishes exactly when the radii separate the sample") {
  std::mt19937_64 rng(55);
  std::uniform_real_distribution<double> u(0.0, 3.0);
  for (int t = 0; t < 200; ++t) {
    const Eigen::Index k = 1 + static_cast<Eigen::Index>(rng() % 5);
    Vector d(k), delta(k);
    for (Eigen::Index i = 0; i < k; ++i) {
      d[i] = u(rng);
      delta[i] = u(rng);
    }
    const Eigen::Index label = static_cast<Eigen::Index>(rng() % k);
    bool separated = d[label] <= delta[label];
    for (Eigen::Index i = 0; i < k; ++i)
      if (i != label) separated = separated && d[i] >= delta[i];
    CHECK((md_loss(d, label, delta).value == 0.0) == separated);
  }
}

TEST_CASE("nno and deepnno scores") {
  Vector mu = Vector::Zero(2);
  Vector at_tau(2);
  at_tau << 0.6, 0.8;  // distance 1
  CHECK(nno_score(at_tau, mu, 1.0) == 0.0);
  CHECK(nno_score(mu, mu, 1.0, 3.0) == 3.0);
  CHECK(nno_score(at_tau, mu, 0.5) == doctest::Approx(-1.0));
  CHECK(nno_score(Vector(at_tau * 2.0), mu, 4.0, 1.0, DistanceKind::squared) == doctest::Approx(0.0));
  CHECK_THROWS_AS(nno_score(mu, mu, 0.0), ShapeError);

  CHECK(deepnno_score(mu, mu) == 1.0);
  Vector sq2(2);
  sq2 << 1.0, 1.0;
  CHECK(deepnno_score(sq2, mu) == doctest::Approx(std::exp(-1.0)).epsilon(1e-14));
  CHECK(deepnno_score(sq2, mu) == doctest::Approx(0.3679).epsilon(1e-4));

  std::vector<double> radii{0.0, 0.3, 0.9, 1.4, 2.2, 5.0};
  double prev = 2.0;
  for (double r : radii) {
    Vector p(2);
    p << r, 0.0;
    const double s = deepnno_score(p, mu);
    CHECK(s < prev);
    CHECK(s > 0.0);
    prev = s;
  }
}

TEST_CASE("deepnno_bce") {
  const auto one = make_centroids(Matrix{{0.0, 0.0}});
  Vector f(2);
  f << 1.0, 1.0;
  CHECK(deepnno_bce(f, 0, Span(one)).value == doctest::Approx(1.0).epsilon(1e-12));

  const auto far = make_centroids(Matrix{{0.0, 0.0}, {50.0, 0.0}, {0.0, -40.0}});
  CHECK(deepnno_bce(Vector(Vector::Zero(2)), 0, Span(far)).value < 1e-6);

  // Far from its own centroid: no clamping, the pull is still there.
  Vector distant(2);
  distant << 30.0, 0.0;
  const auto pulled = deepnno_bce(distant, 0, Span(one));
  CHECK(pulled.value == doctest::Approx(450.0));
  CHECK(pulled.feature_grads(0) == doctest::Approx(30.0));

  std::mt19937_64 rng(77);
  for (int t = 0; t < 100; ++t) {
    const Eigen::Index d = 1 + static_cast<Eigen::Index>(rng() % 6);
    const Eigen::Index k = 1 + static_cast<Eigen::Index>(rng() % 4);
    const auto cs = make_centroids(random_matrix(rng, k, d, 0.8));
    Matrix x = random_matrix(rng, d, 1, 0.8);
    const ClassId label = static_cast<ClassId>(rng() % k);
    auto analytic = deepnno_bce(x, label, Span(cs));
    Matrix numeric = numeric_gradient([&](const Matrix& p) { return deepnno_bce(p, label, Span(cs)).value; }, x);
    CHECK(relative_error(analytic.feature_grads, numeric) < 1e-4);
  }
}
