#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "oracles.hpp"
#include "rsdyn/parallel.hpp"
#include "rsdyn/stream_statistics.hpp"
#include "test_util.hpp"

using namespace rsdyn;

namespace {

RSTensor from_rows(std::size_t b, std::size_t s, std::size_t d, const std::vector<float>& values) {
  return RSTensor(b, s, d, values, alternating_labels(s));
}

}  // namespace

TEST_CASE("mean activations") {
  const auto single = oracle::random_tensor(1, 4, 5, 1);
  const auto m1 = mean_activations(single);
  for (std::size_t s = 0; s < 4; ++s) {
    for (std::size_t u = 0; u < 5; ++u) CHECK(m1(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(u)) == single.at(0, s, u));
  }

  auto pm = oracle::random_tensor(2, 2, 3, 2);
  for (std::size_t s = 0; s < 2; ++s) {
    for (std::size_t u = 0; u < 3; ++u) pm.at(1, s, u) = -pm.at(0, s, u);
  }
  CHECK(mean_activations(pm).isZero());

  const auto t = oracle::random_tensor(100, 8, 64, 3);
  const auto m = mean_activations(t);
  double worst = 0.0;
  for (std::size_t s = 0; s < 8; ++s) {
    for (std::size_t u = 0; u < 64; ++u) {
      const double expected = oracle::mean(oracle::column(t, s, u));
      worst = std::max(worst, std::abs(m(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(u)) - expected));
    }
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("sort by last layer") {
  Eigen::MatrixXd means(2, 3);
  means << 9, 9, 9, 3, 1, 2;
  CHECK(sort_units_by_last_layer(means) == std::vector<std::size_t>{1, 2, 0});
  means.row(1).setConstant(4.0);
  CHECK(sort_units_by_last_layer(means) == std::vector<std::size_t>{0, 1, 2});

  const auto t = oracle::random_tensor(3, 2, 40, 4);
  const auto m = mean_activations(t);
  const auto order = sort_units_by_last_layer(m);
  // Reference: selection by repeated minimum with lowest-index tie break.
  std::vector<bool> used(40, false);
  for (std::size_t rank = 0; rank < 40; ++rank) {
    std::size_t best = 40;
    for (std::size_t u = 0; u < 40; ++u) {
      if (!used[u] && (best == 40 || m(1, static_cast<Eigen::Index>(u)) < m(1, static_cast<Eigen::Index>(best)))) best = u;
    }
    used[best] = true;
    CHECK(order[rank] == best);
  }
}

TEST_CASE("layer pair correlations: affine and antisymmetric cases") {
  oracle::Gauss g(5);
  RSTensor t(50, 4, 2);
  for (std::size_t b = 0; b < 50; ++b) {
    t.at(b, 0, 0) = static_cast<float>(g.normal());
    t.at(b, 1, 0) = 2.0f * t.at(b, 0, 0) + 1.0f;
    t.at(b, 2, 0) = -t.at(b, 1, 0);
    t.at(b, 3, 0) = static_cast<float>(g.normal());
    t.at(b, 0, 1) = static_cast<float>(g.normal());
    t.at(b, 1, 1) = 4.0f;  // constant: undefined
    t.at(b, 2, 1) = static_cast<float>(g.normal());
    t.at(b, 3, 1) = static_cast<float>(g.normal());
  }
  const auto c = layer_pair_correlations(t);
  CHECK(c.r(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(c.r(0, 1) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK_FALSE(c.defined(1, 0));
  CHECK_FALSE(c.defined(1, 1));
  CHECK(std::isnan(c.r(1, 0)));
  CHECK(c.defined(1, 2));
  CHECK(c.undefined_count() == 2);
  CHECK_ERROR_KIND(layer_pair_correlations(oracle::random_tensor(2, 4, 2, 1)), ErrorKind::InsufficientSamples);
}

TEST_CASE("independent Gaussians give near-zero correlation") {
  const auto t = oracle::random_tensor(10000, 2, 4, 6);
  const auto c = layer_pair_correlations(t);
  for (Eigen::Index u = 0; u < 4; ++u) CHECK(std::abs(c.r(u, 0)) < 0.05);
}

TEST_CASE("correlations match the textbook oracle on random tensors") {
  const auto t = oracle::random_tensor(100, 8, 64, 7);
  const auto c = layer_pair_correlations(t);
  for (std::size_t u = 0; u < 64; ++u) {
    for (std::size_t s = 0; s < 7; ++s) {
      const double expected = oracle::pearson(oracle::column(t, s, u), oracle::column(t, s + 1, u));
      CHECK(oracle::close_rel(c.r(static_cast<Eigen::Index>(u), static_cast<Eigen::Index>(s)), expected, 1e-9));
    }
  }
}

TEST_CASE("property: correlation invariant under positive affine maps") {
  oracle::Gauss g(8);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> x(30), y(30);
    for (std::size_t i = 0; i < 30; ++i) {
      x[i] = g.normal();
      y[i] = 0.5 * x[i] + g.normal();
    }
    const double a = 0.1 + 10 * g.uniform(), b = 10 * g.normal();
    std::vector<double> xa(30);
    for (std::size_t i = 0; i < 30; ++i) xa[i] = a * x[i] + b;
    CHECK(std::abs(pearson(xa, y) - pearson(x, y)) < 1e-12);
    CHECK(std::abs(pearson(x, y)) <= 1.0);
  }
}

TEST_CASE("histogram: perfectly correlated unit puts all mass in the top bin") {
  RSTensor t(10, 4, 1);
  for (std::size_t b = 0; b < 10; ++b) {
    for (std::size_t s = 0; s < 4; ++s) t.at(b, s, 0) = static_cast<float>(b * (s + 1));
  }
  for (const auto mode : {HistogramMode::Consecutive, HistogramMode::AllPairs}) {
    const auto h = correlation_histogram(t, mode, 10);
    CHECK(h.counts(0, 9) == static_cast<double>(h.pairs_per_unit));
    CHECK(h.counts.row(0).head(9).isZero());
  }
}

TEST_CASE("histogram: all-pairs D=1 S=3 matches brute force") {
  const auto t = oracle::random_tensor(20, 3, 1, 9);
  // Make the pairs positively correlated so they spread across bins.
  auto u = t;
  for (std::size_t b = 0; b < 20; ++b) {
    u.at(b, 1, 0) = u.at(b, 0, 0) + 0.5f * t.at(b, 1, 0);
    u.at(b, 2, 0) = u.at(b, 1, 0) + 2.0f * t.at(b, 2, 0);
  }
  const std::size_t bins = 5;
  const auto h = correlation_histogram(u, HistogramMode::AllPairs, bins);
  std::vector<double> expected(bins, 0.0);
  std::size_t under = 0;
  for (const auto& [l, m] : std::vector<std::pair<int, int>>{{0, 1}, {0, 2}, {1, 2}}) {
    const double r = oracle::pearson(oracle::column(u, static_cast<std::size_t>(l), 0),
                                     oracle::column(u, static_cast<std::size_t>(m), 0));
    std::size_t bin = 0;
    if (r < 0) {
      ++under;
    } else {
      bin = std::min<std::size_t>(bins - 1, static_cast<std::size_t>(std::floor(r * bins)));
    }
    expected[bin] += 1;
  }
  CHECK(h.pairs_per_unit == 3);
  CHECK(h.underflow[0] == under);
  for (std::size_t k = 0; k < bins; ++k) CHECK(h.counts(0, static_cast<Eigen::Index>(k)) == expected[k]);
}

TEST_CASE("histogram normalization") {
  const auto t = oracle::random_tensor(30, 6, 8, 10);
  const auto one = correlation_histogram(t, HistogramMode::Consecutive, 1);
  for (Eigen::Index u = 0; u < 8; ++u) CHECK(one.counts(u, 0) == 5.0);

  auto with_undefined = t;
  for (std::size_t b = 0; b < 30; ++b) with_undefined.at(b, 2, 3) = 1.0f;
  for (const auto mode : {HistogramMode::Consecutive, HistogramMode::AllPairs}) {
    const std::size_t bins = 7;
    const auto h = correlation_histogram(with_undefined, mode, bins);
    for (Eigen::Index u = 0; u < 8; ++u) {
      const auto uu = static_cast<std::size_t>(u);
      const double defined_fraction =
          static_cast<double>(h.pairs_per_unit - h.undefined[uu]) / static_cast<double>(h.pairs_per_unit);
      CHECK(h.density.row(u).sum() / static_cast<double>(bins) == doctest::Approx(defined_fraction).epsilon(1e-12));
      CHECK(h.counts.row(u).sum() + static_cast<double>(h.undefined[uu]) == static_cast<double>(h.pairs_per_unit));
    }
    CHECK(h.undefined[3] > 0);
  }
  CHECK_ERROR_KIND(correlation_histogram(oracle::random_tensor(2, 4, 1, 1), HistogramMode::Consecutive, 4),
                   ErrorKind::InsufficientSamples);
}

TEST_CASE("cosine similarity: basic cases and transition labels") {
  auto t = from_rows(1, 4, 3, {1, 2, 3, 1, 2, 3, 1, 0, 0, 0, 1, 0});
  const auto cs = cosine_similarity_series(t);
  REQUIRE(cs.size() == 3);
  CHECK(cs.mean[0] == doctest::Approx(1.0));
  CHECK(cs.mean[2] == doctest::Approx(0.0));
  CHECK(cs.kind == std::vector<Transition>{Transition::WithinLayer, Transition::CrossLayer, Transition::WithinLayer});

  auto z = from_rows(2, 2, 2, {0, 0, 1, 1, 1, 0, 1, 0});
  const auto cz = cosine_similarity_series(z);
  CHECK(cz.flagged[0] == 1);
  CHECK(cz.mean[0] == doctest::Approx(1.0));
}

TEST_CASE("cosine similarity matches the dot-product oracle") {
  const auto t = oracle::random_tensor(100, 8, 64, 11);
  const auto cs = cosine_similarity_series(t);
  for (std::size_t s = 0; s < 7; ++s) {
    std::vector<double> v;
    for (std::size_t b = 0; b < 100; ++b) v.push_back(oracle::cosine(t, b, s, s + 1));
    CHECK(oracle::close_rel(cs.mean[s], oracle::mean(v), 1e-9, 1e-12));
    CHECK(oracle::close_rel(cs.sd[s], oracle::sample_sd(v), 1e-9));
  }
}

TEST_CASE("random high-dimensional vectors are nearly orthogonal") {
  const auto t = oracle::random_tensor(1000, 2, 4096, 12);
  CHECK(std::abs(cosine_similarity_series(t).mean[0]) < 0.1);
}

TEST_CASE("property: cosine is scale invariant") {
  const auto t = oracle::random_tensor(5, 4, 16, 13);
  auto scaled = t;
  for (std::size_t b = 0; b < 5; ++b) {
    for (std::size_t u = 0; u < 16; ++u) {
      scaled.at(b, 0, u) *= 4.0f;
      scaled.at(b, 1, u) *= 0.5f;
    }
  }
  const auto a = cosine_similarity_series(t);
  const auto c = cosine_similarity_series(scaled);
  CHECK(c.mean[0] == doctest::Approx(a.mean[0]).epsilon(1e-12));
}

TEST_CASE("velocity") {
  auto t = from_rows(1, 4, 2, {1, 1, 1, 1, 4, 1, 0, 0});
  const auto v = velocity_series(t);
  CHECK(v.mean[0] == 0.0);
  CHECK(v.mean[1] == doctest::Approx(3.0));
  CHECK(v.mean[2] == doctest::Approx(std::sqrt(17.0)));

  const auto r = oracle::random_tensor(100, 8, 64, 14);
  const auto vr = velocity_series(r);
  for (std::size_t s = 0; s < 7; ++s) {
    std::vector<double> d;
    for (std::size_t b = 0; b < 100; ++b) d.push_back(oracle::distance(r, b, s, s + 1));
    CHECK(oracle::close_rel(vr.mean[s], oracle::mean(d), 1e-9));
    CHECK(oracle::close_rel(vr.sd[s], oracle::sample_sd(d), 1e-9));
  }
}

TEST_CASE("property: velocity triangle inequality") {
  const auto t = oracle::random_tensor(20, 8, 10, 15);
  for (std::size_t b = 0; b < 20; ++b) {
    for (std::size_t s = 0; s + 2 < 8; ++s) {
      const auto one = RSTensor(1, 8, 10, std::vector<float>(t.data().begin() + static_cast<long>(b * 80),
                                                             t.data().begin() + static_cast<long>((b + 1) * 80)),
                                alternating_labels(8));
      const auto v = velocity_series(one);
      CHECK(oracle::distance(t, b, s, s + 2) <= v.mean[s] + v.mean[s + 1] + 1e-9);
    }
  }
}

TEST_CASE("results do not depend on thread count") {
  const auto t = oracle::random_tensor(40, 8, 32, 16);
  set_thread_count(1);
  const auto c1 = layer_pair_correlations(t);
  const auto h1 = correlation_histogram(t, HistogramMode::AllPairs, 10);
  const auto v1 = cosine_similarity_series(t);
  set_thread_count(5);
  const auto c5 = layer_pair_correlations(t);
  const auto h5 = correlation_histogram(t, HistogramMode::AllPairs, 10);
  const auto v5 = cosine_similarity_series(t);
  set_thread_count(0);
  CHECK(c1.r == c5.r);
  CHECK(h1.counts == h5.counts);
  CHECK(v1.mean == v5.mean);
}

TEST_CASE("csv exports have the declared columns") {
  const auto dir = scratch_dir("stats_csv");
  const auto t = oracle::random_tensor(10, 4, 3, 17);
  write_series_csv(velocity_series(t), dir / "v.csv");
  write_correlations_csv(layer_pair_correlations(t), dir / "c.csv");
  std::ifstream v(dir / "v.csv"), c(dir / "c.csv");
  std::string line;
  std::getline(v, line);
  CHECK(line.rfind("transition_index,transition_kind,mean,sd", 0) == 0);
  std::getline(v, line);
  CHECK(line.find("WithinLayer") != std::string::npos);
  std::getline(c, line);
  CHECK(line.rfind("unit,transition,r", 0) == 0);
}
