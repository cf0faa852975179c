#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "spfl/aggregation.hpp"
#include "spfl/rng.hpp"

using namespace spfl;

namespace {

std::vector<std::vector<float>> random_updates(int n, int m, Rng& rng) {
  std::vector<std::vector<float>> u(static_cast<size_t>(n),
                                    std::vector<float>(static_cast<size_t>(m)));
  for (auto& row : u)
    for (auto& v : row) v = static_cast<float>(rng.normal());
  return u;
}

// brute-force per-coordinate sort oracle
std::vector<float> median_oracle(const std::vector<std::vector<float>>& u) {
  std::vector<float> out(u[0].size());
  std::vector<float> col(u.size());
  for (size_t j = 0; j < out.size(); ++j) {
    for (size_t i = 0; i < u.size(); ++i) col[i] = u[i][j];
    std::sort(col.begin(), col.end());
    size_t n = col.size();
    out[j] = n % 2 ? col[n / 2] : (col[n / 2 - 1] + col[n / 2]) / 2.0f;
  }
  return out;
}

}  // namespace

TEST_CASE("fedavg frozen examples") {
  SUBCASE("identical updates average to themselves") {
    std::vector<std::vector<float>> u(5, {1.5f, -2.0f});
    CHECK(fedavg(u) == u[0]);
  }
  SUBCASE("equal weights") {
    std::vector<std::vector<float>> u = {{0.0f}, {2.0f}};
    CHECK(fedavg(u)[0] == doctest::Approx(1.0));
  }
  SUBCASE("weights 1 and 3 on 0 and 4 give 3") {
    std::vector<std::vector<float>> u = {{0.0f}, {4.0f}};
    CHECK(fedavg(u, {1.0, 3.0})[0] == doctest::Approx(3.0));
  }
  SUBCASE("empty list is an error") {
    CHECK_THROWS_AS(fedavg({}), std::invalid_argument);
  }
  SUBCASE("matches the coordinate mean with equal weights") {
    Rng rng = Rng::derive(2, {1});
    auto u = random_updates(7, 40, rng);
    auto got = fedavg(u);
    for (size_t j = 0; j < got.size(); ++j) {
      double mean = 0;
      for (const auto& row : u) mean += row[j];
      mean /= 7.0;
      CHECK(got[j] == doctest::Approx(mean).epsilon(1e-6));
    }
  }
}

TEST_CASE("coordinate median frozen examples and oracle") {
  SUBCASE("identical updates") {
    std::vector<std::vector<float>> u(4, {3.0f, -1.0f});
    CHECK(coordinate_median(u) == u[0]);
  }
  SUBCASE("even count takes the mean of the central values") {
    std::vector<std::vector<float>> u = {{1, 5}, {2, 4}, {9, 0}};
    // per coordinate: {1,2,9} -> 2, {5,4,0} -> 4
    auto got = coordinate_median(u);
    CHECK(got[0] == doctest::Approx(2.0));
    CHECK(got[1] == doctest::Approx(4.0));
  }
  SUBCASE("one outlier among nine equal values does not move the median") {
    std::vector<std::vector<float>> u(9, {0.5f});
    u[4][0] = 1e9f;
    CHECK(coordinate_median(u)[0] == doctest::Approx(0.5));
  }
  SUBCASE("matches the sort oracle exactly on random instances") {
    Rng rng = Rng::derive(5, {2});
    for (int trial = 0; trial < 200; ++trial) {
      int n = 1 + static_cast<int>(rng.below(12));
      int m = 1 + static_cast<int>(rng.below(30));
      auto u = random_updates(n, m, rng);
      CHECK(coordinate_median(u) == median_oracle(u));
    }
  }
  SUBCASE("empty list is an error") {
    CHECK_THROWS_AS(coordinate_median({}), std::invalid_argument);
  }
}

TEST_CASE("geometric median properties") {
  SUBCASE("identical points return that point") {
    std::vector<std::vector<float>> u(6, {1.0f, 2.0f, 3.0f});
    auto r = geometric_median(u, 100, 1e-6);
    for (size_t j = 0; j < 3; ++j)
      CHECK(r.value[j] == doctest::Approx(u[0][j]).epsilon(1e-6));
  }
  SUBCASE("1-D points {0,0,10} converge to the 1-D median") {
    std::vector<std::vector<float>> u = {{0}, {0}, {10}};
    auto r = geometric_median(u, 100, 1e-6);
    CHECK(std::abs(r.value[0]) < 1e-3);
  }
  SUBCASE("equilateral triangle centroids by symmetry") {
    // vertices of an equilateral triangle centred on (0.5, sqrt(3)/6)
    std::vector<std::vector<float>> u = {
        {0.0f, 0.0f}, {1.0f, 0.0f}, {0.5f, 0.8660254f}};
    auto r = geometric_median(u, 200, 1e-9);
    CHECK(r.value[0] == doctest::Approx(0.5).epsilon(1e-3));
    CHECK(r.value[1] == doctest::Approx(0.28867513).epsilon(1e-3));
    // verify against a coarse objective grid search around the centroid
    double best = 1e18;
    std::vector<float> arg(2);
    for (double gx = 0.3; gx <= 0.7; gx += 0.01)
      for (double gy = 0.1; gy <= 0.5; gy += 0.01) {
        std::vector<float> c = {static_cast<float>(gx),
                                static_cast<float>(gy)};
        double obj = geomedian_objective(u, c);
        if (obj < best) {
          best = obj;
          arg = c;
        }
      }
    CHECK(std::abs(arg[0] - r.value[0]) < 0.02);
    CHECK(std::abs(arg[1] - r.value[1]) < 0.02);
  }
  SUBCASE("objective beats the mean and every input point") {
    Rng rng = Rng::derive(7, {3});
    for (int trial = 0; trial < 50; ++trial) {
      int n = 2 + static_cast<int>(rng.below(8));
      int m = 1 + static_cast<int>(rng.below(20));
      auto u = random_updates(n, m, rng);
      auto r = geometric_median(u, 100, 1e-6);
      double at = geomedian_objective(u, r.value);
      CHECK(at <= geomedian_objective(u, fedavg(u)) + 1e-6);
      for (const auto& point : u)
        CHECK(at <= geomedian_objective(u, point) + 1e-6);
    }
  }
}

TEST_CASE("rlr sign tables") {
  SUBCASE("ten agreeing clients with theta=4 keep +eta") {
    std::vector<std::vector<float>> d(10, {0.2f});
    auto step = rlr_aggregate(d, 4, 1.0);
    CHECK(step[0] == doctest::Approx(0.2));
  }
  SUBCASE("five against five flips the rate") {
    std::vector<std::vector<float>> d(10, {1.0f});
    for (int i = 5; i < 10; ++i) d[static_cast<size_t>(i)][0] = -1.0f;
    auto step = rlr_aggregate(d, 4, 1.0);
    // mean is 0, sign sum 0 < 4 -> rate -eta, step -eta*0 = 0
    CHECK(step[0] == doctest::Approx(0.0));
    // make the mean visible
    for (int i = 5; i < 10; ++i) d[static_cast<size_t>(i)][0] = -0.5f;
    step = rlr_aggregate(d, 4, 1.0);
    CHECK(step[0] == doctest::Approx(-0.25));  // -eta * mean(0.25)
  }
  SUBCASE("seven against three sits on the boundary and keeps +eta") {
    std::vector<std::vector<float>> d(10, {1.0f});
    for (int i = 7; i < 10; ++i) d[static_cast<size_t>(i)][0] = -1.0f;
    auto step = rlr_aggregate(d, 4, 1.0);
    CHECK(step[0] == doctest::Approx(0.4));  // |7-3| = 4 >= theta, mean 0.4
  }
  SUBCASE("sign(0) counts as zero") {
    std::vector<std::vector<float>> d = {{1.0f}, {0.0f}, {-1.0f}};
    auto step = rlr_aggregate(d, 1, 1.0);
    // sign sum 0 < 1 -> -eta * mean(0) = 0
    CHECK(step[0] == doctest::Approx(0.0));
  }
  SUBCASE("theta=0 reduces to fedavg scaled by eta") {
    Rng rng = Rng::derive(9, {5});
    auto d = random_updates(6, 25, rng);
    auto step = rlr_aggregate(d, 0, 0.5);
    auto mean = fedavg(d);
    for (size_t j = 0; j < step.size(); ++j)
      CHECK(step[j] == doctest::Approx(0.5 * mean[j]).epsilon(1e-5));
  }
}

TEST_CASE("aggregators are permutation invariant and fix identical inputs") {
  Rng rng = Rng::derive(11, {6});
  auto u = random_updates(8, 30, rng);
  auto shuffled = u;
  Rng perm_rng = Rng::derive(12, {7});
  perm_rng.shuffle(shuffled);

  SUBCASE("permutation invariance") {
    CHECK(fedavg(u) == fedavg(shuffled));
    CHECK(coordinate_median(u) == coordinate_median(shuffled));
    auto a = geometric_median(u, 50, 1e-6).value;
    auto b = geometric_median(shuffled, 50, 1e-6).value;
    for (size_t j = 0; j < a.size(); ++j)
      CHECK(a[j] == doctest::Approx(b[j]).epsilon(1e-5));
    CHECK(rlr_aggregate(u, 3, 1.0) == rlr_aggregate(shuffled, 3, 1.0));
  }
  SUBCASE("identical inputs are fixed points") {
    std::vector<std::vector<float>> same(7, u[0]);
    CHECK(fedavg(same) == u[0]);
    CHECK(coordinate_median(same) == u[0]);
    auto g = geometric_median(same, 50, 1e-6).value;
    for (size_t j = 0; j < g.size(); ++j)
      CHECK(g[j] == doctest::Approx(u[0][j]).epsilon(1e-6));
  }
}
