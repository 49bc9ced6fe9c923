#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "qsynth/errors.hpp"
#include "qsynth/qspace.hpp"
#include "qsynth/rng.hpp"

using namespace qsynth;

namespace {
double norm3(const std::array<double, 3>& v) {
  return std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
}
double angle_deg(const std::array<double, 3>& a, const std::array<double, 3>& b) {
  double d = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
  d = std::clamp(d, -1.0, 1.0);
  return std::acos(d) * 180.0 / 3.14159265358979323846;
}
}  // namespace

TEST_CASE("sphere_to_cart axis cases and oracle") {
  const double pi = 3.14159265358979323846;
  auto v = sphere_to_cart(0.0, 0.0);
  CHECK(v[0] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(v[2] == doctest::Approx(1.0).epsilon(1e-12));

  v = sphere_to_cart(pi / 2, 0.0);
  CHECK(v[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::abs(v[2]) < 1e-12);

  // direct trig evaluation: theta = pi/3, phi = pi/4
  v = sphere_to_cart(pi / 3, pi / 4);
  CHECK(v[0] == doctest::Approx(std::sin(pi / 3) * std::cos(pi / 4)).epsilon(1e-14));
  CHECK(v[1] == doctest::Approx(std::sin(pi / 3) * std::sin(pi / 4)).epsilon(1e-14));
  CHECK(v[2] == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(std::abs(norm3(v) - 1.0) < 1e-12);

  CHECK_THROWS_AS(sphere_to_cart(-0.1, 0.0), validation_error);
  CHECK_THROWS_AS(sphere_to_cart(3.2, 0.0), validation_error);
  CHECK_THROWS_AS(sphere_to_cart(1.0, -0.1), validation_error);
  CHECK_THROWS_AS(sphere_to_cart(1.0, 2 * pi), validation_error);
}

TEST_CASE("fibonacci_directions cardinality, separation, isotropy") {
  CHECK_THROWS_AS(fibonacci_directions(0), validation_error);
  CHECK(fibonacci_directions(1).size() == 1);
  CHECK(std::abs(norm3(fibonacci_directions(1)[0]) - 1.0) < 1e-12);

  const auto d30 = fibonacci_directions(30);
  for (const auto& g : d30) CHECK(std::abs(norm3(g) - 1.0) < 1e-12);
  double min_angle = 180.0;
  for (std::size_t i = 0; i < d30.size(); ++i)
    for (std::size_t j = i + 1; j < d30.size(); ++j)
      min_angle = std::min(min_angle, angle_deg(d30[i], d30[j]));
  CHECK(min_angle >= 15.0);

  const auto d60 = fibonacci_directions(60);
  std::array<double, 3> mean{0, 0, 0};
  for (const auto& g : d60)
    for (int k = 0; k < 3; ++k) mean[std::size_t(k)] += g[std::size_t(k)] / 60.0;
  CHECK(norm3(mean) <= 0.2);

  // deterministic
  CHECK(fibonacci_directions(30) == d30);
}

TEST_CASE("normalize_scheme renormalizes, scales, preserves order") {
  const auto s = normalize_scheme({{{0, 0, 2}, 1000.0}, {{0, 0, 0}, 0.0}});
  CHECK(s.b_max == 1000.0);
  CHECK(s.points[0].g[2] == doctest::Approx(1.0));
  CHECK(s.points[0].b_norm == 1.0);
  CHECK(s.points[1].b_norm == 0.0);
  CHECK(s.points[1].g == std::array<double, 3>{0, 0, 0});

  SUBCASE("three shells scale to {0, 0.5, 1}") {
    const auto t = normalize_scheme(
        {{{1, 0, 0}, 0.0}, {{1, 0, 0}, 1000.0}, {{0, 1, 0}, 2000.0}});
    CHECK(t.points[0].b_norm == 0.0);
    CHECK(t.points[1].b_norm == 0.5);
    CHECK(t.points[2].b_norm == 1.0);
  }
  SUBCASE("single nonzero shell is degenerate max-scaling") {
    const auto t = normalize_scheme({{{1, 0, 0}, 3000.0}, {{0, 0, 0}, 0.0}});
    for (const auto& p : t.points) CHECK((p.b_norm == 0.0 || p.b_norm == 1.0));
  }
  SUBCASE("error paths") {
    CHECK_THROWS_AS(normalize_scheme({{{1, 0, 0}, 0.0}}), validation_error);
    CHECK_THROWS_AS(normalize_scheme({{{0, 0, 0}, 1000.0}, {{0, 0, 0}, 0.0}}),
                    validation_error);
    CHECK_THROWS_AS(normalize_scheme({{{1, 0, 0}, -5.0}}), validation_error);
  }
}

TEST_CASE("normalize_scheme is idempotent") {
  Rng rng(11);
  std::vector<std::pair<std::array<double, 3>, double>> raw;
  raw.push_back({{0, 0, 0}, 0.0});
  for (int i = 0; i < 20; ++i)
    raw.push_back({{rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)},
                   rng.uniform(100, 3000)});
  const auto once = normalize_scheme(raw);
  std::vector<std::pair<std::array<double, 3>, double>> again;
  for (const auto& p : once.points) again.push_back({p.g, p.b});
  const auto twice = normalize_scheme(again);
  REQUIRE(twice.size() == once.size());
  for (std::size_t i = 0; i < once.size(); ++i) {
    CHECK(twice.points[i].b == once.points[i].b);
    CHECK(twice.points[i].b_norm == doctest::Approx(once.points[i].b_norm).epsilon(1e-15));
    for (int k = 0; k < 3; ++k)
      CHECK(twice.points[i].g[std::size_t(k)] ==
            doctest::Approx(once.points[i].g[std::size_t(k)]).epsilon(1e-15));
  }
}

TEST_CASE("make_shell_scheme counts one b0 plus dirs per shell") {
  const auto s = make_shell_scheme({0, 1000, 2000}, 30);
  CHECK(s.size() == 61);
  CHECK(s.has_b0());
  CHECK(s.shell_indices(1000).size() == 30);
  CHECK(s.shell_indices(2000).size() == 30);
}

TEST_CASE("FSL tables: minimal parse, round trip, error paths") {
  const auto s = load_fsl_tables("0 1000\n", "0 1\n0 0\n0 0\n");
  REQUIRE(s.size() == 2);
  CHECK(s.points[1].g == std::array<double, 3>{1, 0, 0});
  CHECK(s.points[0].b == 0.0);

  SUBCASE("round trip on a 90-point scheme preserves 6 significant digits") {
    const auto scheme = make_shell_scheme({0, 1000, 2000, 3000}, 30);
    const auto [bvals, bvecs] = save_fsl_tables(scheme);
    // exact layout: one line for bvals, three for bvecs, newline-terminated
    CHECK(std::count(bvals.begin(), bvals.end(), '\n') == 1);
    CHECK(std::count(bvecs.begin(), bvecs.end(), '\n') == 3);
    CHECK(bvals.back() == '\n');
    const auto back = load_fsl_tables(bvals, bvecs);
    REQUIRE(back.size() == scheme.size());
    for (std::size_t i = 0; i < scheme.size(); ++i) {
      CHECK(back.points[i].b ==
            doctest::Approx(scheme.points[i].b).epsilon(1e-6));
      for (int k = 0; k < 3; ++k)
        CHECK(std::abs(back.points[i].g[std::size_t(k)] -
                       scheme.points[i].g[std::size_t(k)]) < 1e-6);
    }
  }
  SUBCASE("mismatched lengths") {
    CHECK_THROWS_AS(load_fsl_tables("0 1000 2000\n", "0 1\n0 0\n0 0\n"), format_error);
  }
  SUBCASE("non-numeric token") {
    CHECK_THROWS_AS(load_fsl_tables("0 10x0\n", "0 1\n0 0\n0 0\n"), format_error);
  }
  SUBCASE("wrong line counts") {
    CHECK_THROWS_AS(load_fsl_tables("0 1000\n1 2\n", "0 1\n0 0\n0 0\n"), format_error);
    CHECK_THROWS_AS(load_fsl_tables("0 1000\n", "0 1\n0 0\n"), format_error);
  }
}
