#include "doctest.h"

#include "mpg/common.hpp"
#include "mpg/geometry.hpp"

#include <cmath>
#include <numbers>

using namespace mpg;

TEST_CASE("box and regular polygons are convex with the expected area") {
  const Polygon box = make_box(0.02, 0.05);
  CHECK(is_convex(box));
  CHECK(area(box) == doctest::Approx(0.001));
  const Polygon hex = make_regular(6, 0.01);
  CHECK(is_convex(hex));
  CHECK(area(hex) == doctest::Approx(1.5 * std::sqrt(3.0) * 1e-4));
  CHECK(norm(centroid(transformed(hex, {0.3, 0.1}, 1.0)) - Vec2{0.3, 0.1}) < 1e-12);
}

TEST_CASE("contains treats the boundary as inside") {
  const Polygon box = make_box(2.0, 2.0);
  CHECK(contains(box, {0.0, 0.0}));
  CHECK(contains(box, {1.0, 0.5}));
  CHECK_FALSE(contains(box, {1.01, 0.0}));
}

TEST_CASE("overlaps requires positive interior overlap") {
  const Polygon a = make_box(1.0, 1.0);
  CHECK(overlaps(a, translated(a, {0.5, 0.0})));
  CHECK_FALSE(overlaps(a, translated(a, {1.0, 0.0})));  // touching edges
  CHECK_FALSE(overlaps(a, translated(a, {0.0, 3.0})));
}

TEST_CASE("sweep_contact finds the exact gap for aligned boxes") {
  const Polygon a = make_box(1.0, 1.0);
  const Polygon b = translated(a, {3.0, 0.2});
  const auto t = sweep_contact(a, b, {1.0, 0.0});
  REQUIRE(t.has_value());
  CHECK(*t == doctest::Approx(2.0).epsilon(1e-8));
  CHECK_FALSE(sweep_contact(a, b, {-1.0, 0.0}).has_value());
  CHECK_FALSE(sweep_contact(a, translated(a, {3.0, 1.5}), {1.0, 0.0}).has_value());
  CHECK(*sweep_contact(a, translated(a, {0.5, 0.0}), {1.0, 0.0}) == 0.0);
}

TEST_CASE("sweep_contact agrees with brute-force stepping on random convex pairs") {
  Rng rng(5);
  int hits = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const Polygon a = transformed(make_regular(3 + static_cast<int>(uniform_index(rng, 6)), uniform(rng, 0.5, 1.5)),
                                  {0.0, 0.0}, uniform(rng, 0.0, 6.0));
    const Polygon b = transformed(make_box(uniform(rng, 0.5, 2.0), uniform(rng, 0.5, 2.0)),
                                  {uniform(rng, -5.0, 5.0), uniform(rng, -5.0, 5.0)}, uniform(rng, 0.0, 6.0));
    const Vec2 dir = unit(uniform(rng, 0.0, 2.0 * std::numbers::pi));
    // Brute force: march in small steps with the SAT overlap test.
    std::optional<double> brute;
    for (double s = 0.0; s < 12.0; s += 1e-3) {
      if (overlaps(translated(a, dir * s), b)) {
        brute = s;
        break;
      }
    }
    const auto fast = sweep_contact(a, b, dir);
    if (brute && *brute < 11.9) {
      ++hits;
      REQUIRE(fast.has_value());
      CHECK(std::abs(*fast - *brute) <= 1.1e-3);
    } else if (fast) {
      CHECK(*fast >= 11.9);
    }
  }
  CHECK(hits > 20);
}

TEST_CASE("clip_halfplane keeps the requested side") {
  const Polygon box = make_box(2.0, 2.0);
  const Polygon half = clip_halfplane(box, {1.0, 0.0}, 0.0);
  CHECK(area(half) == doctest::Approx(2.0));
  CHECK(project(half, {1.0, 0.0}).hi == doctest::Approx(0.0));
}
