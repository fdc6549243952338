// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "msdetr/geometry.hpp"

using namespace msdetr;

namespace {

Box random_box(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double x0 = u(rng), x1 = u(rng), y0 = u(rng), y1 = u(rng);
  return to_center({std::min(x0, x1), std::min(y0, y1), std::max(x0, x1), std::max(y0, y1)});
}

// Pixel-count IoU on a grid of n x n cell centers.
double raster_iou(const Box& a, const Box& b, int n) {
  const CornerBox ca = to_corner(a), cb = to_corner(b);
  long inter = 0, uni = 0;
  for (int yi = 0; yi < n; ++yi) {
    const double y = (yi + 0.5) / n;
    const bool ya = y >= ca.y0 && y < ca.y1;
    const bool yb = y >= cb.y0 && y < cb.y1;
    if (!ya && !yb) continue;
    for (int xi = 0; xi < n; ++xi) {
      const double x = (xi + 0.5) / n;
      const bool in_a = ya && x >= ca.x0 && x < ca.x1;
      const bool in_b = yb && x >= cb.x0 && x < cb.x1;
      inter += in_a && in_b;
      uni += in_a || in_b;
    }
  }
  return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

}  // namespace

TEST_CASE("center and corner conversions") {
  const CornerBox full = to_corner({0.5, 0.5, 1.0, 1.0});
  CHECK(full == CornerBox{0.0, 0.0, 1.0, 1.0});
  CHECK(to_center({0.0, 0.0, 1.0, 1.0}) == Box{0.5, 0.5, 1.0, 1.0});
  CHECK(to_corner({0.25, 0.25, 0.5, 0.5}) == CornerBox{0.0, 0.0, 0.5, 0.5});

  CHECK_THROWS_AS(to_corner({0.5, 0.5, -0.1, 0.2}), std::invalid_argument);
  CHECK_THROWS_AS(to_center({0.6, 0.0, 0.5, 1.0}), std::invalid_argument);

  std::mt19937_64 rng(3);
  for (int i = 0; i < 1000; ++i) {
    const Box b = random_box(rng);
    const Box r = to_center(to_corner(b));
    CHECK(std::abs(r.cx - b.cx) < 1e-7);
    CHECK(std::abs(r.cy - b.cy) < 1e-7);
    CHECK(std::abs(r.w - b.w) < 1e-7);
    CHECK(std::abs(r.h - b.h) < 1e-7);
  }
}

TEST_CASE("iou fixtures") {
  const Box b{0.4, 0.5, 0.2, 0.3};
  CHECK(iou(b, b) == doctest::Approx(1.0));
  const Box a = to_center({0.0, 0.0, 2.0 / 3.0, 2.0 / 3.0});
  const Box c = to_center({1.0 / 3.0, 1.0 / 3.0, 1.0, 1.0});
  CHECK(iou(a, c) == doctest::Approx(1.0 / 7.0).epsilon(1e-12));
  CHECK(raster_iou(a, c, 999) == doctest::Approx(1.0 / 7.0).epsilon(2e-3));
  CHECK(iou({0.1, 0.1, 0.1, 0.1}, {0.8, 0.8, 0.1, 0.1}) == 0.0);
  CHECK(iou({0.5, 0.5, 0.0, 0.0}, {0.5, 0.5, 0.0, 0.0}) == 0.0);
}

TEST_CASE("iou agrees with a rasterized pixel count") {
  // Sides of at least 0.1 keep the grid's edge error well below the tolerance.
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> c(0.1, 0.9), s(0.1, 0.8);
  for (int i = 0; i < 40; ++i) {
    auto draw = [&] {
      const double w = s(rng), h = s(rng);
      return Box{std::clamp(c(rng), w / 2, 1 - w / 2), std::clamp(c(rng), h / 2, 1 - h / 2), w, h};
    };
    const Box a = draw(), b = draw();
    CHECK(std::abs(iou(a, b) - raster_iou(a, b, 1000)) < 2e-3);
  }
}

TEST_CASE("giou fixtures and properties") {
  const Box b{0.3, 0.6, 0.2, 0.4};
  CHECK(giou(b, b) == doctest::Approx(1.0));
  const Box a = to_center({0.0, 0.0, 1.0 / 3.0, 1.0 / 3.0});
  const Box c = to_center({2.0 / 3.0, 2.0 / 3.0, 1.0, 1.0});
  CHECK(giou(a, c) == doctest::Approx(-7.0 / 9.0).epsilon(1e-12));
  CHECK(giou({0.5, 0.5, 0.0, 0.0}, {0.5, 0.5, 0.0, 0.0}) == 0.0);

  std::mt19937_64 rng(5);
  for (int i = 0; i < 1000; ++i) {
    const Box p = random_box(rng), q = random_box(rng);
    const double g = giou(p, q);
    CHECK(g == doctest::Approx(giou(q, p)).epsilon(1e-12));
    CHECK(g >= -1.0);
    CHECK(g <= 1.0);
    CHECK(g <= iou(p, q) + 1e-12);
    const double v = iou(p, q);
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("giou equals iou when the hull is the union") {
  // Nested boxes: the enclosing box is the outer one.
  const Box outer{0.5, 0.5, 0.6, 0.6}, inner{0.5, 0.5, 0.2, 0.3};
  CHECK(giou(outer, inner) == doctest::Approx(iou(outer, inner)));
  // Side-by-side boxes sharing an edge and a full side length.
  const Box left = to_center({0.1, 0.2, 0.4, 0.6}), right = to_center({0.4, 0.2, 0.9, 0.6});
  CHECK(giou(left, right) == doctest::Approx(iou(left, right)));
}

TEST_CASE("giou gradient matches central differences") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.15, 0.85), s(0.1, 0.5);
  for (int i = 0; i < 200; ++i) {
    const Box p{u(rng), u(rng), s(rng), s(rng)}, t{u(rng), u(rng), s(rng), s(rng)};
    const Eigen::Vector4d g = giou_grad(p, t);
    const double h = 1e-6;
    for (int k = 0; k < 4; ++k) {
      Box plus = p, minus = p;
      double* fp[] = {&plus.cx, &plus.cy, &plus.w, &plus.h};
      double* fm[] = {&minus.cx, &minus.cy, &minus.w, &minus.h};
      *fp[k] += h;
      *fm[k] -= h;
      const double numeric = (giou(plus, t) - giou(minus, t)) / (2 * h);
      CHECK(g[k] == doctest::Approx(numeric).epsilon(1e-5).scale(1.0));
    }
  }
}

TEST_CASE("pairwise iou") {
  const Box b{0.5, 0.5, 0.3, 0.3};
  const std::vector<Box> one{b};
  const Eigen::MatrixXd m1 = pairwise_iou(one, one);
  REQUIRE(m1.rows() == 1);
  CHECK(m1(0, 0) == doctest::Approx(1.0));

  std::mt19937_64 rng(23);
  std::vector<Box> as, bs;
  for (int i = 0; i < 20; ++i) as.push_back(random_box(rng));
  for (int i = 0; i < 10; ++i) bs.push_back(random_box(rng));
  const Eigen::MatrixXd m = pairwise_iou(as, bs);
  REQUIRE(m.rows() == 20);
  REQUIRE(m.cols() == 10);
  for (int i = 0; i < 20; ++i) {
    for (int j = 0; j < 10; ++j) CHECK(std::abs(m(i, j) - iou(as[i], bs[j])) < 1e-7);
  }

  const std::vector<Box> none;
  const Eigen::MatrixXd e = pairwise_iou(none, bs);
  CHECK(e.rows() == 0);
  CHECK(e.cols() == 10);
}
