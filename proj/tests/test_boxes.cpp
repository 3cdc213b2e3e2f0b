#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <random>

#include "doctest.h"
#include "mfdet/boxes.hpp"

using namespace mfdet;

TEST_CASE("encode then decode recovers the box") {
  std::mt19937_64 rng(7);
  auto urand = [&](double lo, double hi) {
    return lo + (hi - lo) * (static_cast<double>(rng() >> 11) * 0x1.0p-53);
  };
  for (int i = 0; i < 200; ++i) {
    Anchor a{urand(-20, 20), urand(-20, 20), urand(1, 6), urand(0.5, 3), urand(-M_PI, M_PI)};
    GroundTruthBox g;
    g.x = a.x + urand(-3, 3);
    g.y = a.y + urand(-3, 3);
    g.l = urand(1, 6);
    g.w = urand(0.5, 3);
    g.yaw = urand(-M_PI, M_PI);
    double r[kBoxDim];
    encode_box(a, g, r);
    BoxPrediction p = decode_box(a, r);
    CHECK(std::abs(p.x - g.x) < 1e-6);
    CHECK(std::abs(p.y - g.y) < 1e-6);
    CHECK(std::abs(p.l - g.l) < 1e-6);
    CHECK(std::abs(p.w - g.w) < 1e-6);
    CHECK(std::abs(wrap_angle(p.yaw - g.yaw)) < 1e-6);
  }
}

TEST_CASE("zero residual decodes to the anchor itself") {
  Anchor a{2, -3, 4.2, 1.8, 0.6};
  double r[kBoxDim] = {0, 0, 0, 0, 0, 0};
  BoxPrediction p = decode_box(a, r);
  CHECK(p.x == doctest::Approx(a.x));
  CHECK(p.y == doctest::Approx(a.y));
  CHECK(p.l == doctest::Approx(a.l));
  CHECK(p.w == doctest::Approx(a.w));
  CHECK(std::abs(wrap_angle(p.yaw - a.yaw)) < 1e-12);
}

TEST_CASE("direction bin splits on the sign of wrapped yaw") {
  CHECK(direction_bin(0.0) == 1);
  CHECK(direction_bin(1.0) == 1);
  CHECK(direction_bin(-0.5) == 0);
  CHECK(direction_bin(M_PI) == 1);           // wraps to +pi
  CHECK(direction_bin(M_PI + 0.1) == 0);     // just past +pi wraps negative
  CHECK(direction_bin(2 * M_PI) == 1);       // wraps to 0
}

TEST_CASE("nms keeps the best of overlapping duplicates and all disjoint boxes") {
  std::vector<BoxPrediction> boxes;
  boxes.push_back({0, 0, 4, 2, 0, 0, 0.9});
  boxes.push_back({0.2, 0.05, 4, 2, 0.02, 0, 0.8});   // near-duplicate, lower score
  boxes.push_back({10, 10, 4, 2, 0, 0, 0.5});         // far away
  boxes.push_back({0.1, 0, 4, 2, 0, 1, 0.95});        // overlapping but other class

  auto kept = nms(boxes, 0.5);
  REQUIRE(kept.size() == 3);
  CHECK(kept[0].score == doctest::Approx(0.95));
  CHECK(kept[1].score == doctest::Approx(0.9));
  CHECK(kept[2].score == doctest::Approx(0.5));

  // threshold above the pair's IoU keeps everything
  auto all = nms(boxes, 0.99);
  CHECK(all.size() == 4);
}
