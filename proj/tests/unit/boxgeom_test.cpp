// Copyright 2026 The PBR Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "pbr/boxgeom.hpp"
#include "pbr/error.hpp"
#include "pbr/rng.hpp"

using namespace pbr;

namespace {

constexpr double kTight = 1e-12;

void check_box(const Box& got, const Box& want, double tol = kTight) {
  CHECK(std::abs(got.x1 - want.x1) <= tol);
  CHECK(std::abs(got.y1 - want.y1) <= tol);
  CHECK(std::abs(got.x2 - want.x2) <= tol);
  CHECK(std::abs(got.y2 - want.y2) <= tol);
}

Box random_box(Rng& rng, double img, double min_side, double max_side) {
  const double w = rng.uniform(min_side, max_side);
  const double h = rng.uniform(min_side, max_side);
  const double x = rng.uniform(0, img - w);
  const double y = rng.uniform(0, img - h);
  return {x, y, x + w, y + h};
}

// Unique set K with: i in K iff no higher-scored member of K of the same
// category overlaps i above the threshold. Found by trying every subset.
std::vector<std::size_t> exhaustive_nms(const std::vector<ScoredBox>& d, double thresh) {
  const std::size_t n = d.size();
  for (unsigned mask = 0; mask < (1u << n); ++mask) {
    bool consistent = true;
    for (std::size_t i = 0; i < n && consistent; ++i) {
      bool blocked = false;
      for (std::size_t j = 0; j < n; ++j) {
        if ((mask >> j & 1u) && d[j].score > d[i].score && d[j].category == d[i].category &&
            iou(d[j].box, d[i].box) > thresh) {
          blocked = true;
        }
      }
      consistent = ((mask >> i & 1u) != 0) == !blocked;
    }
    if (!consistent) continue;
    std::vector<std::size_t> kept;
    for (std::size_t i = 0; i < n; ++i) {
      if (mask >> i & 1u) kept.push_back(i);
    }
    std::sort(kept.begin(), kept.end(),
              [&](std::size_t a, std::size_t b) { return d[a].score > d[b].score; });
    return kept;
  }
  return {};
}

}  // namespace

TEST_CASE("shrink factor halves per stage") {
  CHECK(shrink_factor(1) == 0.5);
  CHECK(shrink_factor(2) == 0.25);
  CHECK(shrink_factor(10) == 1.0 / 1024.0);
  CHECK_THROWS_AS(shrink_factor(0), InvalidArgument);
  CHECK_THROWS_AS(shrink_factor(-3), InvalidArgument);
}

TEST_CASE("refine config schedule and validation") {
  RefineConfig cfg;
  CHECK(cfg.shrink(1) == 0.5);
  CHECK(cfg.shrink(2) == 0.25);
  cfg.schedule = {0.4, 0.1};
  CHECK(cfg.shrink(2) == 0.1);
  cfg.schedule = {0.4};
  CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
  cfg.schedule = {0.4, 1.5};
  CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
  cfg.schedule = {};
  cfg.clamp = 0.0;
  CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
  cfg.clamp = std::nullopt;
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("boundary areas of an interior box") {
  const Box box{10, 20, 30, 60};
  const BoundaryAreas a = boundary_areas(box, 0.5, 100, 100);
  check_box(a.left, {5, 20, 15, 60});
  check_box(a.right, {25, 20, 35, 60});
  check_box(a.up, {10, 10, 30, 30});
  check_box(a.bottom, {10, 50, 30, 70});
  CHECK(a.m_l == 10);
  CHECK(a.m_r == 30);
  CHECK(a.m_u == 20);
  CHECK(a.m_b == 60);
  for (bool t : a.truncated) CHECK_FALSE(t);

  const BoundaryAreas full = boundary_areas(box, 1.0, 100, 100);
  CHECK(full.left.width() == 20);
  CHECK(full.left.cx() == 10);
}

TEST_CASE("boundary areas slide inward at the image edge") {
  const Box box{2, 20, 30, 60};
  const BoundaryAreas a = boundary_areas(box, 0.5, 100, 100);
  check_box(a.left, {0, 20, 14, 60});
  CHECK(a.m_l == 7);
  CHECK(a.truncated[0]);
  CHECK_FALSE(a.truncated[1]);

  const BoundaryAreas b = boundary_areas({60, 90, 99, 100}, 0.5, 100, 100);
  CHECK(b.right.x2 == 100);
  CHECK(b.right.width() == doctest::Approx(19.5));
  CHECK(b.bottom.y2 == 100);
  CHECK(b.bottom.height() == doctest::Approx(5));
  CHECK(b.m_b == doctest::Approx(97.5));
}

TEST_CASE("boundary areas reject bad input") {
  CHECK_THROWS_AS(boundary_areas({10, 10, 20, 20}, 0.0, 100, 100), InvalidArgument);
  CHECK_THROWS_AS(boundary_areas({10, 10, 20, 20}, 1.5, 100, 100), InvalidArgument);
  CHECK_THROWS_AS(boundary_areas({10, 10, 120, 20}, 0.5, 100, 100), InvalidArgument);
  CHECK_THROWS_AS(boundary_areas({10, 10, 10, 20}, 0.5, 100, 100), DegenerateBox);
  CHECK_THROWS_AS(boundary_areas({10, 10, 20, 20}, 1e-14, 100, 100), DegenerateBox);
}

TEST_CASE("area extents are preserved under truncation") {
  Rng rng(7);
  for (int i = 0; i < 2000; ++i) {
    const double img = 128;
    Box box = random_box(rng, img, 4, 100);
    // Pin one or two sides to the image border.
    if (rng.uniform() < 0.5) box.x1 = 0;
    if (rng.uniform() < 0.5) box.y2 = img;
    const double c = rng.uniform() < 0.5 ? 0.5 : 0.25;
    const BoundaryAreas a = boundary_areas(box, c, img, img);
    for (Side s : kSides) {
      const Box& area = a.area(s);
      const bool horizontal = s == Side::kLeft || s == Side::kRight;
      const double extent = horizontal ? area.width() : area.height();
      const double want = c * (horizontal ? box.width() : box.height());
      CHECK(std::abs(extent - want) <= 1e-9);
      CHECK(area.x1 >= 0);
      CHECK(area.y1 >= 0);
      CHECK(area.x2 <= img);
      CHECK(area.y2 <= img);
      const double lo = horizontal ? area.x1 : area.y1;
      const double hi = horizontal ? area.x2 : area.y2;
      CHECK(a.center_line(s) > lo);
      CHECK(a.center_line(s) < hi);
    }
  }
}

TEST_CASE("sigma encoding examples") {
  const Box box{10, 20, 30, 60};
  const BoundaryAreas a = boundary_areas(box, 0.5, 100, 100);
  const Sigma s = encode_sigma(a, box, 0.5, {12, 22, 28, 58});
  CHECK(s.l == doctest::Approx(0.2));
  CHECK(s.r == doctest::Approx(-0.2));
  CHECK(s.u == doctest::Approx(0.1));
  CHECK(s.b == doctest::Approx(-0.1));
  CHECK(encode_sigma(a, box, 0.5, box) == Sigma{});

  const Box edge{2, 20, 30, 60};
  const Sigma t = encode_sigma(boundary_areas(edge, 0.5, 100, 100), edge, 0.5, {4, 20, 30, 60});
  CHECK(t.l == doctest::Approx(-3.0 / 14.0));

  CHECK_THROWS_AS(encode_sigma(a, {10, 20, 10, 60}, 0.5, box), DegenerateBox);
}

TEST_CASE("sigma clamping") {
  const ClampedSigma c = clamp_sigma({0.7, -0.3, 0.1, -0.9}, 0.5);
  CHECK(c.sigma == Sigma{0.5, -0.3, 0.1, -0.5});
  CHECK(c.clipped == std::array<bool, 4>{true, false, false, true});
  const Sigma inside{0.4, -0.49, 0, 0.1};
  CHECK(clamp_sigma(inside, 0.5).sigma == inside);

  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    const Sigma a{rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)};
    Sigma b = a;
    b.l += rng.uniform(0, 1);
    const double q = rng.uniform(0.05, 1.5);
    const Sigma once = clamp_sigma(a, q).sigma;
    CHECK(clamp_sigma(once, q).sigma == once);
    CHECK(clamp_sigma(b, q).sigma.l >= once.l);
    for (Side s : kSides) CHECK(std::abs(once[s]) <= q);
  }
}

TEST_CASE("sigma decoding") {
  const Box box{10, 20, 30, 60};
  const BoundaryAreas a = boundary_areas(box, 0.5, 100, 100);
  check_box(decode_box(a, box, 0.5, {0.2, -0.2, 0.1, -0.1}).box, {12, 22, 28, 58});
  CHECK(decode_box(a, box, 0.5, {}).box == box);

  // Crossed sides are re-ordered and flagged.
  const DecodedBox crossed = decode_box(a, box, 0.5, {2.5, -2.5, 0, 0});
  CHECK(crossed.reordered);
  check_box(crossed.box, {5, 20, 35, 60});

  const DecodedBox clipped = decode_box(a, box, 0.5, {-3, 0, 0, 0});
  CHECK(clipped.clipped);
  CHECK(clipped.box.x1 == 0);

  CHECK_THROWS_AS(decode_box(a, box, 0.5, {1, -1, 0, 0}), DegenerateBox);
}

TEST_CASE("sigma round trip and anti-symmetry") {
  Rng rng(11);
  int checked = 0;
  while (checked < 10000) {
    const double img = 256;
    const Box box = random_box(rng, img, 20, 80);
    const double c = rng.uniform() < 0.5 ? 0.5 : 0.25;
    const BoundaryAreas a = boundary_areas(box, c, img, img);
    if (std::any_of(a.truncated.begin(), a.truncated.end(), [](bool t) { return t; })) continue;
    const Sigma want{rng.uniform(-0.45, 0.45), rng.uniform(-0.45, 0.45),
                     rng.uniform(-0.45, 0.45), rng.uniform(-0.45, 0.45)};
    const Box target = decode_box(a, box, c, want).box;
    if (!(target.x1 < target.x2 && target.y1 < target.y2)) continue;
    const Box back = decode_box(a, box, c, encode_sigma(a, box, c, target)).box;
    CHECK(std::abs(back.x1 - target.x1) < 1e-9);
    CHECK(std::abs(back.y1 - target.y1) < 1e-9);
    CHECK(std::abs(back.x2 - target.x2) < 1e-9);
    CHECK(std::abs(back.y2 - target.y2) < 1e-9);
    ++checked;
  }

  // Swapping box and target negates the displacement once both use the
  // same area scale (equal-size boxes), away from the edges.
  for (int i = 0; i < 1000; ++i) {
    const Box p = random_box(rng, 200, 30, 60);
    const double dx = rng.uniform(-5, 5), dy = rng.uniform(-5, 5);
    const Box q{p.x1 + 50 + dx, p.y1 + 50 + dy, p.x2 + 50 + dx, p.y2 + 50 + dy};
    const Box p2{p.x1 + 50, p.y1 + 50, p.x2 + 50, p.y2 + 50};
    const auto ap = boundary_areas(p2, 0.5, 400, 400);
    const auto aq = boundary_areas(q, 0.5, 400, 400);
    const Sigma fwd = encode_sigma(ap, p2, 0.5, q);
    const Sigma rev = encode_sigma(aq, q, 0.5, p2);
    for (Side s : kSides) CHECK(std::abs(fwd[s] + rev[s]) < 1e-12);
  }
}

TEST_CASE("stage-1 delta transform") {
  const Box p{0, 0, 10, 10};
  const Delta zero = encode_delta(p, p);
  for (double v : zero) CHECK(v == 0);
  const Delta d = encode_delta(p, {1, 0, 11, 10}, {0.1, 0.2});
  CHECK(d[0] == doctest::Approx(1.0));
  CHECK(d[1] == 0);
  CHECK(d[2] == 0);
  CHECK(d[3] == 0);
  CHECK_THROWS_AS(encode_delta(p, {1, 0, 1, 10}), DegenerateBox);
  CHECK_THROWS_AS(encode_delta(p, {1, 0, 4, 10}, {0, 0.2}), InvalidArgument);

  Rng rng(5);
  for (int i = 0; i < 1000; ++i) {
    const Box a = random_box(rng, 512, 16, 256);
    const Box g = random_box(rng, 512, 16, 256);
    const Box back = decode_delta(a, encode_delta(a, g));
    check_box(back, g, 1e-9);
  }
}

TEST_CASE("intersection over union") {
  const Box a{0, 0, 10, 10};
  CHECK(iou(a, a) == 1.0);
  CHECK(iou(a, {5, 5, 15, 15}) == doctest::Approx(1.0 / 7.0));
  CHECK(iou(a, {20, 20, 30, 30}) == 0.0);
  CHECK(iou(a, {10, 0, 20, 10}) == 0.0);

  Rng rng(9);
  for (int i = 0; i < 1000; ++i) {
    const Box p = random_box(rng, 64, 1, 40);
    const Box q = random_box(rng, 64, 1, 40);
    CHECK(iou(p, q) == iou(q, p));
    CHECK(iou(p, p) == 1.0);
    // Power-of-two shifts keep every coordinate difference exact.
    const double s = 16.0 * rng.uniform_int(-4, 4);
    const Box ps{p.x1 + s, p.y1 + s, p.x2 + s, p.y2 + s};
    const Box qs{q.x1 + s, q.y1 + s, q.x2 + s, q.y2 + s};
    CHECK(std::abs(iou(ps, qs) - iou(p, q)) < 1e-12);
  }
}

TEST_CASE("greedy suppression") {
  CHECK(nms({}, 0.5).empty());
  const Box b{0, 0, 10, 10};
  auto kept = nms({{b, 0.8, 0}, {b, 0.9, 0}}, 0.5);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].score == 0.9);
  CHECK(nms({{b, 0.8, 0}, {b, 0.9, 1}}, 0.5).size() == 2);
  CHECK(nms({{b, 0.8, 0}, {{20, 20, 30, 30}, 0.9, 0}}, 0.5).size() == 2);

  Rng rng(13);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<ScoredBox> dets;
    for (int i = 0; i < 5; ++i) {
      dets.push_back({random_box(rng, 40, 8, 30), rng.uniform(), rng.uniform_int(0, 1)});
    }
    const double thresh = rng.uniform(0.2, 0.7);
    CHECK(nms_indices(dets, thresh) == exhaustive_nms(dets, thresh));
    const auto once = nms(dets, thresh);
    const auto twice = nms(once, thresh);
    REQUIRE(once.size() == twice.size());
    for (std::size_t i = 0; i < once.size(); ++i) CHECK(once[i].box == twice[i].box);
    for (std::size_t i = 0; i < once.size(); ++i) {
      if (i > 0) CHECK(once[i - 1].score >= once[i].score);
      for (std::size_t j = i + 1; j < once.size(); ++j) {
        if (once[i].category == once[j].category) CHECK(iou(once[i].box, once[j].box) <= thresh);
      }
    }
  }
}

TEST_CASE("clipping to the image") {
  const ClippedBox inside = clip_to_image({10, 10, 20, 20}, 100, 100);
  CHECK(inside.box == Box{10, 10, 20, 20});
  CHECK_FALSE(inside.degenerate);
  CHECK(clip_to_image({-5, 0, 10, 10}, 100, 100).box == Box{0, 0, 10, 10});
  CHECK(clip_to_image({-5, -5, -1, -1}, 100, 100).degenerate);
}
