// Copyright 2026 The rbev Authors. All Rights Reserved.
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

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "rbev/geometry.hpp"
#include "rbev/rng.hpp"

using namespace rbev;

namespace {

// Brute-force oracle: P = K [I|0] E on homogeneous coordinates, no shortcuts.
std::array<double, 3> oracle_uvw(const CameraRig& rig, const Vec3& p) {
  double e[4][4], k[3][3];
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) e[i][j] = rig.extrinsics[i * 4 + j];
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) k[i][j] = rig.intrinsics[i * 3 + j];
  double ke[3][4] = {};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j)
      for (int m = 0; m < 3; ++m) ke[i][j] += k[i][m] * e[m][j];
  const double h[4] = {p[0], p[1], p[2], 1.0};
  std::array<double, 3> out{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) out[i] += ke[i][j] * h[j];
  return out;
}

CameraRig random_rig(Rng& rng) {
  const Vec3 pos{uniform(rng, -30, 30), uniform(rng, -30, 30), uniform(rng, 3, 10)};
  return CameraRig::from_pose(pos, uniform(rng, 0, 2 * std::numbers::pi),
                              uniform(rng, -35, -5) * std::numbers::pi / 180.0, 800, 800, 600);
}

}  // namespace

TEST(CameraRig, AxisPermutationExample) {
  CameraRig rig = CameraRig::from_pose({0, 0, 0}, 0.0, 0.0, 800, 800, 600);
  const Vec3 pc = world_to_camera({10, 1, 0}, rig);
  EXPECT_NEAR(pc[0], -1.0, 1e-15);
  EXPECT_NEAR(pc[1], 0.0, 1e-15);
  EXPECT_NEAR(pc[2], 10.0, 1e-15);
  const ProjectionResult r = project({10, 1, 0}, rig);
  const auto o = oracle_uvw(rig, {10, 1, 0});
  EXPECT_TRUE(r.valid);
  EXPECT_NEAR(r.u, o[0] / o[2], 1e-12);
  EXPECT_NEAR(r.v, o[1] / o[2], 1e-12);
  EXPECT_NEAR(r.u, 320.0, 1e-12);
  EXPECT_NEAR(r.v, 300.0, 1e-12);
}

TEST(CameraRig, OpticalAxisHitsPrincipalPoint) {
  CameraRig rig = CameraRig::from_pose({1, 2, 5}, 0.7, -0.3, 800, 800, 600);
  const Vec3 fwd{std::cos(-0.3) * std::cos(0.7), std::cos(-0.3) * std::sin(0.7), std::sin(-0.3)};
  const ProjectionResult r = project({1 + 5 * fwd[0], 2 + 5 * fwd[1], 5 + 5 * fwd[2]}, rig);
  EXPECT_TRUE(r.valid);
  EXPECT_NEAR(r.u, 400.0, 1e-9);
  EXPECT_NEAR(r.v, 300.0, 1e-9);
  EXPECT_NEAR(r.depth, 5.0, 1e-12);
}

TEST(CameraRig, BehindCameraInvalid) {
  CameraRig rig = CameraRig::from_pose({0, 0, 0}, 0.0, 0.0, 800, 800, 600);
  EXPECT_FALSE(project({-5, 0, 0}, rig).valid);
  EXPECT_FALSE(project({0, 3, 0}, rig).valid);  // depth exactly zero
}

TEST(CameraRig, HalfOpenImageDomain) {
  CameraRig rig = CameraRig::from_pose({0, 0, 0}, 0.0, 0.0, 800, 800, 600);
  // u = 800 exactly: camera x = 0.5 * depth.
  EXPECT_FALSE(project({10, -5, 0}, rig).valid);
  // u = 0 exactly.
  EXPECT_TRUE(project({10, 5, 0}, rig).valid);
}

TEST(CameraRig, PoseRecoveredFromMatrices) {
  Rng rng(4);
  for (int i = 0; i < 100; ++i) {
    const Vec3 pos{uniform(rng, -30, 30), uniform(rng, -30, 30), uniform(rng, 3, 10)};
    const double yaw = uniform(rng, -3.1, 3.1), pitch = uniform(rng, -0.6, -0.1);
    CameraRig rig = CameraRig::from_pose(pos, yaw, pitch, 800, 800, 600);
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(rig.position[k], pos[k], 1e-12);
    EXPECT_NEAR(rig.yaw, yaw, 1e-12);
    EXPECT_NEAR(rig.pitch, pitch, 1e-12);
  }
}

TEST(CameraRig, ValidationRejectsBadMatrices) {
  CameraRig good = CameraRig::from_pose({0, 0, 5}, 0.0, -0.2, 800, 800, 600);
  Mat4 skewed = good.extrinsics;
  skewed[1] += 0.001;
  EXPECT_THROW(CameraRig::from_matrices(good.intrinsics, skewed, 800, 600), ConfigError);
  Mat3 k = good.intrinsics;
  k[0] = -1.0;
  EXPECT_THROW(CameraRig::from_matrices(k, good.extrinsics, 800, 600), ConfigError);
  EXPECT_THROW(CameraRig::from_matrices(good.intrinsics, good.extrinsics, 800, 600, true), ConfigError);
}

TEST(Projection, MatchesHomogeneousOracleAndRoundTrips) {
  Rng rng(77);
  for (int i = 0; i < 2000; ++i) {
    CameraRig rig = random_rig(rng);
    const Vec3 p{uniform(rng, -50, 50), uniform(rng, -50, 50), uniform(rng, 0, 4)};
    const ProjectionResult r = project(p, rig);
    const auto o = oracle_uvw(rig, p);
    EXPECT_NEAR(r.depth, o[2], 1e-9);
    if (std::abs(o[2]) > 1e-6) {
      EXPECT_NEAR(r.u, o[0] / o[2], 1e-9 * std::max(1.0, std::abs(r.u)));
      EXPECT_NEAR(r.v, o[1] / o[2], 1e-9 * std::max(1.0, std::abs(r.v)));
    }
    if (r.valid) {
      const Vec3 b = back_project(r.u, r.v, r.depth, rig);
      for (int k = 0; k < 3; ++k) EXPECT_NEAR(b[k], p[k], 1e-9);
    }
  }
}

TEST(Projection, TranslationEquivariance) {
  Rng rng(12);
  for (int i = 0; i < 500; ++i) {
    const Vec3 pos{uniform(rng, -30, 30), uniform(rng, -30, 30), uniform(rng, 3, 10)};
    const double yaw = uniform(rng, 0, 6.28), pitch = uniform(rng, -0.6, -0.1);
    const Vec3 shift{uniform(rng, -20, 20), uniform(rng, -20, 20), uniform(rng, -2, 2)};
    const Vec3 p{uniform(rng, -50, 50), uniform(rng, -50, 50), uniform(rng, 0, 4)};
    CameraRig a = CameraRig::from_pose(pos, yaw, pitch, 800, 800, 600);
    CameraRig b = CameraRig::from_pose({pos[0] + shift[0], pos[1] + shift[1], pos[2] + shift[2]}, yaw,
                                       pitch, 800, 800, 600);
    const ProjectionResult ra = project(p, a);
    const ProjectionResult rb = project({p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]}, b);
    EXPECT_NEAR(ra.depth, rb.depth, 1e-9);
    if (std::abs(ra.depth) > 1e-3) {
      EXPECT_NEAR(ra.u, rb.u, 1e-9 * std::max(1.0, std::abs(ra.u)));
      EXPECT_NEAR(ra.v, rb.v, 1e-9 * std::max(1.0, std::abs(ra.v)));
    }
  }
}

TEST(Pillars, Examples) {
  BevGridSpec g;
  g.x_min = g.y_min = -1;
  g.x_max = g.y_max = 1;
  g.rows = g.cols = 1;
  g.anchor_heights = {0.5};
  Tensor t = reference_pillars(g);
  ASSERT_EQ(t.shape(), (Shape{1, 1, 1, 3}));
  EXPECT_EQ(t[0], 0.0);
  EXPECT_EQ(t[1], 0.0);
  EXPECT_EQ(t[2], 0.5);

  EXPECT_EQ(reference_pillars(BevGridSpec::m2i()).shape(), (Shape{8, 200, 200, 3}));

  g.x_min = g.y_min = 0;
  g.x_max = g.y_max = 2;
  g.rows = g.cols = 2;
  g.anchor_heights = {1.0};
  t = reference_pillars(g);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_TRUE(t[i * 3] == 0.5 || t[i * 3] == 1.5);
    EXPECT_TRUE(t[i * 3 + 1] == 0.5 || t[i * 3 + 1] == 1.5);
  }
  EXPECT_EQ(t[3], 1.5);  // (row 0, col 1)
  EXPECT_EQ(t[4], 0.5);
}

TEST(Pillars, HeightMultisetPerCell) {
  BevGridSpec g = BevGridSpec::desk();
  g.rows = g.cols = 7;
  Tensor t = reference_pillars(g);
  for (std::size_t p = 0; p < 49; ++p) {
    for (std::size_t j = 0; j < g.n_ref(); ++j) {
      const std::size_t base = (j * 49 + p) * 3;
      EXPECT_EQ(t[base + 2], g.anchor_heights[j]);
      EXPECT_EQ(t[base], t[p * 3]);
      EXPECT_EQ(t[base + 1], t[p * 3 + 1]);
    }
  }
}

TEST(Grid, ValidationAndPresets) {
  BevGridSpec g = BevGridSpec::desk();
  EXPECT_EQ(g.num_cells(), 10000u);
  EXPECT_NEAR(g.cell_dx(), 0.512, 1e-12);
  g.anchor_heights = {1.0, 1.0};
  EXPECT_THROW(g.validate(), ConfigError);
  EXPECT_THROW(BevGridSpec::preset("huge"), ConfigError);
}

TEST(PointSampling, AllDummyInvalid) {
  BevGridSpec g = BevGridSpec::desk();
  g.rows = g.cols = 10;
  PointSamples s = point_sampling(g, pad_rigs({}, 3));
  EXPECT_EQ(s.valid_count(), 0u);
  VisibilityMask m = visibility(s);
  EXPECT_EQ(m.count(), 0u);
}

TEST(PointSampling, SinglePointInFrustum) {
  BevGridSpec g;
  g.x_min = 9;
  g.x_max = 11;
  g.y_min = -1;
  g.y_max = 1;
  g.rows = g.cols = 1;
  g.anchor_heights = {0.0001};
  CameraRig rig = CameraRig::from_pose({0, 0, 0}, 0.0, 0.0, 800, 800, 600);
  PointSamples s = point_sampling(g, {rig});
  EXPECT_EQ(s.valid_count(), 1u);
}

TEST(PointSampling, MatchesScalarLoopAndVisibilityReduction) {
  Rng rng(31);
  BevGridSpec g = BevGridSpec::desk();
  g.rows = g.cols = 25;
  std::vector<CameraRig> rigs;
  for (int i = 0; i < 3; ++i) rigs.push_back(random_rig(rng));
  rigs = pad_rigs(rigs, 4);
  PointSamples s = point_sampling(g, rigs);
  VisibilityMask m = visibility(s);
  std::size_t count = 0;
  for (std::size_t n = 0; n < rigs.size(); ++n)
    for (std::size_t p = 0; p < g.num_cells(); ++p) {
      bool any = false;
      for (std::size_t j = 0; j < g.n_ref(); ++j) {
        const Vec3 pt{g.center_x(p % g.cols), g.center_y(p / g.cols), g.anchor_heights[j]};
        const auto o = oracle_uvw(rigs[n], pt);
        const bool valid = !rigs[n].is_dummy && o[2] > 1e-12 && o[0] / o[2] >= 0 &&
                           o[0] / o[2] < 800 && o[1] / o[2] >= 0 && o[1] / o[2] < 600;
        EXPECT_EQ(valid, s.valid[s.index(n, j, p)] != 0);
        count += valid;
        any = any || valid;
      }
      EXPECT_EQ(any, m(p, n));
    }
  EXPECT_EQ(count, s.valid_count());
  EXPECT_GT(count, 0u);
  for (std::size_t p = 0; p < g.num_cells(); ++p) EXPECT_FALSE(m(p, 3));
}

TEST(Visibility, SingleValidPoint) {
  PointSamples s;
  s.num_cams = 2;
  s.n_ref = 4;
  s.num_cells = 5;
  s.valid.assign(40, 0);
  s.uv.assign(80, 0.0);
  EXPECT_EQ(visibility(s).count(), 0u);
  s.valid[s.index(1, 3, 2)] = 1;
  VisibilityMask m = visibility(s);
  EXPECT_EQ(m.count(), 1u);
  EXPECT_TRUE(m(2, 1));
}

TEST(PadRigs, Examples) {
  Rng rng(1);
  std::vector<CameraRig> four;
  for (int i = 0; i < 4; ++i) four.push_back(random_rig(rng));
  auto same = pad_rigs(four, 4);
  ASSERT_EQ(same.size(), 4u);
  for (int i = 0; i < 4; ++i) EXPECT_FALSE(same[i].is_dummy);

  auto padded = pad_rigs({four[0], four[1]}, 4);
  ASSERT_EQ(padded.size(), 4u);
  for (int i = 2; i < 4; ++i) {
    EXPECT_TRUE(padded[i].is_dummy);
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) EXPECT_EQ(padded[i].intrinsics[r * 3 + c], r == c ? 1.0 : 0.0);
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) EXPECT_EQ(padded[i].extrinsics[r * 4 + c], r == c ? 1.0 : 0.0);
  }
  auto one = pad_rigs({}, 1);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_TRUE(one[0].is_dummy);
  EXPECT_THROW(pad_rigs(four, 3), ConfigError);
}

TEST(RigJson, RoundTrip) {
  Rng rng(8);
  std::vector<CameraRig> rigs{random_rig(rng), random_rig(rng)};
  rigs = pad_rigs(rigs, 3);
  auto back = rigs_from_json(rigs_to_json(rigs));
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].intrinsics, rigs[i].intrinsics);
    EXPECT_EQ(back[i].extrinsics, rigs[i].extrinsics);
    EXPECT_EQ(back[i].position, rigs[i].position);
    EXPECT_EQ(back[i].yaw, rigs[i].yaw);
    EXPECT_EQ(back[i].is_dummy, rigs[i].is_dummy);
  }
  EXPECT_THROW(rigs_from_json("{\"x\":1}"), ConfigError);
  EXPECT_THROW(rigs_from_json("[{\"intrinsics\":[1,2]}]"), ConfigError);
  EXPECT_THROW(rigs_from_json("not json"), ConfigError);
}

TEST(WrapAngle, Range) {
  EXPECT_EQ(wrap_angle(std::numbers::pi), std::numbers::pi);
  EXPECT_NEAR(wrap_angle(-std::numbers::pi), std::numbers::pi, 1e-15);
  EXPECT_NEAR(wrap_angle(3 * std::numbers::pi / 2), -std::numbers::pi / 2, 1e-15);
}
