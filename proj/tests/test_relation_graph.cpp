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
#include <set>

#include "json.hpp"
#include "rbev/relation_graph.hpp"
#include "rbev/rng.hpp"

using namespace rbev;

namespace {

// Rotation-based oracle: heading difference from dot/cross products with the
// camera's horizontal axis, no atan2 or wrapping.
EdgeGeometry oracle(double px, double py, const Vec3& cam, double yaw, double pitch, double rx,
                    double ry, double zmax) {
  const double dx = px - cam[0], dy = py - cam[1];
  const double d = std::sqrt(dx * dx + dy * dy);
  double c = 1.0, s = 0.0;
  if (d >= 1e-9) {
    const double hx = std::cos(yaw), hy = std::sin(yaw);
    c = (dx * hx + dy * hy) / d;
    s = (hx * dy - hy * dx) / d;
  }
  return {dx / rx, dy / ry, cam[2] / zmax, d / std::sqrt(rx * rx + ry * ry), c, s, std::cos(pitch),
          std::sin(pitch)};
}

BevGridSpec m2i_grid() { return BevGridSpec::m2i(); }

}  // namespace

TEST(EdgeGeometry, CoincidentGroundPosition) {
  BevGridSpec g = m2i_grid();
  CameraRig rig = CameraRig::from_pose({3, 4, 6}, 1.0, -0.3, 800, 800, 600);
  EdgeGeometry e = edge_geometry(rig.position[0], rig.position[1], rig, g);
  EXPECT_EQ(e[0], 0.0);
  EXPECT_EQ(e[1], 0.0);
  EXPECT_NEAR(e[2], 0.5, 1e-15);
  EXPECT_EQ(e[3], 0.0);
  EXPECT_EQ(e[4], 1.0);
  EXPECT_EQ(e[5], 0.0);
  EXPECT_NEAR(e[6], std::cos(-0.3), 1e-15);
  EXPECT_NEAR(e[7], std::sin(-0.3), 1e-15);
}

TEST(EdgeGeometry, HandExample) {
  BevGridSpec g = m2i_grid();
  CameraRig rig = CameraRig::from_pose({0, 0, 6}, 0.0, -0.3, 800, 800, 600);
  EdgeGeometry e = edge_geometry(10, 0, rig, g);
  const double expect[8] = {10 / 51.2, 0, 0.5, 10 / (51.2 * std::sqrt(2.0)), 1, 0, std::cos(-0.3),
                            std::sin(-0.3)};
  for (int i = 0; i < 8; ++i) EXPECT_NEAR(e[i], expect[i], 1e-12) << i;
}

TEST(EdgeGeometry, QuarterTurn) {
  BevGridSpec g = m2i_grid();
  CameraRig rig = CameraRig::from_pose({0, 0, 6}, std::numbers::pi / 2, -0.3, 800, 800, 600);
  EdgeGeometry e = edge_geometry(10, 0, rig, g);
  EXPECT_NEAR(e[4], 0.0, 1e-12);
  EXPECT_NEAR(e[5], -1.0, 1e-12);
}

TEST(EdgeGeometry, MatchesRotationOracle) {
  Rng rng(101);
  BevGridSpec g = m2i_grid();
  for (int i = 0; i < 2000; ++i) {
    const Vec3 pos{uniform(rng, -50, 50), uniform(rng, -50, 50), uniform(rng, 3, 10)};
    CameraRig rig = CameraRig::from_pose(pos, uniform(rng, 0, 6.283), uniform(rng, -0.6, -0.08), 800,
                                         800, 600);
    const double px = uniform(rng, -51.2, 51.2), py = uniform(rng, -51.2, 51.2);
    EdgeGeometry e = edge_geometry(px, py, rig, g);
    EdgeGeometry o = oracle(px, py, rig.position, rig.yaw, rig.pitch, 51.2, 51.2, 12.0);
    for (int k = 0; k < 8; ++k) EXPECT_NEAR(e[k], o[k], 1e-12) << k;
    EXPECT_NEAR(e[4] * e[4] + e[5] * e[5], 1.0, 1e-12);
    EXPECT_NEAR(e[6] * e[6] + e[7] * e[7], 1.0, 1e-12);
    EXPECT_GE(e[3], 0.0);
    // Half-extent normalization: any pair inside the range spans at most two
    // half-extents, and at most one when the offset itself is within a half-extent.
    EXPECT_LE(std::abs(e[0]), 2.0 + 1e-12);
    EXPECT_LE(std::abs(e[1]), 2.0 + 1e-12);
    if (std::abs(px - rig.position[0]) <= 51.2) {
      EXPECT_LE(std::abs(e[0]), 1.0 + 1e-12);
    }
    if (std::abs(py - rig.position[1]) <= 51.2) {
      EXPECT_LE(std::abs(e[1]), 1.0 + 1e-12);
    }
  }
}

TEST(EdgeGeometry, UnitBoundsForCentredCamera) {
  Rng rng(102);
  BevGridSpec g = m2i_grid();
  for (int i = 0; i < 1000; ++i) {
    CameraRig rig = CameraRig::from_pose({0, 0, uniform(rng, 3, 10)}, uniform(rng, 0, 6.283),
                                         uniform(rng, -0.6, -0.08), 800, 800, 600);
    EdgeGeometry e = edge_geometry(uniform(rng, -51.2, 51.2), uniform(rng, -51.2, 51.2), rig, g);
    EXPECT_LE(std::abs(e[0]), 1.0 + 1e-12);
    EXPECT_LE(std::abs(e[1]), 1.0 + 1e-12);
  }
}

TEST(EdgeGeometry, ContinuousAcrossPi) {
  BevGridSpec g = m2i_grid();
  CameraRig rig = CameraRig::from_pose({0, 0, 6}, 0.0, -0.3, 800, 800, 600);
  const double eps = 1e-6;
  // Cells just above and below the negative x axis: delta near +pi and -pi.
  EdgeGeometry a = edge_geometry(-10, 10 * std::tan(eps), rig, g);
  EdgeGeometry b = edge_geometry(-10, -10 * std::tan(eps), rig, g);
  EXPECT_GT(std::atan2(a[5], a[4]), 3.14);
  EXPECT_LT(std::atan2(b[5], b[4]), -3.14);
  for (int k = 4; k < 6; ++k) EXPECT_LT(std::abs(a[k] - b[k]), 1e-5);
}

TEST(EdgeGeometry, ScaleInvariant) {
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    const double s = uniform(rng, 0.1, 10.0);
    BevGridSpec g = m2i_grid();
    BevGridSpec gs = g;
    gs.x_min *= s;
    gs.x_max *= s;
    gs.y_min *= s;
    gs.y_max *= s;
    gs.z_max *= s;
    const Vec3 pos{uniform(rng, -50, 50), uniform(rng, -50, 50), uniform(rng, 3, 10)};
    const double yaw = uniform(rng, 0, 6.28), pitch = uniform(rng, -0.6, -0.1);
    const double px = uniform(rng, -51, 51), py = uniform(rng, -51, 51);
    EdgeGeometry a = edge_geometry(px, py, CameraRig::from_pose(pos, yaw, pitch, 800, 800, 600), g);
    EdgeGeometry b = edge_geometry(
        px * s, py * s, CameraRig::from_pose({pos[0] * s, pos[1] * s, pos[2] * s}, yaw, pitch, 800, 800, 600), gs);
    for (int k = 0; k < 8; ++k) EXPECT_NEAR(a[k], b[k], 1e-12);
  }
}

TEST(EdgeGeometry, DummyRejected) {
  EXPECT_THROW(edge_geometry(0, 0, CameraRig::dummy(800, 600), m2i_grid()), ConfigError);
}

TEST(PoolCameraNode, Examples) {
  EXPECT_EQ(pool_camera_node(Tensor(Shape{3, 2, 2}, 1.25)).values(), (std::vector<double>{1.25, 1.25, 1.25}));
  EXPECT_EQ(pool_camera_node(Tensor(Shape{1, 2, 2}, std::vector<double>{1, 2, 3, 4}))[0], 2.5);
  const Tensor zero = pool_camera_node(Tensor(Shape{4, 3, 3}));
  for (double v : zero.data()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(pool_camera_node(Tensor(Shape{2, 0, 3})), DimensionError);
  Tape t;
  Var pooled = pool_camera_node(t.constant(Tensor(Shape{1, 2, 2}, std::vector<double>{1, 2, 3, 4})));
  EXPECT_EQ(pooled.shape(), (Shape{1, 1}));
  EXPECT_EQ(pooled.value()[0], 2.5);
}

namespace {

struct Fixture {
  BevGridSpec grid;
  std::vector<CameraRig> rigs;
  VisibilityMask vis;
  RelationGraph graph;
};

Fixture make(std::uint64_t seed, std::size_t real, std::size_t total) {
  Rng rng(seed);
  Fixture f;
  f.grid = BevGridSpec::desk();
  f.grid.rows = f.grid.cols = 12;
  for (std::size_t i = 0; i < real; ++i) {
    const double a = uniform(rng, 0, 6.283);
    const Vec3 pos{20 * std::cos(a), 20 * std::sin(a), uniform(rng, 3, 10)};
    f.rigs.push_back(CameraRig::from_pose(pos, a + std::numbers::pi + uniform(rng, -0.5, 0.5),
                                          uniform(rng, -0.6, -0.1), 800, 800, 600));
  }
  f.rigs = pad_rigs(f.rigs, total);
  f.vis = visibility(point_sampling(f.grid, f.rigs));
  std::vector<Tensor> maps;
  for (std::size_t n = 0; n < total; ++n)
    maps.push_back(Tensor(Shape{4, 3, 5}, f.rigs[n].is_dummy ? 0.0 : static_cast<double>(n + 1)));
  f.graph = build_graph(f.rigs, maps, Tensor(Shape{f.grid.num_cells(), 4}), f.vis, f.grid);
  return f;
}

}  // namespace

TEST(BuildGraph, EdgesMirrorVisibility) {
  Fixture f = make(3, 3, 4);
  const GraphTopology& t = f.graph.topology;
  EXPECT_EQ(t.num_edges(), f.vis.count());
  EXPECT_GT(t.num_edges(), 0u);
  std::set<std::pair<std::uint32_t, std::uint32_t>> seen;
  for (std::size_t k = 0; k < t.num_edges(); ++k) {
    EXPECT_TRUE(f.vis(t.edge_cell[k], t.edge_cam[k]));
    EXPECT_FALSE(f.rigs[t.edge_cam[k]].is_dummy);
    EXPECT_TRUE(seen.insert({t.edge_cell[k], t.edge_cam[k]}).second);
    if (k > 0) {
      const auto prev = std::make_pair(t.edge_cell[k - 1], t.edge_cam[k - 1]);
      EXPECT_LT(prev, std::make_pair(t.edge_cell[k], t.edge_cam[k]));
    }
  }
  EXPECT_EQ(f.graph.cam_nodes.dim(0), 4u);
  EXPECT_EQ(f.graph.cam_nodes[3 * 4], 0.0);
  EXPECT_EQ(f.graph.cam_nodes[1 * 4], 2.0);
}

TEST(BuildGraph, FullCoverageSingleCamera) {
  BevGridSpec g;
  g.x_min = 18;
  g.x_max = 22;
  g.y_min = -2;
  g.y_max = 2;
  g.rows = g.cols = 4;
  g.anchor_heights = {0.5, 1.5};
  std::vector<CameraRig> rigs{CameraRig::from_pose({0, 0, 6}, 0.0, -0.2, 800, 800, 600)};
  VisibilityMask vis = visibility(point_sampling(g, rigs));
  RelationGraph graph = build_graph(rigs, {Tensor(Shape{2, 1, 1}, 1.0)}, Tensor(Shape{16, 2}), vis, g);
  EXPECT_EQ(graph.topology.num_edges(), 16u);
}

TEST(BuildGraph, EmptyVisibilityGivesNoEdges) {
  BevGridSpec g = BevGridSpec::desk();
  g.rows = g.cols = 4;
  std::vector<CameraRig> rigs = pad_rigs({}, 2);
  VisibilityMask vis = visibility(point_sampling(g, rigs));
  RelationGraph graph = build_graph(rigs, {Tensor(Shape{2, 1, 1}), Tensor(Shape{2, 1, 1})},
                                    Tensor(Shape{16, 2}), vis, g);
  EXPECT_EQ(graph.topology.num_edges(), 0u);
  EXPECT_EQ(graph.topology.edge_attrs.shape(), (Shape{0, 8}));
}

TEST(BuildGraph, ShapeErrors) {
  Fixture f = make(9, 2, 2);
  EXPECT_THROW(build_graph(f.rigs, {Tensor(Shape{4, 1, 1})}, Tensor(Shape{144, 4}), f.vis, f.grid),
               DimensionError);
  EXPECT_THROW(build_graph(f.rigs, {Tensor(Shape{4, 1, 1}), Tensor(Shape{4, 1, 1})},
                           Tensor(Shape{10, 4}), f.vis, f.grid),
               DimensionError);
}

TEST(GraphJson, ParsesBack) {
  Fixture f = make(4, 2, 3);
  auto j = nlohmann::json::parse(graph_to_json(f.graph));
  EXPECT_EQ(j["edges"].size(), f.graph.topology.num_edges());
  EXPECT_EQ(j["num_cams"].get<int>(), 3);
  ASSERT_FALSE(j["edges"].empty());
  EXPECT_EQ(j["edges"][0]["g"].size(), 8u);
}
