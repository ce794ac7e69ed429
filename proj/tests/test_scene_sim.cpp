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

#include "rbev/ops.hpp"
#include "rbev/scene_sim.hpp"

using namespace rbev;

namespace {

constexpr double kPi = std::numbers::pi;

SceneConfig small_config(Layout layout = Layout::kFourWay, Traffic t = Traffic::kMed, std::uint64_t seed = 1) {
  SceneConfig c;
  c.layout = layout;
  c.traffic = t;
  c.seed = seed;
  c.image_width = 160;
  c.image_height = 120;
  c.focal = 160;
  return c;
}

Agent make_agent(AgentClass cls, double x, double y, double yaw, double l, double w, double h) {
  Agent a;
  a.cls = cls;
  a.box.x = x;
  a.box.y = y;
  a.box.z = 0.5 * h;
  a.box.l = l;
  a.box.w = w;
  a.box.h = h;
  a.box.yaw = yaw;
  a.box.label = static_cast<int>(cls);
  return a;
}

// Pixel-centre point-in-convex-hull oracle with the distance to the hull
// boundary, built from the projected box corners via a gift wrap.
struct Hull {
  std::vector<std::array<double, 2>> pts;  // counter-clockwise in (u, v)

  explicit Hull(std::vector<std::array<double, 2>> p) {
    std::sort(p.begin(), p.end());
    auto cross = [](const std::array<double, 2>& o, const std::array<double, 2>& a, const std::array<double, 2>& b) {
      return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    };
    std::vector<std::array<double, 2>> h(2 * p.size());
    std::size_t k = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      while (k >= 2 && cross(h[k - 2], h[k - 1], p[i]) <= 0) --k;
      h[k++] = p[i];
    }
    for (std::size_t i = p.size() - 1, t = k + 1; i-- > 0;) {
      while (k >= t && cross(h[k - 2], h[k - 1], p[i]) <= 0) --k;
      h[k++] = p[i];
    }
    h.resize(k - 1);
    pts = h;
  }

  // Signed distance to the nearest edge line, positive inside.
  double inside_margin(double u, double v) const {
    double m = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const auto& a = pts[i];
      const auto& b = pts[(i + 1) % pts.size()];
      const double ex = b[0] - a[0], ey = b[1] - a[1];
      const double len = std::hypot(ex, ey);
      m = std::min(m, (ex * (v - a[1]) - ey * (u - a[0])) / len);
    }
    return m;
  }
};

}  // namespace

TEST(SampleRigs, RangesHold) {
  SceneConfig cfg = small_config();
  Rng rng(7);
  for (int i = 0; i < 250; ++i) {
    for (const CameraRig& r : sample_rigs(cfg, rng)) {
      EXPECT_GE(r.position[2], 3.0 - 1e-9);
      EXPECT_LE(r.position[2], 10.0 + 1e-9);
      EXPECT_GE(r.pitch, -35.0 * kPi / 180 - 1e-9);
      EXPECT_LE(r.pitch, -5.0 * kPi / 180 + 1e-9);
      EXPECT_EQ(r.width, 160);
      EXPECT_DOUBLE_EQ(r.intrinsics[0], 160.0);
    }
  }
}

TEST(SampleRigs, FixedSeedIsDeterministic) {
  SceneConfig cfg = small_config();
  Rng a(11), b(11);
  const auto ra = sample_rigs(cfg, a), rb = sample_rigs(cfg, b);
  ASSERT_EQ(ra.size(), rb.size());
  for (std::size_t i = 0; i < ra.size(); ++i) {
    EXPECT_EQ(ra[i].extrinsics, rb[i].extrinsics);
    EXPECT_EQ(ra[i].intrinsics, rb[i].intrinsics);
  }
}

TEST(SampleRigs, YawRoughlyUniform) {
  SceneConfig cfg = small_config();
  cfg.num_cameras = 1;
  const int bins = 12, n = 10000;
  // 11 dof, 99.9th percentile is about 31.3.
  const double bound = 31.3;
  auto chi2 = [&](const std::vector<int>& hist, int total) {
    const double e = static_cast<double>(total) / bins;
    double c = 0;
    for (int h : hist) c += (h - e) * (h - e) / e;
    return c;
  };
  std::vector<int> pooled(bins, 0);
  int exceed = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    std::vector<int> hist(bins, 0);
    for (int i = 0; i < n; ++i) {
      double y = sample_rigs(cfg, rng)[0].yaw;
      if (y < 0) y += 2 * kPi;
      const int b = std::min(bins - 1, static_cast<int>(y / (2 * kPi) * bins));
      ++hist[b];
      ++pooled[b];
    }
    exceed += chi2(hist, n) > bound;
  }
  EXPECT_LE(exceed, 1);
  EXPECT_LT(chi2(pooled, 10 * n), bound);
}

TEST(SampleRigs, CamerasSitOnLayoutCorners) {
  for (Layout l : {Layout::kFourWay, Layout::kThreeWay, Layout::kTJunction, Layout::kStraight}) {
    SceneConfig cfg = small_config(l);
    const auto corners = layout_corners(l);
    EXPECT_GE(corners.size(), 3u);
    Rng rng(5);
    for (const CameraRig& r : sample_rigs(cfg, rng)) {
      bool hit = false;
      for (const Vec3& c : corners) hit |= std::hypot(c[0] - r.position[0], c[1] - r.position[1]) < 1e-9;
      EXPECT_TRUE(hit);
      // Corners are off the carriageway.
      const auto m = map_class_at(l, r.position[0], r.position[1]);
      EXPECT_TRUE(m == 0 || m == 4) << to_string(l) << " class " << m;
    }
  }
}

TEST(SceneConfig, RejectsTooManyCameras) {
  SceneConfig cfg = small_config();
  cfg.num_cameras = 5;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.num_cameras = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.num_cameras = 2;
  cfg.image_width = 100;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Scenario, JsonRoundTrip) {
  SceneConfig cfg = small_config(Layout::kTJunction, Traffic::kHigh, 99);
  cfg.num_cameras = 3;
  cfg.grid = BevGridSpec::m2i();
  const SceneConfig back = scenario_from_json(scenario_to_json(cfg));
  EXPECT_EQ(back.layout, cfg.layout);
  EXPECT_EQ(back.traffic, cfg.traffic);
  EXPECT_EQ(back.num_cameras, 3u);
  EXPECT_EQ(back.seed, 99u);
  EXPECT_EQ(back.grid.rows, 200u);
  EXPECT_EQ(back.grid.anchor_heights, cfg.grid.anchor_heights);
  EXPECT_EQ(back.image_width, 160);
}

TEST(Scenario, MinimalAndBadFiles) {
  const SceneConfig c = scenario_from_json(
      R"({"layout":"straight","num_cameras":2,"traffic_level":"low","seed":4,
          "grid":{"x_range":[-10,10],"y_range":[-10,10],"cells":[20,20],"anchor_heights":[1.0],"z_max":5}})");
  EXPECT_EQ(c.layout, Layout::kStraight);
  EXPECT_EQ(c.grid.cols, 20u);
  EXPECT_THROW(scenario_from_json(R"({"layout":"roundabout","num_cameras":2,"traffic_level":"low","seed":1})"),
               ConfigError);
  EXPECT_THROW(scenario_from_json(R"({"layout":"straight","num_cameras":9,"traffic_level":"low","seed":1})"),
               ConfigError);
  EXPECT_THROW(scenario_from_json("{"), ConfigError);
}

TEST(GenerateScene, LowTrafficIsSmall) {
  for (std::uint64_t s = 0; s < 30; ++s) {
    const Scene sc = generate_scene(small_config(Layout::kFourWay, Traffic::kLow, s));
    EXPECT_LE(sc.agents.size(), 8u);
    EXPECT_GE(sc.agents.size(), 1u);
  }
}

TEST(GenerateScene, HighTrafficAveragesForty) {
  double total = 0;
  int n = 0;
  for (Layout l : {Layout::kFourWay, Layout::kThreeWay, Layout::kTJunction, Layout::kStraight})
    for (std::uint64_t s = 0; s < 5; ++s) {
      total += static_cast<double>(generate_scene(small_config(l, Traffic::kHigh, s)).agents.size());
      ++n;
    }
  EXPECT_NEAR(total / n, 40.0, 10.0);
}

TEST(GenerateScene, BoxesInRangeAndDisjoint) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Scene sc = generate_scene(small_config(Layout::kThreeWay, Traffic::kHigh, s));
    for (std::size_t i = 0; i < sc.agents.size(); ++i) {
      const Box3D& b = sc.agents[i].box;
      EXPECT_TRUE(inside_range(b, sc.config.grid));
      EXPECT_GT(b.l, 0);
      EXPECT_GT(b.w, 0);
      EXPECT_GT(b.h, 0);
      for (std::size_t j = 0; j < i; ++j) EXPECT_FALSE(footprints_overlap(b, sc.agents[j].box));
    }
  }
}

TEST(GenerateScene, SizePriorsNearNominal) {
  const Scene sc = generate_scene(small_config(Layout::kFourWay, Traffic::kHigh, 3));
  for (const Agent& a : sc.agents) {
    const auto p = size_prior(a.cls);
    EXPECT_NEAR(a.box.l / p[0], 1.0, 0.1 + 1e-12);
    EXPECT_NEAR(a.box.w / p[1], 1.0, 0.1 + 1e-12);
    EXPECT_NEAR(a.box.h / p[2], 1.0, 0.1 + 1e-12);
  }
}

TEST(GenerateScene, DeterministicPerSeed) {
  const Scene a = generate_scene(small_config(Layout::kTJunction, Traffic::kMed, 42));
  const Scene b = generate_scene(small_config(Layout::kTJunction, Traffic::kMed, 42));
  ASSERT_EQ(a.agents.size(), b.agents.size());
  for (std::size_t i = 0; i < a.agents.size(); ++i) {
    EXPECT_EQ(a.agents[i].box.x, b.agents[i].box.x);
    EXPECT_EQ(a.agents[i].box.yaw, b.agents[i].box.yaw);
    EXPECT_EQ(a.agents[i].box.vx, b.agents[i].box.vx);
  }
  EXPECT_EQ(a.masks.object, b.masks.object);
  const Scene c = generate_scene(small_config(Layout::kTJunction, Traffic::kMed, 43));
  EXPECT_NE(a.agents.front().box.x, c.agents.front().box.x);
}

TEST(Overlap, SeparatingAxisCases) {
  Box3D a, b;
  a.l = 4;
  a.w = 2;
  b = a;
  b.x = 3.9;
  EXPECT_TRUE(footprints_overlap(a, b));
  b.x = 4.1;
  EXPECT_FALSE(footprints_overlap(a, b));
  EXPECT_TRUE(footprints_overlap(a, b, 0.3));
  // Rotated 45 degrees: corner reaches sqrt(2) from the centre.
  Box3D c;
  c.l = 2;
  c.w = 2;
  c.yaw = kPi / 4;
  c.x = 2 + std::sqrt(2.0) - 0.05;
  EXPECT_TRUE(footprints_overlap(a, c));
  c.x = 2 + std::sqrt(2.0) + 0.05;
  EXPECT_FALSE(footprints_overlap(a, c));
}

TEST(Advance, ConstantVelocity) {
  Agent a = make_agent(AgentClass::kCar, 1, 2, 0, 4.5, 1.9, 1.6);
  a.box.vx = 3;
  a.box.vy = -1;
  const auto past = advance({a}, -0.5);
  EXPECT_DOUBLE_EQ(past[0].box.x, -0.5);
  EXPECT_DOUBLE_EQ(past[0].box.y, 2.5);
}

TEST(Render, EmptySceneIsBackground) {
  const CameraRig rig = CameraRig::from_pose({-10, 0, 5}, 0, -0.3, 160, 160, 120);
  const Tensor img = render_view(Layout::kFourWay, {}, rig);
  ASSERT_EQ(img.shape(), (Shape{1, 120, 160}));
  for (double v : img.values()) EXPECT_FALSE(is_agent_intensity(v));
  // Top rows see sky, bottom rows see the ground.
  EXPECT_LT(img.at(0, 0, 80), 0.11);
  EXPECT_GE(img.at(0, 119, 80), 0.2);
  EXPECT_EQ(img.values(), render_view(Layout::kFourWay, {}, rig).values());
}

TEST(Render, BoxFillsExactlyItsProjectedHull) {
  const CameraRig rig = CameraRig::from_pose({-15, -3, 6}, 0.2, -0.25, 160, 160, 120);
  for (double yaw : {0.0, 0.4, 1.3}) {
    const Agent a = make_agent(AgentClass::kTruck, 0, 0, yaw, 8, 2.5, 3);
    std::vector<std::array<double, 2>> pts;
    const double cs = std::cos(yaw), sn = std::sin(yaw);
    for (double sx : {-0.5, 0.5})
      for (double sy : {-0.5, 0.5})
        for (double sz : {0.0, 1.0}) {
          const Vec3 p{cs * sx * 8 - sn * sy * 2.5, sn * sx * 8 + cs * sy * 2.5, sz * 3};
          const ProjectionResult pr = project(p, rig);
          ASSERT_TRUE(pr.depth > 0);
          pts.push_back({pr.u, pr.v});
        }
    const Hull hull(pts);
    const Tensor img = render_view(Layout::kFourWay, {a}, rig);
    std::size_t painted = 0;
    for (std::size_t y = 0; y < 120; ++y)
      for (std::size_t x = 0; x < 160; ++x) {
        const double m = hull.inside_margin(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5);
        const bool on_box = img.at(0, y, x) == agent_intensity(AgentClass::kTruck);
        painted += on_box;
        if (std::abs(m) < 1e-6) continue;
        EXPECT_EQ(on_box, m > 0) << "pixel " << x << "," << y << " margin " << m;
      }
    EXPECT_GT(painted, 50u);
  }
}

TEST(Render, AgentBehindCameraIsCulled) {
  const CameraRig rig = CameraRig::from_pose({0, 0, 5}, 0, -0.2, 160, 160, 120);
  const Agent behind = make_agent(AgentClass::kCar, -12, 0, 0, 4.5, 1.9, 1.6);
  EXPECT_EQ(render_view(Layout::kStraight, {behind}, rig).values(),
            render_view(Layout::kStraight, {}, rig).values());
}

TEST(Render, NearerAgentOccludes) {
  const CameraRig rig = CameraRig::from_pose({-20, 0, 1.0}, 0, 0.0, 160, 160, 120);
  const Agent near = make_agent(AgentClass::kCar, -10, 0, 0, 4.5, 1.9, 1.6);
  const Agent far = make_agent(AgentClass::kTruck, 5, 0, 0, 8, 2.5, 3.0);
  const Tensor img = render_view(Layout::kStraight, {far, near}, rig);
  // The principal ray hits the car first.
  EXPECT_EQ(img.at(0, 60, 80), agent_intensity(AgentClass::kCar));
}

TEST(Render, DummyRigIsBlank) {
  const Tensor img = render_view(Layout::kFourWay, {make_agent(AgentClass::kCar, 0, 0, 0, 4, 2, 1.5)},
                                 CameraRig::dummy(16, 8));
  ASSERT_EQ(img.shape(), (Shape{1, 8, 16}));
  for (double v : img.values()) EXPECT_EQ(v, 0.0);
}

TEST(Rasterize, EmptySceneIsAllBackground) {
  const BevGridSpec g = BevGridSpec::desk();
  const GtMasks m = rasterize_gt(Layout::kFourWay, {}, g);
  for (auto v : m.object) EXPECT_EQ(v, kNumAgentClasses);
  EXPECT_EQ(m.map.size(), g.num_cells());
}

TEST(Rasterize, AxisAlignedBoxMatchesCellOracle) {
  const BevGridSpec g = BevGridSpec::desk();
  ASSERT_NEAR(g.cell_dx(), 0.512, 1e-12);
  const Agent a = make_agent(AgentClass::kCar, 0, 0, 0, 4, 2, 1.5);
  const GtMasks m = rasterize_gt(Layout::kFourWay, {a}, g);
  std::size_t count = 0;
  for (std::size_t r = 0; r < g.rows; ++r)
    for (std::size_t c = 0; c < g.cols; ++c) {
      const double x = -25.6 + (c + 0.5) * 0.512, y = -25.6 + (r + 0.5) * 0.512;
      const bool in = std::abs(x) <= 2 && std::abs(y) <= 1;
      count += in;
      EXPECT_EQ(m.object[r * g.cols + c], in ? 0u : kNumAgentClasses);
    }
  EXPECT_EQ(count, 32u);
}

TEST(Rasterize, RotatedBoxMatchesCellOracle) {
  const BevGridSpec g = BevGridSpec::desk();
  const Agent a = make_agent(AgentClass::kCyclist, 3.3, -7.1, 0.7, 1.8, 0.6, 1.7);
  const GtMasks m = rasterize_gt(Layout::kFourWay, {a}, g);
  for (std::size_t r = 0; r < g.rows; ++r)
    for (std::size_t c = 0; c < g.cols; ++c) {
      // Containment by the footprint's half-plane tests.
      const auto fp = footprint(a.box);
      bool in = true;
      for (int i = 0; i < 4; ++i) {
        const auto& p = fp[i];
        const auto& q = fp[(i + 1) % 4];
        const double cr = (q[0] - p[0]) * (g.center_y(r) - p[1]) - (q[1] - p[1]) * (g.center_x(c) - p[0]);
        in &= cr >= -1e-12;
      }
      EXPECT_EQ(m.object[g.cell(r, c)] == 3u, in);
    }
}

TEST(Rasterize, MapHasSevenClassesPresent) {
  EXPECT_EQ(map_class_names().size(), 7u);
  const GtMasks m = rasterize_gt(Layout::kFourWay, {}, BevGridSpec::desk());
  std::vector<int> seen(7, 0);
  for (auto v : m.map) {
    ASSERT_LT(v, 7u);
    seen[v] = 1;
  }
  for (int s : seen) EXPECT_EQ(s, 1);
}

TEST(MapClass, LayoutSemantics) {
  EXPECT_EQ(map_class_at(Layout::kFourWay, 0, 0), 5u);
  EXPECT_EQ(map_class_at(Layout::kStraight, 0, 0), 2u);  // centre line
  EXPECT_EQ(map_class_at(Layout::kStraight, 0, 2), 1u);
  EXPECT_EQ(map_class_at(Layout::kStraight, 0, 8.5), 4u);
  EXPECT_EQ(map_class_at(Layout::kStraight, 0, 15), 0u);
  EXPECT_EQ(map_class_at(Layout::kTJunction, 0, -12), 0u);  // no southern arm
  EXPECT_EQ(map_class_at(Layout::kTJunction, 0, 12), 3u);
}

TEST(Backbone, ZeroParamsGiveZeroMap) {
  ParameterSet ps;
  Rng rng(1);
  add_backbone_params(ps, 6, rng);
  for (auto& p : ps) p.tensor.fill(0.0);
  Tape tape;
  Tensor img({1, 16, 24}, 0.7);
  const Var f = toy_backbone(tape, ps, tape.constant(img));
  ASSERT_EQ(f.value().shape(), (Shape{6, 2, 3}));
  for (double v : f.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(Backbone, ConstantImageGivesConstantMap) {
  ParameterSet ps;
  Rng rng(2);
  add_backbone_params(ps, 5, rng);
  for (double& v : ps.get("bb.conv.b").tensor.data()) v = uniform(rng, -0.5, 0.5);
  Tape tape;
  const Var f = toy_backbone(tape, ps, tape.constant(Tensor({1, 24, 32}, 0.4)));
  const Tensor& t = f.value();
  for (std::size_t c = 0; c < 5; ++c)
    for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(t[c * 12 + i], t[c * 12], 1e-12);
}

TEST(Backbone, SinglePatchMatchesHandLinearMap) {
  ParameterSet ps;
  Rng rng(3);
  add_backbone_params(ps, 3, rng);
  ps.get("bb.conv.w").tensor.fill(0.0);
  ps.get("bb.conv.b").tensor.fill(-1.0);  // relu branch off
  Tensor img({1, 8, 8});
  for (std::size_t i = 0; i < 64; ++i) img[i] = std::sin(0.3 * static_cast<double>(i));
  Tape tape;
  const Var f = toy_backbone(tape, ps, tape.constant(img));
  const Tensor& w = ps.get("bb.patch.w").tensor;
  const Tensor& b = ps.get("bb.patch.b").tensor;
  for (std::size_t c = 0; c < 3; ++c) {
    double expect = b[c];
    for (std::size_t k = 0; k < 64; ++k) expect += img[k] * w.at(k, c);
    EXPECT_NEAR(f.value()[c], expect, 1e-12);
  }
}

TEST(Backbone, GradCheck) {
  ParameterSet ps;
  Rng rng(4);
  add_backbone_params(ps, 3, rng);
  for (double& v : ps.get("bb.conv.b").tensor.data()) v = uniform(rng, -0.3, 0.3);
  Tensor img({1, 16, 16});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = uniform(rng, 0, 1);
  const auto fn = [&](Tape& tape, ParameterSet& p) {
    const Var f = toy_backbone(tape, p, tape.constant(img));
    return sum(mul(f, f));
  };
  const GradCheckReport rep = grad_check(fn, ps);
  EXPECT_TRUE(rep.passed);
  EXPECT_LE(rep.max_rel_error, 1e-4);
}
