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

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "rbev/autodiff.hpp"
#include "rbev/geometry.hpp"
#include "rbev/heads.hpp"
#include "rbev/rng.hpp"

namespace rbev {

enum class Layout { kFourWay, kThreeWay, kTJunction, kStraight };
enum class Traffic { kLow, kMed, kHigh };
enum class AgentClass { kCar = 0, kTruck = 1, kPedestrian = 2, kCyclist = 3 };

constexpr std::size_t kNumAgentClasses = 4;
constexpr std::size_t kMaxCameras = 4;
constexpr std::size_t kMapClasses = 7;

const std::vector<std::string>& agent_class_names();
const std::vector<std::string>& map_class_names();

std::string to_string(Layout l);
std::string to_string(Traffic t);
Layout parse_layout(const std::string& s);
Traffic parse_traffic(const std::string& s);

struct SceneConfig {
  Layout layout = Layout::kFourWay;
  std::size_t num_cameras = 4;
  Traffic traffic = Traffic::kMed;
  BevGridSpec grid = BevGridSpec::desk();
  std::uint64_t seed = 0;
  int image_width = 800;
  int image_height = 600;
  double focal = 800.0;
  // Nonzero overrides the traffic-level count range.
  std::size_t num_agents = 0;
  // Point each camera at the scene centre (yaw jitter +-30 deg) instead of a
  // uniform yaw.
  bool aim_cameras = false;

  void validate() const;
};

std::string scenario_to_json(const SceneConfig& cfg);
SceneConfig scenario_from_json(const std::string& text);
SceneConfig load_scenario(const std::string& path);

struct Agent {
  AgentClass cls = AgentClass::kCar;
  Box3D box;  // z is the box centre; box.vx, box.vy carry the velocity in m/s
};

// Nominal l x w x h in metres.
std::array<double, 3> size_prior(AgentClass c);

// Per-cell labels, row-major over the grid. Object labels use the agent
// class, background = kNumAgentClasses.
struct GtMasks {
  std::size_t rows = 0, cols = 0;
  std::vector<std::uint32_t> map;
  std::vector<std::uint32_t> object;
};

struct Scene {
  SceneConfig config;
  std::vector<Agent> agents;
  std::vector<CameraRig> rigs;
  GtMasks masks;
};

// Road network semantics at a ground point: 0 off-road, 1 road, 2 lane
// marking, 3 crosswalk, 4 sidewalk, 5 junction, 6 stop line.
std::uint32_t map_class_at(Layout layout, double x, double y);

// Camera mounting points between the road arms.
std::vector<Vec3> layout_corners(Layout layout);

std::vector<CameraRig> sample_rigs(const SceneConfig& cfg, Rng& rng);
// Inclusive agent-count range for a traffic level.
std::array<std::size_t, 2> traffic_count_range(Traffic t);

// Rigs, agents and masks drawn from independent substreams of cfg.seed.
Scene generate_scene(const SceneConfig& cfg);
std::vector<Agent> sample_agents(const SceneConfig& cfg, Rng& rng);

// Footprint corners (x, y), counter-clockwise.
std::array<std::array<double, 2>, 4> footprint(const Box3D& b);
bool footprints_overlap(const Box3D& a, const Box3D& b, double margin = 0.0);
bool inside_range(const Box3D& b, const BevGridSpec& grid);
// Constant-velocity positions `dt` seconds later (negative for the past).
std::vector<Agent> advance(const std::vector<Agent>& agents, double dt);

// Ray-cast render, [1 x H x W]. Agents get a class intensity; the rest shows
// the textured ground plane or a sky gradient.
Tensor render_view(Layout layout, const std::vector<Agent>& agents, const CameraRig& rig);
Tensor render_view(const Scene& scene, const CameraRig& rig);
double agent_intensity(AgentClass c);
// True when `v` is one of the agent intensities.
bool is_agent_intensity(double v);

GtMasks rasterize_gt(Layout layout, const std::vector<Agent>& agents, const BevGridSpec& grid);
GtMasks rasterize_gt(const Scene& scene, const BevGridSpec& grid);
std::vector<Box3D> gt_boxes(const std::vector<Agent>& agents);

constexpr std::size_t kPatch = 8;

// bb.patch.{w,b}: [64 * in_channels x C], bb.conv.{w,b}: [C x C x 3 x 3].
void add_backbone_params(ParameterSet& ps, std::size_t channels, Rng& rng,
                         std::size_t in_channels = 1);
// image [in_ch x H x W] -> [C x H/8 x W/8]: e = patch embedding,
// out = e + relu(conv3x3(e)) with replicated borders.
Var toy_backbone(Tape& tape, ParameterSet& ps, Var image);

}  // namespace rbev
