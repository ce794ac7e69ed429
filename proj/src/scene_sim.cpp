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

#include "rbev/scene_sim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include "json.hpp"
#include "rbev/init.hpp"
#include "rbev/ops.hpp"

namespace rbev {
namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kRoadHalfWidth = 7.0;  // two 3.5 m lanes each way
constexpr double kLaneWidth = 3.5;
constexpr double kSidewalk = 3.0;
constexpr double kCornerSetback = 1.5;
constexpr double kNear = 1e-6;
constexpr double kAgentMargin = 0.3;
constexpr int kPlacementAttempts = 200;

std::vector<double> arm_angles(Layout layout) {
  switch (layout) {
    case Layout::kFourWay: return {0.0, 0.5 * kPi, kPi, 1.5 * kPi};
    case Layout::kThreeWay: return {0.5 * kPi, 0.5 * kPi + 2.0 * kPi / 3.0, 0.5 * kPi + 4.0 * kPi / 3.0};
    case Layout::kTJunction: return {0.0, 0.5 * kPi, kPi};
    case Layout::kStraight: return {0.0, kPi};
  }
  return {};
}

bool has_junction(Layout layout) { return layout != Layout::kStraight; }

// Radius of the junction disc; covers the overlap of adjacent arms.
double junction_radius(Layout layout) {
  switch (layout) {
    case Layout::kThreeWay: return kRoadHalfWidth / std::sin(kPi / 3.0);
    case Layout::kStraight: return 0.0;
    default: return kRoadHalfWidth * std::numbers::sqrt2;
  }
}

// Along-arm and lateral (left-positive) coordinates.
void arm_coords(double angle, double x, double y, double& s, double& t) {
  const double c = std::cos(angle), sn = std::sin(angle);
  s = x * c + y * sn;
  t = -x * sn + y * c;
}

double class_intensity_ground(std::uint32_t cls) {
  static const double v[kMapClasses] = {0.20, 0.30, 0.45, 0.50, 0.25, 0.33, 0.55};
  return v[cls];
}

Box3D make_box(AgentClass c, double x, double y, double yaw, double speed, Rng& rng) {
  const auto prior = size_prior(c);
  Box3D b;
  b.l = prior[0] * uniform(rng, 0.9, 1.1);
  b.w = prior[1] * uniform(rng, 0.9, 1.1);
  b.h = prior[2] * uniform(rng, 0.9, 1.1);
  b.x = x;
  b.y = y;
  b.z = 0.5 * b.h;
  b.yaw = wrap_angle(yaw);
  b.vx = speed * std::cos(b.yaw);
  b.vy = speed * std::sin(b.yaw);
  b.label = static_cast<int>(c);
  b.score = 1.0;
  return b;
}

AgentClass draw_class(Rng& rng) {
  const double u = uniform01(rng);
  if (u < 0.50) return AgentClass::kCar;
  if (u < 0.60) return AgentClass::kTruck;
  if (u < 0.85) return AgentClass::kPedestrian;
  return AgentClass::kCyclist;
}

Box3D propose(AgentClass c, Layout layout, const BevGridSpec& grid, Rng& rng) {
  const std::vector<double> arms = arm_angles(layout);
  const double angle = arms[uniform_index(rng, arms.size())];
  const double rj = junction_radius(layout);
  const double reach = 1.5 * std::max(grid.half_x(), grid.half_y());
  const double s_vehicle = has_junction(layout) ? rj + 4.5 : 0.0;
  double s = 0.0, t = 0.0, heading = angle, speed = 0.0;
  switch (c) {
    case AgentClass::kCar:
    case AgentClass::kTruck: {
      static const double lanes[4] = {-1.5 * kLaneWidth, -0.5 * kLaneWidth, 0.5 * kLaneWidth, 1.5 * kLaneWidth};
      t = lanes[uniform_index(rng, 4)];
      s = uniform(rng, s_vehicle, reach);
      speed = c == AgentClass::kCar ? uniform(rng, 0.0, 12.0) : uniform(rng, 0.0, 9.0);
      break;
    }
    case AgentClass::kCyclist: {
      t = (bernoulli(rng, 0.5) ? 1.0 : -1.0) * (kRoadHalfWidth - 0.8);
      s = uniform(rng, s_vehicle, reach);
      speed = uniform(rng, 1.0, 6.0);
      break;
    }
    case AgentClass::kPedestrian: {
      speed = uniform(rng, 0.3, 1.8);
      if (has_junction(layout) && bernoulli(rng, 0.25)) {
        s = uniform(rng, rj + 0.8, rj + 3.2);
        t = uniform(rng, -kRoadHalfWidth, kRoadHalfWidth);
        heading = angle + (bernoulli(rng, 0.5) ? 0.5 : -0.5) * kPi;
        const double yaw = heading + uniform(rng, -0.1, 0.1);
        return make_box(c, s * std::cos(angle) - t * std::sin(angle), s * std::sin(angle) + t * std::cos(angle),
                        yaw, speed, rng);
      }
      t = (bernoulli(rng, 0.5) ? 1.0 : -1.0) * (kRoadHalfWidth + uniform(rng, 0.4, kSidewalk - 0.4));
      s = uniform(rng, has_junction(layout) ? kRoadHalfWidth + kSidewalk : 0.0, reach);
      heading = bernoulli(rng, 0.5) ? angle : angle + kPi;
      const double yaw = heading + uniform(rng, -0.2, 0.2);
      return make_box(c, s * std::cos(angle) - t * std::sin(angle), s * std::sin(angle) + t * std::cos(angle),
                      yaw, speed, rng);
    }
  }
  // Right-hand traffic: t < 0 drives away from the junction.
  if (t > 0.0) heading = angle + kPi;
  const double yaw = heading + uniform(rng, -0.05, 0.05);
  return make_box(c, s * std::cos(angle) - t * std::sin(angle), s * std::sin(angle) + t * std::cos(angle), yaw,
                  speed, rng);
}

// Ray-box entry depth, or +inf when missed.
double ray_box(const Vec3& origin, const Vec3& dir, const Box3D& b) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double ox = origin[0] - b.x, oy = origin[1] - b.y, oz = origin[2] - b.z;
  const double q[3] = {c * ox + s * oy, -s * ox + c * oy, oz};
  const double d[3] = {c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]};
  const double half[3] = {0.5 * b.l, 0.5 * b.w, 0.5 * b.h};
  double t0 = -std::numeric_limits<double>::infinity();
  double t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (d[a] == 0.0) {
      if (q[a] < -half[a] || q[a] > half[a]) return std::numeric_limits<double>::infinity();
      continue;
    }
    double ta = (-half[a] - q[a]) / d[a];
    double tb = (half[a] - q[a]) / d[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  if (t0 > t1 || t0 <= kNear) return std::numeric_limits<double>::infinity();
  return t0;
}

std::array<Vec3, 8> box_corners(const Box3D& b) {
  std::array<Vec3, 8> out{};
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  int k = 0;
  for (double sx : {-0.5, 0.5})
    for (double sy : {-0.5, 0.5})
      for (double sz : {-0.5, 0.5}) {
        const double lx = sx * b.l, ly = sy * b.w;
        out[k++] = {b.x + c * lx - s * ly, b.y + s * lx + c * ly, b.z + sz * b.h};
      }
  return out;
}

nlohmann::json grid_json(const BevGridSpec& g) {
  return {{"x_range", {g.x_min, g.x_max}},
          {"y_range", {g.y_min, g.y_max}},
          {"cells", {g.rows, g.cols}},
          {"anchor_heights", g.anchor_heights},
          {"z_max", g.z_max}};
}

}  // namespace

const std::vector<std::string>& agent_class_names() {
  static const std::vector<std::string> names{"car", "truck", "pedestrian", "cyclist"};
  return names;
}

const std::vector<std::string>& map_class_names() {
  static const std::vector<std::string> names{"off_road", "road",     "lane_marking", "crosswalk",
                                              "sidewalk", "junction", "stop_line"};
  return names;
}

std::string to_string(Layout l) {
  switch (l) {
    case Layout::kFourWay: return "four-way";
    case Layout::kThreeWay: return "three-way";
    case Layout::kTJunction: return "T-junction";
    case Layout::kStraight: return "straight";
  }
  return "four-way";
}

std::string to_string(Traffic t) {
  switch (t) {
    case Traffic::kLow: return "low";
    case Traffic::kMed: return "med";
    case Traffic::kHigh: return "high";
  }
  return "med";
}

Layout parse_layout(const std::string& s) {
  for (Layout l : {Layout::kFourWay, Layout::kThreeWay, Layout::kTJunction, Layout::kStraight})
    if (s == to_string(l)) return l;
  throw ConfigError("unknown layout '" + s + "' (expected four-way, three-way, T-junction or straight)");
}

Traffic parse_traffic(const std::string& s) {
  for (Traffic t : {Traffic::kLow, Traffic::kMed, Traffic::kHigh})
    if (s == to_string(t)) return t;
  throw ConfigError("unknown traffic level '" + s + "' (expected low, med or high)");
}

void SceneConfig::validate() const {
  if (num_cameras < 1 || num_cameras > kMaxCameras) {
    throw ConfigError("scene: num_cameras must be in [1, 4], got " + std::to_string(num_cameras));
  }
  if (image_width <= 0 || image_height <= 0 || image_width % static_cast<int>(kPatch) != 0 ||
      image_height % static_cast<int>(kPatch) != 0) {
    throw ConfigError("scene: image size must be positive multiples of 8, got " + std::to_string(image_width) +
                      "x" + std::to_string(image_height));
  }
  if (!(focal > 0.0)) throw ConfigError("scene: focal must be positive");
  grid.validate();
}

std::string scenario_to_json(const SceneConfig& cfg) {
  nlohmann::json j{{"layout", to_string(cfg.layout)},
                   {"num_cameras", cfg.num_cameras},
                   {"traffic_level", to_string(cfg.traffic)},
                   {"seed", cfg.seed},
                   {"grid", grid_json(cfg.grid)},
                   {"image", {{"width", cfg.image_width}, {"height", cfg.image_height}, {"focal", cfg.focal}}}};
  if (cfg.num_agents != 0) j["num_agents"] = cfg.num_agents;
  if (cfg.aim_cameras) j["aim_cameras"] = true;
  return j.dump(2);
}

SceneConfig scenario_from_json(const std::string& text) {
  SceneConfig cfg;
  try {
    const nlohmann::json j = nlohmann::json::parse(text);
    cfg.layout = parse_layout(j.at("layout").get<std::string>());
    cfg.num_cameras = j.at("num_cameras").get<std::size_t>();
    cfg.traffic = parse_traffic(j.at("traffic_level").get<std::string>());
    cfg.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("grid")) {
      const auto& g = j.at("grid");
      BevGridSpec grid;
      const auto xr = g.at("x_range").get<std::vector<double>>();
      const auto yr = g.at("y_range").get<std::vector<double>>();
      const auto cells = g.at("cells").get<std::vector<std::size_t>>();
      if (xr.size() != 2 || yr.size() != 2 || cells.size() != 2) {
        throw ConfigError("scenario: x_range, y_range and cells need two entries each");
      }
      grid.x_min = xr[0];
      grid.x_max = xr[1];
      grid.y_min = yr[0];
      grid.y_max = yr[1];
      grid.rows = cells[0];
      grid.cols = cells[1];
      grid.anchor_heights = g.at("anchor_heights").get<std::vector<double>>();
      grid.z_max = g.at("z_max").get<double>();
      cfg.grid = grid;
    }
    if (j.contains("image")) {
      const auto& im = j.at("image");
      cfg.image_width = im.at("width").get<int>();
      cfg.image_height = im.at("height").get<int>();
      cfg.focal = im.at("focal").get<double>();
    }
    if (j.contains("num_agents")) cfg.num_agents = j.at("num_agents").get<std::size_t>();
    if (j.contains("aim_cameras")) cfg.aim_cameras = j.at("aim_cameras").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("scenario: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

SceneConfig load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read scenario file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return scenario_from_json(ss.str());
}

std::array<double, 3> size_prior(AgentClass c) {
  switch (c) {
    case AgentClass::kCar: return {4.5, 1.9, 1.6};
    case AgentClass::kTruck: return {8.0, 2.5, 3.0};
    case AgentClass::kPedestrian: return {0.6, 0.6, 1.7};
    case AgentClass::kCyclist: return {1.8, 0.6, 1.7};
  }
  return {1.0, 1.0, 1.0};
}

std::uint32_t map_class_at(Layout layout, double x, double y) {
  const std::vector<double> arms = arm_angles(layout);
  const double rj = junction_radius(layout);
  if (has_junction(layout) && x * x + y * y <= rj * rj) return 5;
  bool near_road = false;
  for (double a : arms) {
    double s = 0.0, t = 0.0;
    arm_coords(a, x, y, s, t);
    const double at = std::abs(t);
    if (s >= 0.0 && at <= kRoadHalfWidth) {
      if (has_junction(layout)) {
        if (s >= rj + 0.5 && s < rj + 3.5) return 3;
        if (s >= rj + 3.5 && s < rj + 4.1 && t > 0.0) return 6;
      }
      if (at <= 0.3 || std::abs(at - kLaneWidth) <= 0.3) return 2;
      return 1;
    }
    if (s >= -(kRoadHalfWidth + kSidewalk) && at <= kRoadHalfWidth + kSidewalk) near_road = true;
  }
  return near_road ? 4 : 0;
}

std::vector<Vec3> layout_corners(Layout layout) {
  std::vector<double> arms = arm_angles(layout);
  std::sort(arms.begin(), arms.end());
  const double lateral = kRoadHalfWidth + kCornerSetback;
  std::vector<Vec3> out;
  for (std::size_t i = 0; i < arms.size(); ++i) {
    const double a = arms[i];
    const double b = i + 1 < arms.size() ? arms[i + 1] : arms[0] + 2.0 * kPi;
    const double gap = b - a;
    if (gap < kPi - 1e-9) {
      const double mid = a + 0.5 * gap;
      const double r = lateral / std::sin(0.5 * gap);
      out.push_back({r * std::cos(mid), r * std::sin(mid), 0.0});
    } else {
      // Flat side: one mount a short way down each bounding arm.
      const double along = 12.0;
      out.push_back({along * std::cos(a) - lateral * std::sin(a), along * std::sin(a) + lateral * std::cos(a), 0.0});
      out.push_back({along * std::cos(b) + lateral * std::sin(b), along * std::sin(b) - lateral * std::cos(b), 0.0});
    }
  }
  return out;
}

std::vector<CameraRig> sample_rigs(const SceneConfig& cfg, Rng& rng) {
  cfg.validate();
  std::vector<Vec3> corners = layout_corners(cfg.layout);
  // Fisher-Yates with the portable index draw.
  for (std::size_t i = corners.size(); i > 1; --i) std::swap(corners[i - 1], corners[uniform_index(rng, i)]);
  std::vector<CameraRig> rigs;
  for (std::size_t k = 0; k < cfg.num_cameras; ++k) {
    Vec3 pos = corners[k % corners.size()];
    pos[2] = uniform(rng, 3.0, 10.0);
    const double pitch = uniform(rng, -35.0, -5.0) * kPi / 180.0;
    double yaw = uniform(rng, 0.0, 2.0 * kPi);
    if (cfg.aim_cameras) yaw = std::atan2(-pos[1], -pos[0]) + (yaw / (2.0 * kPi) - 0.5) * (kPi / 3.0);
    rigs.push_back(CameraRig::from_pose(pos, yaw, pitch, cfg.focal, cfg.image_width, cfg.image_height));
  }
  return rigs;
}

std::array<std::size_t, 2> traffic_count_range(Traffic t) {
  switch (t) {
    case Traffic::kLow: return {3, 7};
    case Traffic::kMed: return {12, 18};
    case Traffic::kHigh: return {34, 46};
  }
  return {0, 0};
}

std::array<std::array<double, 2>, 4> footprint(const Box3D& b) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double hl = 0.5 * b.l, hw = 0.5 * b.w;
  const double local[4][2] = {{hl, hw}, {-hl, hw}, {-hl, -hw}, {hl, -hw}};
  std::array<std::array<double, 2>, 4> out{};
  for (int i = 0; i < 4; ++i)
    out[i] = {b.x + c * local[i][0] - s * local[i][1], b.y + s * local[i][0] + c * local[i][1]};
  return out;
}

bool footprints_overlap(const Box3D& a, const Box3D& b, double margin) {
  Box3D ea = a, eb = b;
  ea.l += margin;
  ea.w += margin;
  eb.l += margin;
  eb.w += margin;
  const auto pa = footprint(ea), pb = footprint(eb);
  for (const Box3D* box : {&ea, &eb}) {
    const double c = std::cos(box->yaw), s = std::sin(box->yaw);
    const double axes[2][2] = {{c, s}, {-s, c}};
    for (const auto& ax : axes) {
      double amin = std::numeric_limits<double>::infinity(), amax = -amin;
      double bmin = amin, bmax = -amin;
      for (const auto& p : pa) {
        const double v = p[0] * ax[0] + p[1] * ax[1];
        amin = std::min(amin, v);
        amax = std::max(amax, v);
      }
      for (const auto& p : pb) {
        const double v = p[0] * ax[0] + p[1] * ax[1];
        bmin = std::min(bmin, v);
        bmax = std::max(bmax, v);
      }
      if (amax < bmin || bmax < amin) return false;
    }
  }
  return true;
}

bool inside_range(const Box3D& b, const BevGridSpec& grid) {
  for (const auto& p : footprint(b))
    if (p[0] <= grid.x_min || p[0] >= grid.x_max || p[1] <= grid.y_min || p[1] >= grid.y_max) return false;
  return b.z - 0.5 * b.h >= 0.0 && b.z + 0.5 * b.h <= grid.z_max;
}

std::vector<Agent> sample_agents(const SceneConfig& cfg, Rng& rng) {
  cfg.validate();
  const auto range = traffic_count_range(cfg.traffic);
  const std::size_t target =
      cfg.num_agents != 0 ? cfg.num_agents : range[0] + uniform_index(rng, range[1] - range[0] + 1);
  std::vector<Agent> agents;
  for (std::size_t k = 0; k < target; ++k) {
    const AgentClass c = draw_class(rng);
    for (int attempt = 0; attempt < kPlacementAttempts; ++attempt) {
      const Box3D b = propose(c, cfg.layout, cfg.grid, rng);
      if (!inside_range(b, cfg.grid)) continue;
      bool clash = false;
      for (const Agent& other : agents)
        if (footprints_overlap(b, other.box, kAgentMargin)) {
          clash = true;
          break;
        }
      if (clash) continue;
      agents.push_back({c, b});
      break;
    }
  }
  return agents;
}

Scene generate_scene(const SceneConfig& cfg) {
  cfg.validate();
  Scene scene;
  scene.config = cfg;
  Rng rig_rng = substream(cfg.seed, "rigs");
  Rng agent_rng = substream(cfg.seed, "agents");
  scene.rigs = sample_rigs(cfg, rig_rng);
  scene.agents = sample_agents(cfg, agent_rng);
  scene.masks = rasterize_gt(cfg.layout, scene.agents, cfg.grid);
  return scene;
}

std::vector<Agent> advance(const std::vector<Agent>& agents, double dt) {
  std::vector<Agent> out = agents;
  for (Agent& a : out) {
    a.box.x += a.box.vx * dt;
    a.box.y += a.box.vy * dt;
  }
  return out;
}

double agent_intensity(AgentClass c) {
  static const double v[kNumAgentClasses] = {0.95, 0.80, 0.70, 0.62};
  return v[static_cast<std::size_t>(c)];
}

bool is_agent_intensity(double v) {
  for (std::size_t c = 0; c < kNumAgentClasses; ++c)
    if (v == agent_intensity(static_cast<AgentClass>(c))) return true;
  return false;
}

Tensor render_view(Layout layout, const std::vector<Agent>& agents, const CameraRig& rig) {
  const std::size_t h = static_cast<std::size_t>(rig.height), w = static_cast<std::size_t>(rig.width);
  Tensor img({1, h, w});
  if (rig.is_dummy) return img;
  const double fx = rig.intrinsics[0], fy = rig.intrinsics[4];
  const double cx = rig.intrinsics[2], cy = rig.intrinsics[5];
  const Vec3& origin = rig.position;
  // Camera-to-world rotation is the transpose of the extrinsic block.
  auto ray = [&](std::size_t px, std::size_t py) {
    const double dc[3] = {(static_cast<double>(px) + 0.5 - cx) / fx, (static_cast<double>(py) + 0.5 - cy) / fy, 1.0};
    Vec3 d{};
    for (int j = 0; j < 3; ++j)
      for (int i = 0; i < 3; ++i) d[j] += rig.extrinsics[i * 4 + j] * dc[i];
    return d;
  };

  std::vector<double> depth(h * w, std::numeric_limits<double>::infinity());
  double* px = img.data().data();
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const Vec3 d = ray(x, y);
      double v = 0.05 + 0.05 * (static_cast<double>(y) + 0.5) / static_cast<double>(h);
      if (d[2] < 0.0) {
        const double t = -origin[2] / d[2];
        v = class_intensity_ground(map_class_at(layout, origin[0] + t * d[0], origin[1] + t * d[1]));
      }
      px[y * w + x] = v;
    }

  for (const Agent& a : agents) {
    const auto corners = box_corners(a.box);
    bool all_front = true, any_front = false;
    double umin = std::numeric_limits<double>::infinity(), umax = -umin, vmin = umin, vmax = -umin;
    for (const Vec3& c : corners) {
      const ProjectionResult pr = project(c, rig);
      if (pr.depth > kNear) {
        any_front = true;
        umin = std::min(umin, pr.u);
        umax = std::max(umax, pr.u);
        vmin = std::min(vmin, pr.v);
        vmax = std::max(vmax, pr.v);
      } else {
        all_front = false;
      }
    }
    if (!any_front) continue;
    long x0 = 0, x1 = static_cast<long>(w) - 1, y0 = 0, y1 = static_cast<long>(h) - 1;
    if (all_front) {
      x0 = std::max(x0, static_cast<long>(std::floor(umin - 0.5)));
      x1 = std::min(x1, static_cast<long>(std::ceil(umax - 0.5)));
      y0 = std::max(y0, static_cast<long>(std::floor(vmin - 0.5)));
      y1 = std::min(y1, static_cast<long>(std::ceil(vmax - 0.5)));
    }
    const double shade = agent_intensity(a.cls);
    for (long y = y0; y <= y1; ++y)
      for (long x = x0; x <= x1; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x);
        const double t = ray_box(origin, ray(static_cast<std::size_t>(x), static_cast<std::size_t>(y)), a.box);
        if (t < depth[i]) {
          depth[i] = t;
          px[i] = shade;
        }
      }
  }
  return img;
}

Tensor render_view(const Scene& scene, const CameraRig& rig) {
  return render_view(scene.config.layout, scene.agents, rig);
}

GtMasks rasterize_gt(Layout layout, const std::vector<Agent>& agents, const BevGridSpec& grid) {
  grid.validate();
  GtMasks m;
  m.rows = grid.rows;
  m.cols = grid.cols;
  m.map.assign(grid.num_cells(), 0);
  m.object.assign(grid.num_cells(), static_cast<std::uint32_t>(kNumAgentClasses));
  for (std::size_t r = 0; r < grid.rows; ++r)
    for (std::size_t c = 0; c < grid.cols; ++c)
      m.map[grid.cell(r, c)] = map_class_at(layout, grid.center_x(c), grid.center_y(r));
  for (const Agent& a : agents) {
    const double cs = std::cos(a.box.yaw), sn = std::sin(a.box.yaw);
    for (std::size_t r = 0; r < grid.rows; ++r)
      for (std::size_t c = 0; c < grid.cols; ++c) {
        const double dx = grid.center_x(c) - a.box.x, dy = grid.center_y(r) - a.box.y;
        const double lx = cs * dx + sn * dy, ly = -sn * dx + cs * dy;
        if (std::abs(lx) <= 0.5 * a.box.l && std::abs(ly) <= 0.5 * a.box.w)
          m.object[grid.cell(r, c)] = static_cast<std::uint32_t>(a.cls);
      }
  }
  return m;
}

GtMasks rasterize_gt(const Scene& scene, const BevGridSpec& grid) {
  return rasterize_gt(scene.config.layout, scene.agents, grid);
}

std::vector<Box3D> gt_boxes(const std::vector<Agent>& agents) {
  std::vector<Box3D> out;
  out.reserve(agents.size());
  for (const Agent& a : agents) out.push_back(a.box);
  return out;
}

void add_backbone_params(ParameterSet& ps, std::size_t channels, Rng& rng, std::size_t in_channels) {
  add_dense(ps, "bb.patch", kPatch * kPatch * in_channels, channels, rng);
  const std::size_t fan = channels * 9;
  ps.add("bb.conv.w", glorot({channels, channels, 3, 3}, fan, fan, rng));
  ps.add("bb.conv.b", Tensor(Shape{channels}));
}

Var toy_backbone(Tape& tape, ParameterSet& ps, Var image) {
  const Tensor& img = image.value();
  if (img.rank() != 3 || img.dim(1) % kPatch != 0 || img.dim(2) % kPatch != 0) {
    throw DimensionError("toy_backbone: expected [C x H x W] with H, W multiples of 8, got " +
                         shape_str(img.shape()));
  }
  const std::size_t h = img.dim(1) / kPatch, w = img.dim(2) / kPatch;
  const Var patches = patchify(image, kPatch);
  const Var emb = linear(patches, pvar(tape, ps, "bb.patch.w"), pvar(tape, ps, "bb.patch.b"));
  const std::size_t c = emb.value().dim(1);
  const Var e = reshape(transpose(emb), {c, h, w});
  const Var conv = conv2d(e, pvar(tape, ps, "bb.conv.w"), pvar(tape, ps, "bb.conv.b"), Padding::kReplicate);
  return add(e, relu(conv));
}

}  // namespace rbev
