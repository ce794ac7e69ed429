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

#include "rbev/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "json.hpp"
#include "rbev/parallel.hpp"

namespace rbev {
namespace {

constexpr double kOrthoTol = 1e-9;
constexpr double kDepthEps = 1e-12;

Mat3 rotation_of(const Mat4& e) {
  return {e[0], e[1], e[2], e[4], e[5], e[6], e[8], e[9], e[10]};
}

Vec3 translation_of(const Mat4& e) { return {e[3], e[7], e[11]}; }

bool is_identity(const double* m, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (m[i * n + j] != (i == j ? 1.0 : 0.0)) return false;
  return true;
}

void derive_pose(CameraRig& rig) {
  if (rig.is_dummy) {
    rig.position = {0.0, 0.0, 0.0};
    rig.yaw = 0.0;
    rig.pitch = 0.0;
    return;
  }
  const Mat3 r = rotation_of(rig.extrinsics);
  const Vec3 t = translation_of(rig.extrinsics);
  for (int i = 0; i < 3; ++i) {
    rig.position[i] = -(r[0 * 3 + i] * t[0] + r[1 * 3 + i] * t[1] + r[2 * 3 + i] * t[2]);
  }
  const double fx = r[6], fy = r[7], fz = r[8];
  rig.pitch = std::asin(std::clamp(fz, -1.0, 1.0));
  rig.yaw = std::atan2(fy, fx);
}

}  // namespace

double wrap_angle(double a) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  double w = std::fmod(a, two_pi);
  if (w <= -std::numbers::pi) w += two_pi;
  if (w > std::numbers::pi) w -= two_pi;
  return w;
}

CameraRig CameraRig::from_pose(const Vec3& position, double yaw, double pitch, double focal,
                               int width, int height) {
  const double cp = std::cos(pitch), sp = std::sin(pitch);
  const double cy = std::cos(yaw), sy = std::sin(yaw);
  const Vec3 fwd{cp * cy, cp * sy, sp};
  const Vec3 right{sy, -cy, 0.0};
  const Vec3 down{fwd[1] * right[2] - fwd[2] * right[1], fwd[2] * right[0] - fwd[0] * right[2],
                  fwd[0] * right[1] - fwd[1] * right[0]};
  const Vec3* rows[3] = {&right, &down, &fwd};
  CameraRig rig;
  rig.intrinsics = {focal, 0.0, 0.5 * width, 0.0, focal, 0.5 * height, 0.0, 0.0, 1.0};
  rig.extrinsics = {};
  for (int i = 0; i < 3; ++i) {
    const Vec3& row = *rows[i];
    for (int j = 0; j < 3; ++j) rig.extrinsics[i * 4 + j] = row[j];
    rig.extrinsics[i * 4 + 3] = -(row[0] * position[0] + row[1] * position[1] + row[2] * position[2]);
  }
  rig.extrinsics[15] = 1.0;
  rig.width = width;
  rig.height = height;
  rig.validate();
  // Pose is re-derived from the matrices so a rig reloaded from disk compares
  // equal to the one that was saved.
  derive_pose(rig);
  return rig;
}

CameraRig CameraRig::from_matrices(const Mat3& intrinsics, const Mat4& extrinsics, int width,
                                   int height, bool is_dummy) {
  CameraRig rig;
  rig.intrinsics = intrinsics;
  rig.extrinsics = extrinsics;
  rig.width = width;
  rig.height = height;
  rig.is_dummy = is_dummy;
  rig.validate();
  derive_pose(rig);
  return rig;
}

CameraRig CameraRig::dummy(int width, int height) {
  Mat3 k{1, 0, 0, 0, 1, 0, 0, 0, 1};
  Mat4 e{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};
  return from_matrices(k, e, width, height, true);
}

void CameraRig::validate() const {
  if (width <= 0 || height <= 0) {
    throw ConfigError("camera image size must be positive, got " + std::to_string(width) + "x" +
                      std::to_string(height));
  }
  if (is_dummy) {
    if (!is_identity(intrinsics.data(), 3) || !is_identity(extrinsics.data(), 4)) {
      throw ConfigError("dummy camera must carry identity intrinsics and extrinsics");
    }
    return;
  }
  const Mat3& k = intrinsics;
  if (!(k[0] > 0.0) || !(k[4] > 0.0)) throw ConfigError("camera focal lengths must be positive");
  if (k[3] != 0.0 || k[6] != 0.0 || k[7] != 0.0 || k[8] != 1.0) {
    throw ConfigError("camera intrinsics must be upper triangular with K[2][2] = 1");
  }
  const Mat4& e = extrinsics;
  if (e[12] != 0.0 || e[13] != 0.0 || e[14] != 0.0 || e[15] != 1.0) {
    throw ConfigError("camera extrinsics bottom row must be [0 0 0 1]");
  }
  const Mat3 r = rotation_of(e);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double d = 0.0;
      for (int c = 0; c < 3; ++c) d += r[i * 3 + c] * r[j * 3 + c];
      if (std::abs(d - (i == j ? 1.0 : 0.0)) > kOrthoTol) {
        throw ConfigError("camera extrinsic rotation is not orthonormal");
      }
    }
  const double det = r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6]) +
                     r[2] * (r[3] * r[7] - r[4] * r[6]);
  if (det < 0.0) throw ConfigError("camera extrinsic rotation is a reflection");
}

void BevGridSpec::validate() const {
  if (rows == 0 || cols == 0) throw ConfigError("BEV grid needs at least one cell");
  if (!(x_max > x_min) || !(y_max > y_min)) throw ConfigError("BEV grid range must be increasing");
  if (anchor_heights.empty()) throw ConfigError("BEV grid needs at least one anchor height");
  for (std::size_t j = 1; j < anchor_heights.size(); ++j) {
    if (!(anchor_heights[j] > anchor_heights[j - 1])) {
      throw ConfigError("anchor heights must be strictly increasing");
    }
  }
  if (!(z_max > 0.0)) throw ConfigError("z_max must be positive");
}

std::vector<double> spaced_anchor_heights(std::size_t n, double top) {
  std::vector<double> h(n);
  for (std::size_t j = 0; j < n; ++j) h[j] = (static_cast<double>(j) + 0.5) * top / static_cast<double>(n);
  return h;
}

BevGridSpec BevGridSpec::m2i() {
  BevGridSpec g;
  g.x_min = g.y_min = -51.2;
  g.x_max = g.y_max = 51.2;
  g.rows = g.cols = 200;
  g.anchor_heights = spaced_anchor_heights(8);
  g.z_max = 12.0;
  return g;
}

BevGridSpec BevGridSpec::desk() {
  BevGridSpec g;
  g.x_min = g.y_min = -25.6;
  g.x_max = g.y_max = 25.6;
  g.rows = g.cols = 100;
  g.anchor_heights = spaced_anchor_heights(4);
  g.z_max = 12.0;
  return g;
}

BevGridSpec BevGridSpec::preset(const std::string& name) {
  if (name == "m2i") return m2i();
  if (name == "desk") return desk();
  throw ConfigError("unknown grid preset '" + name + "' (expected m2i or desk)");
}

Tensor reference_pillars(const BevGridSpec& grid) {
  grid.validate();
  const std::size_t n = grid.n_ref();
  Tensor t(Shape{n, grid.rows, grid.cols, 3});
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t r = 0; r < grid.rows; ++r)
      for (std::size_t c = 0; c < grid.cols; ++c) {
        const std::size_t base = ((j * grid.rows + r) * grid.cols + c) * 3;
        t[base + 0] = grid.center_x(c);
        t[base + 1] = grid.center_y(r);
        t[base + 2] = grid.anchor_heights[j];
      }
  return t;
}

Vec3 world_to_camera(const Vec3& p, const CameraRig& rig) {
  const Mat4& e = rig.extrinsics;
  Vec3 out;
  for (int i = 0; i < 3; ++i) {
    out[i] = e[i * 4] * p[0] + e[i * 4 + 1] * p[1] + e[i * 4 + 2] * p[2] + e[i * 4 + 3];
  }
  return out;
}

ProjectionResult project(const Vec3& p, const CameraRig& rig) {
  ProjectionResult r;
  if (rig.is_dummy) return r;
  const Vec3 pc = world_to_camera(p, rig);
  r.depth = pc[2];
  if (std::abs(pc[2]) <= kDepthEps) return r;
  const Mat3& k = rig.intrinsics;
  r.u = (k[0] * pc[0] + k[1] * pc[1] + k[2] * pc[2]) / pc[2];
  r.v = (k[4] * pc[1] + k[5] * pc[2]) / pc[2];
  r.valid = pc[2] > kDepthEps && r.u >= 0.0 && r.u < rig.width && r.v >= 0.0 && r.v < rig.height;
  return r;
}

Vec3 back_project(double u, double v, double depth, const CameraRig& rig) {
  const Mat3& k = rig.intrinsics;
  const double yc = (v - k[5]) * depth / k[4];
  const double xc = ((u - k[2]) * depth - k[1] * yc) / k[0];
  const Vec3 pc{xc, yc, depth};
  const Mat4& e = rig.extrinsics;
  const Vec3 d{pc[0] - e[3], pc[1] - e[7], pc[2] - e[11]};
  Vec3 w;
  for (int i = 0; i < 3; ++i) w[i] = e[0 * 4 + i] * d[0] + e[1 * 4 + i] * d[1] + e[2 * 4 + i] * d[2];
  return w;
}

std::size_t PointSamples::valid_count() const {
  std::size_t n = 0;
  for (char v : valid) n += v != 0;
  return n;
}

PointSamples point_sampling(const BevGridSpec& grid, const std::vector<CameraRig>& rigs) {
  grid.validate();
  PointSamples s;
  s.num_cams = rigs.size();
  s.n_ref = grid.n_ref();
  s.num_cells = grid.num_cells();
  s.uv.assign(s.num_cams * s.n_ref * s.num_cells * 2, 0.0);
  s.valid.assign(s.num_cams * s.n_ref * s.num_cells, 0);
  parallel_for(s.num_cells, [&](std::size_t p) {
    const Vec3 base{grid.center_x(p % grid.cols), grid.center_y(p / grid.cols), 0.0};
    for (std::size_t n = 0; n < s.num_cams; ++n) {
      if (rigs[n].is_dummy) continue;
      for (std::size_t j = 0; j < s.n_ref; ++j) {
        const ProjectionResult r = project({base[0], base[1], grid.anchor_heights[j]}, rigs[n]);
        const std::size_t i = s.index(n, j, p);
        s.uv[2 * i] = r.u;
        s.uv[2 * i + 1] = r.v;
        s.valid[i] = r.valid ? 1 : 0;
      }
    }
  }, 256);
  return s;
}

std::size_t VisibilityMask::count() const {
  std::size_t n = 0;
  for (char b : bits) n += b != 0;
  return n;
}

std::size_t VisibilityMask::cell_degree(std::size_t cell) const {
  std::size_t n = 0;
  for (std::size_t c = 0; c < num_cams; ++c) n += (*this)(cell, c);
  return n;
}

VisibilityMask visibility(const PointSamples& s) {
  VisibilityMask m;
  m.num_cells = s.num_cells;
  m.num_cams = s.num_cams;
  m.bits.assign(s.num_cells * s.num_cams, 0);
  for (std::size_t n = 0; n < s.num_cams; ++n)
    for (std::size_t j = 0; j < s.n_ref; ++j)
      for (std::size_t p = 0; p < s.num_cells; ++p)
        if (s.valid[s.index(n, j, p)]) m.bits[p * s.num_cams + n] = 1;
  return m;
}

std::vector<CameraRig> pad_rigs(std::vector<CameraRig> rigs, std::size_t n_max, int fallback_w,
                                int fallback_h) {
  if (rigs.size() > n_max) {
    throw ConfigError("pad_rigs: " + std::to_string(rigs.size()) + " cameras exceed maximum " +
                      std::to_string(n_max));
  }
  const int w = rigs.empty() ? fallback_w : rigs.front().width;
  const int h = rigs.empty() ? fallback_h : rigs.front().height;
  while (rigs.size() < n_max) rigs.push_back(CameraRig::dummy(w, h));
  return rigs;
}

std::string rigs_to_json(const std::vector<CameraRig>& rigs) {
  nlohmann::json arr = nlohmann::json::array();
  for (const CameraRig& r : rigs) {
    arr.push_back({{"intrinsics", r.intrinsics},
                   {"extrinsics", r.extrinsics},
                   {"width", r.width},
                   {"height", r.height},
                   {"dummy", r.is_dummy}});
  }
  return arr.dump(2);
}

std::vector<CameraRig> rigs_from_json(const std::string& text) {
  nlohmann::json arr;
  try {
    arr = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("rig file is not valid JSON: ") + e.what());
  }
  if (!arr.is_array()) throw ConfigError("rig file must hold a JSON array");
  std::vector<CameraRig> rigs;
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const auto& o = arr[i];
    try {
      const auto k = o.at("intrinsics").get<std::vector<double>>();
      const auto e = o.at("extrinsics").get<std::vector<double>>();
      if (k.size() != 9 || e.size() != 16) {
        throw ConfigError("rig " + std::to_string(i) + ": intrinsics need 9 and extrinsics 16 numbers");
      }
      Mat3 km;
      Mat4 em;
      std::copy(k.begin(), k.end(), km.begin());
      std::copy(e.begin(), e.end(), em.begin());
      rigs.push_back(CameraRig::from_matrices(km, em, o.at("width").get<int>(),
                                              o.at("height").get<int>(),
                                              o.value("dummy", false)));
    } catch (const nlohmann::json::exception& ex) {
      throw ConfigError("rig " + std::to_string(i) + ": " + ex.what());
    }
  }
  return rigs;
}

void save_rigs(const std::string& path, const std::vector<CameraRig>& rigs) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write " + path);
  os << rigs_to_json(rigs) << '\n';
}

std::vector<CameraRig> load_rigs(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read rig file " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return rigs_from_json(ss.str());
}

}  // namespace rbev
