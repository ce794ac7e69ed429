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

#include "rbev/tensor.hpp"

// World frame: right-handed, z up, origin at the scene centre. Camera frame:
// x right, y down, z forward; depth is the camera-frame z coordinate.
namespace rbev {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<double, 9>;   // row-major
using Mat4 = std::array<double, 16>;  // row-major

struct CameraRig {
  Mat3 intrinsics{};
  Mat4 extrinsics{};  // world -> camera
  int width = 0;
  int height = 0;
  Vec3 position{};    // derived from extrinsics
  double yaw = 0.0;   // heading of the optical axis in the ground plane
  double pitch = 0.0; // elevation of the optical axis, negative looks down
  bool is_dummy = false;

  // Pinhole rig at `position` looking along (yaw, pitch), principal point at
  // the image centre.
  static CameraRig from_pose(const Vec3& position, double yaw, double pitch, double focal,
                             int width, int height);
  // Validates the matrices and derives the pose summary.
  static CameraRig from_matrices(const Mat3& intrinsics, const Mat4& extrinsics, int width,
                                 int height, bool is_dummy = false);
  static CameraRig dummy(int width, int height);

  // Throws ConfigError if any invariant is violated.
  void validate() const;
};

struct BevGridSpec {
  double x_min = -25.6, x_max = 25.6;
  double y_min = -25.6, y_max = 25.6;
  std::size_t rows = 100;  // along y
  std::size_t cols = 100;  // along x
  std::vector<double> anchor_heights{0.5, 1.5, 2.5, 3.5};
  double z_max = 12.0;

  std::size_t num_cells() const { return rows * cols; }
  std::size_t n_ref() const { return anchor_heights.size(); }
  double cell_dx() const { return (x_max - x_min) / static_cast<double>(cols); }
  double cell_dy() const { return (y_max - y_min) / static_cast<double>(rows); }
  double half_x() const { return 0.5 * (x_max - x_min); }
  double half_y() const { return 0.5 * (y_max - y_min); }
  double center_x(std::size_t col) const { return x_min + (static_cast<double>(col) + 0.5) * cell_dx(); }
  double center_y(std::size_t row) const { return y_min + (static_cast<double>(row) + 0.5) * cell_dy(); }
  // Cell index p = row * cols + col.
  std::size_t cell(std::size_t row, std::size_t col) const { return row * cols + col; }

  void validate() const;

  // 200x200 over +-51.2 m, eight anchors.
  static BevGridSpec m2i();
  // 100x100 over +-25.6 m, four anchors.
  static BevGridSpec desk();
  static BevGridSpec preset(const std::string& name);
};

// Evenly spaced anchors over [0, top): (j + 0.5) * top / n.
std::vector<double> spaced_anchor_heights(std::size_t n, double top = 4.0);

// [N_ref x rows x cols x 3]
Tensor reference_pillars(const BevGridSpec& grid);

struct ProjectionResult {
  double u = 0.0;
  double v = 0.0;
  double depth = 0.0;
  bool valid = false;
};

Vec3 world_to_camera(const Vec3& p, const CameraRig& rig);
ProjectionResult project(const Vec3& p, const CameraRig& rig);
// Inverse of project for a known depth.
Vec3 back_project(double u, double v, double depth, const CameraRig& rig);

// Projections of every pillar point into every camera.
struct PointSamples {
  std::size_t num_cams = 0;
  std::size_t n_ref = 0;
  std::size_t num_cells = 0;
  std::vector<double> uv;    // [cam][ref][cell][2] pixels
  std::vector<char> valid;   // [cam][ref][cell]

  std::size_t index(std::size_t cam, std::size_t ref, std::size_t cell) const {
    return (cam * n_ref + ref) * num_cells + cell;
  }
  std::size_t valid_count() const;
};

PointSamples point_sampling(const BevGridSpec& grid, const std::vector<CameraRig>& rigs);

// m[p, n]: cell p is seen by camera n through at least one pillar point.
struct VisibilityMask {
  std::size_t num_cells = 0;
  std::size_t num_cams = 0;
  std::vector<char> bits;

  bool operator()(std::size_t cell, std::size_t cam) const { return bits[cell * num_cams + cam] != 0; }
  std::size_t count() const;
  std::size_t cell_degree(std::size_t cell) const;
};

VisibilityMask visibility(const PointSamples& samples);

// Appends dummy rigs up to n_max. Dummy image size copies the first rig, or
// `fallback_w` x `fallback_h` when the list is empty.
std::vector<CameraRig> pad_rigs(std::vector<CameraRig> rigs, std::size_t n_max,
                                int fallback_w = 800, int fallback_h = 600);

std::string rigs_to_json(const std::vector<CameraRig>& rigs);
std::vector<CameraRig> rigs_from_json(const std::string& text);
void save_rigs(const std::string& path, const std::vector<CameraRig>& rigs);
std::vector<CameraRig> load_rigs(const std::string& path);

// Wraps an angle into (-pi, pi].
double wrap_angle(double a);

}  // namespace rbev
