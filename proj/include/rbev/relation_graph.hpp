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

namespace rbev {

constexpr std::size_t kEdgeDim = 8;

// [dx/Rx, dy/Ry, z_n/z_max, |d|/sqrt(Rx^2+Ry^2), cos delta, sin delta,
//  cos pitch, sin pitch], delta = heading of the cell seen from the camera
// relative to the camera yaw.
using EdgeGeometry = std::array<double, kEdgeDim>;

EdgeGeometry edge_geometry(double cell_x, double cell_y, const CameraRig& rig,
                           const BevGridSpec& grid);

// Camera -> cell edges, sorted by (cell, camera).
struct GraphTopology {
  std::size_t num_cells = 0;
  std::size_t num_cams = 0;
  std::vector<std::uint32_t> edge_cell;
  std::vector<std::uint32_t> edge_cam;
  Tensor edge_attrs;  // [E x 8]

  std::size_t num_edges() const { return edge_cell.size(); }
};

GraphTopology build_topology(const std::vector<CameraRig>& rigs, const VisibilityMask& vis,
                             const BevGridSpec& grid);

struct RelationGraph {
  Tensor bev_nodes;  // [P x C]
  Tensor cam_nodes;  // [N x C]
  GraphTopology topology;
  VisibilityMask visibility;
};

// Mean over all spatial positions of a [C x H x W] map.
Tensor pool_camera_node(const Tensor& feature_map);
// Recorded variant: [C x H x W] -> [1 x C].
Var pool_camera_node(Var feature_map);

RelationGraph build_graph(const std::vector<CameraRig>& rigs,
                          const std::vector<Tensor>& feature_maps, const Tensor& bev_queries,
                          const VisibilityMask& vis, const BevGridSpec& grid);

std::string graph_to_json(const RelationGraph& g);

}  // namespace rbev
