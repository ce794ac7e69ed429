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

#include "rbev/relation_graph.hpp"

#include <cmath>

#include "json.hpp"
#include "rbev/ops.hpp"

namespace rbev {

EdgeGeometry edge_geometry(double cell_x, double cell_y, const CameraRig& rig,
                           const BevGridSpec& grid) {
  if (rig.is_dummy) throw ConfigError("edge_geometry: dummy cameras have no edges");
  const double rx = grid.half_x(), ry = grid.half_y();
  const double dx = cell_x - rig.position[0];
  const double dy = cell_y - rig.position[1];
  const double dist = std::hypot(dx, dy);
  const double delta = dist < 1e-9 ? 0.0 : wrap_angle(std::atan2(dy, dx) - rig.yaw);
  return {dx / rx,
          dy / ry,
          rig.position[2] / grid.z_max,
          dist / std::sqrt(rx * rx + ry * ry),
          std::cos(delta),
          std::sin(delta),
          std::cos(rig.pitch),
          std::sin(rig.pitch)};
}

GraphTopology build_topology(const std::vector<CameraRig>& rigs, const VisibilityMask& vis,
                             const BevGridSpec& grid) {
  if (vis.num_cams != rigs.size() || vis.num_cells != grid.num_cells()) {
    throw DimensionError("build_topology: visibility is " + std::to_string(vis.num_cells) + "x" +
                         std::to_string(vis.num_cams) + " for " + std::to_string(grid.num_cells()) +
                         " cells and " + std::to_string(rigs.size()) + " cameras");
  }
  GraphTopology t;
  t.num_cells = vis.num_cells;
  t.num_cams = vis.num_cams;
  const std::size_t e = vis.count();
  t.edge_cell.reserve(e);
  t.edge_cam.reserve(e);
  t.edge_attrs = Tensor(Shape{e, kEdgeDim});
  std::size_t k = 0;
  for (std::size_t p = 0; p < vis.num_cells; ++p) {
    const double x = grid.center_x(p % grid.cols), y = grid.center_y(p / grid.cols);
    for (std::size_t n = 0; n < vis.num_cams; ++n) {
      if (!vis(p, n)) continue;
      if (rigs[n].is_dummy) throw ConfigError("build_topology: dummy camera marked visible");
      t.edge_cell.push_back(static_cast<std::uint32_t>(p));
      t.edge_cam.push_back(static_cast<std::uint32_t>(n));
      const EdgeGeometry g = edge_geometry(x, y, rigs[n], grid);
      for (std::size_t i = 0; i < kEdgeDim; ++i) t.edge_attrs[k * kEdgeDim + i] = g[i];
      ++k;
    }
  }
  return t;
}

Tensor pool_camera_node(const Tensor& feature_map) {
  require_rank(feature_map, 3, "pool_camera_node");
  const std::size_t c = feature_map.dim(0), hw = feature_map.dim(1) * feature_map.dim(2);
  if (hw == 0) throw DimensionError("pool_camera_node: empty feature map " + shape_str(feature_map.shape()));
  Tensor out(Shape{c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (std::size_t i = 0; i < hw; ++i) s += feature_map[ch * hw + i];
    out[ch] = s / static_cast<double>(hw);
  }
  return out;
}

Var pool_camera_node(Var feature_map) {
  const Tensor& f = feature_map.value();
  require_rank(f, 3, "pool_camera_node");
  const std::size_t c = f.dim(0), hw = f.dim(1) * f.dim(2);
  if (hw == 0) throw DimensionError("pool_camera_node: empty feature map " + shape_str(f.shape()));
  return reshape(mean_last(reshape(feature_map, {c, hw})), {1, c});
}

RelationGraph build_graph(const std::vector<CameraRig>& rigs,
                          const std::vector<Tensor>& feature_maps, const Tensor& bev_queries,
                          const VisibilityMask& vis, const BevGridSpec& grid) {
  if (feature_maps.size() != rigs.size()) {
    throw DimensionError("build_graph: " + std::to_string(feature_maps.size()) +
                         " feature maps for " + std::to_string(rigs.size()) + " cameras");
  }
  require_rank(bev_queries, 2, "build_graph");
  if (bev_queries.dim(0) != grid.num_cells()) {
    throw DimensionError("build_graph: queries " + shape_str(bev_queries.shape()) + " for " +
                         std::to_string(grid.num_cells()) + " cells");
  }
  const std::size_t c = bev_queries.dim(1);
  RelationGraph g;
  g.bev_nodes = bev_queries;
  g.cam_nodes = Tensor(Shape{rigs.size(), c});
  for (std::size_t n = 0; n < rigs.size(); ++n) {
    if (feature_maps[n].rank() != 3 || feature_maps[n].dim(0) != c) {
      throw DimensionError("build_graph: feature map " + shape_str(feature_maps[n].shape()) +
                           " does not have " + std::to_string(c) + " channels");
    }
    const Tensor pooled = pool_camera_node(feature_maps[n]);
    for (std::size_t ch = 0; ch < c; ++ch) g.cam_nodes[n * c + ch] = pooled[ch];
  }
  g.topology = build_topology(rigs, vis, grid);
  g.visibility = vis;
  return g;
}

std::string graph_to_json(const RelationGraph& g) {
  nlohmann::json j;
  j["num_cells"] = g.topology.num_cells;
  j["num_cams"] = g.topology.num_cams;
  j["channels"] = g.bev_nodes.rank() == 2 ? g.bev_nodes.dim(1) : 0;
  nlohmann::json edges = nlohmann::json::array();
  const std::size_t e = g.topology.num_edges();
  for (std::size_t k = 0; k < e; ++k) {
    std::vector<double> attrs(g.topology.edge_attrs.data().begin() + static_cast<std::ptrdiff_t>(k * kEdgeDim),
                              g.topology.edge_attrs.data().begin() + static_cast<std::ptrdiff_t>((k + 1) * kEdgeDim));
    edges.push_back({{"cam", g.topology.edge_cam[k]}, {"cell", g.topology.edge_cell[k]}, {"g", attrs}});
  }
  j["edges"] = std::move(edges);
  j["cam_nodes"] = g.cam_nodes.values();
  return j.dump();
}

}  // namespace rbev
