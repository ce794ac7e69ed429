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

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rbev/autodiff.hpp"
#include "rbev/geometry.hpp"
#include "rbev/rng.hpp"

namespace rbev {

struct Box3D {
  double x = 0.0, y = 0.0, z = 0.0;
  double l = 1.0, w = 1.0, h = 1.0;
  double yaw = 0.0;
  double vx = 0.0, vy = 0.0;
  int label = 0;
  double score = 1.0;
};

struct HeadConfig {
  std::size_t num_classes = 4;  // background is index num_classes
  std::size_t num_queries = 900;
  std::size_t decoder_layers = 1;
  std::size_t ffn_hidden = 32;
  std::size_t map_classes = 7;
  std::size_t seg_blocks = 4;
  std::size_t seg_groups = 4;
  bool velocity = false;
  double lambda_cls = 2.0;
  double lambda_reg = 0.25;
  double lambda_seg = 2.0;
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;
  double velocity_scale = 10.0;

  std::size_t box_dims() const { return velocity ? 10 : 8; }
  void validate(std::size_t channels) const;
};

void add_head_params(ParameterSet& ps, const HeadConfig& cfg, std::size_t channels, Rng& rng);

// Normalized box encoding: [x, y in [0,1] over the grid extent, z / z_max,
// log l, log w, log h, sin yaw, cos yaw, (vx, vy) / velocity_scale].
std::vector<double> encode_box(const Box3D& b, const BevGridSpec& grid, const HeadConfig& cfg);
Box3D decode_box(std::span<const double> v, const BevGridSpec& grid, const HeadConfig& cfg);

struct DetectOutput {
  Var logits;  // [n_q x (K+1)]
  Var boxes;   // [n_q x box_dims], normalized encoding
};

// bev [P x C] on `grid`.
DetectOutput detect_forward(Tape& tape, ParameterSet& ps, const HeadConfig& cfg, Var bev,
                            const BevGridSpec& grid);
// One box per query: label = most likely foreground class, score = its
// probability.
std::vector<Box3D> decode_detections(const DetectOutput& out, const HeadConfig& cfg,
                                     const BevGridSpec& grid);
std::vector<Box3D> detect(Tape& tape, ParameterSet& ps, const HeadConfig& cfg, Var bev,
                          const BevGridSpec& grid);

// Minimum-cost one-to-one assignment of rows (ground truth) to columns
// (predictions), rows <= cols. Among optimal assignments the lexicographically
// smallest (row 0's column first) is returned. result[i] = column of row i.
std::vector<std::size_t> hungarian_match(const Tensor& cost);

// [G x n_q] matching cost: -lambda_cls * p(class) + lambda_reg * L1.
Tensor matching_cost(const DetectOutput& out, const std::vector<Box3D>& gts, const HeadConfig& cfg,
                     const BevGridSpec& grid);

struct DetectionLoss {
  Var cls;  // focal sum / max(1, G)
  Var reg;  // matched L1 sum / max(1, G)
  std::vector<std::size_t> assignment;
};

// Uses `assignment` when given, otherwise runs the matcher.
DetectionLoss detection_loss(const DetectOutput& out, const std::vector<Box3D>& gts,
                             const HeadConfig& cfg, const BevGridSpec& grid,
                             const std::vector<std::size_t>* assignment = nullptr);

struct SegOutput {
  Var map_logits;     // [n_map x rows x cols]
  Var object_logits;  // [(K+1) x rows x cols]
};

SegOutput seg_decode(Tape& tape, ParameterSet& ps, const HeadConfig& cfg, Var bev,
                     const BevGridSpec& grid);

// Mean per-cell softmax cross-entropy. labels: one class per cell, row-major.
Var segmentation_loss(Var logits, std::span<const std::uint32_t> labels);

struct LossBreakdown {
  double cls = 0.0, reg = 0.0, seg_map = 0.0, seg_obj = 0.0, total = 0.0;
};

// lambda_cls * cls + lambda_reg * reg + lambda_seg * (seg_map + seg_obj).
LossBreakdown total_loss(double cls, double reg, double seg_map, double seg_obj, const HeadConfig& cfg);
Var total_loss(Var cls, Var reg, Var seg_map, Var seg_obj, const HeadConfig& cfg);
// Recomputes the composition; throws NumericError on a mismatch or a
// negative term.
void check_breakdown(const LossBreakdown& b, const HeadConfig& cfg);

std::string detections_to_json(const std::vector<std::vector<Box3D>>& frames,
                               const std::vector<std::string>& class_names);
std::vector<std::vector<Box3D>> detections_from_json(const std::string& text,
                                                     const std::vector<std::string>& class_names);

}  // namespace rbev
