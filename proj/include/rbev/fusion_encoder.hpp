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

#include <limits>
#include <span>
#include <string>
#include <vector>

#include "rbev/autodiff.hpp"
#include "rbev/geometry.hpp"
#include "rbev/relation_graph.hpp"
#include "rbev/rng.hpp"

namespace rbev {

struct GatConfig {
  std::size_t layers = 3;
  std::size_t heads = 4;
  std::size_t hidden = 128;
  double dropout = 0.1;
  bool residual = true;

  void validate() const;
};

struct EncoderConfig {
  std::size_t layers = 6;
  std::size_t channels = 16;
  std::size_t temporal_frames = 2;
  std::size_t ffn_hidden = 32;
  std::size_t points_per_ref = 4;
  double dropout = 0.1;
  // Feature-map stride in pixels (backbone patch size).
  double feature_stride = 8.0;
  // Ablation switches: without the GAT every visible camera gets the same
  // weight; without camera features the camera nodes carry zeros.
  bool use_gat = true;
  bool use_camera_features = true;

  void validate() const;
};

constexpr double kNoEdge = -std::numeric_limits<double>::infinity();

// Per-cell, per-camera logits and normalized weights. Entries without an edge
// hold kNoEdge logits and zero weight.
struct FusionField {
  Tensor logits;   // [P x N]
  Tensor weights;  // [P x N]
  std::vector<char> uncovered;  // [P], no visible camera
};

// Geometry shared by every encoder layer of one sample.
struct EncoderGeometry {
  BevGridSpec grid;
  PointSamples samples;
  VisibilityMask visibility;
  GraphTopology topology;
  std::vector<char> covered;  // [P]
};

EncoderGeometry prepare_geometry(const BevGridSpec& grid, const std::vector<CameraRig>& rigs);

// Parameter registration. Weight matrices use a Glorot-uniform draw from
// `rng`, biases start at zero, normalization gains at one; deformable offsets
// and their attention logits start at zero (plain lookup at the projected
// point, uniform weights).
void add_gat_params(ParameterSet& ps, const GatConfig& gat, std::size_t channels, Rng& rng);
void add_encoder_params(ParameterSet& ps, const EncoderConfig& cfg, const GatConfig& gat,
                        const BevGridSpec& grid, Rng& rng);

struct GatOutput {
  Var edge_logits;  // [E x 1]
  Tensor dense;     // [P x N], kNoEdge where no edge exists
};

// bev_nodes [P x C], cam_nodes [N x C]. `rng` drives dropout in training.
GatOutput gat_score(Tape& tape, ParameterSet& ps, const GatConfig& cfg, Var bev_nodes,
                    Var cam_nodes, const GraphTopology& topo, bool training = false,
                    Rng* rng = nullptr);

// Masked softmax over cameras per cell.
FusionField fusion_weights(const Tensor& logits, const VisibilityMask& vis);

// Recorded form over edges: returns per-edge weights [E x 1] and fills `field`.
Var fusion_weights(Var edge_logits, const GraphTopology& topo, const VisibilityMask& vis,
                   FusionField* field);

// Deformable sampling for every edge. maps: [N*C x h x w] (camera-major);
// offsets: [P x R*K*2] in feature cells; attn: [P x R*K], already normalized
// per reference. Returns [E x C].
Var deform_sample_edges(Var maps, std::size_t channels, Var offsets, Var attn,
                        const GraphTopology& topo, const PointSamples& samples,
                        double stride);

// Single-location form: one query, its projected reference points in one
// camera, and that camera's feature map [C x h x w].
struct RefPoint {
  double u = 0.0, v = 0.0;
  bool valid = true;
};
struct DeformParams {
  Tensor offset_w;  // [C x R*K*2]
  Tensor offset_b;  // [R*K*2]
  Tensor attn_w;    // [C x R*K]
  Tensor attn_b;    // [R*K]
};
// Sampling parameters of encoder layer `layer`.
DeformParams deform_params(const ParameterSet& ps, std::size_t layer);
Tensor deform_sample(const Tensor& query, std::span<const RefPoint> refs, const Tensor& feature_map,
                     const DeformParams& params, std::size_t points_per_ref, double stride);

struct ResCAOutput {
  Var out;           // after residual and normalization, [P x C]
  Var pre_residual;  // weighted sum of per-camera samples, [P x C]
  Var edge_samples;  // [E x C]
  FusionField field;
};

ResCAOutput resca(Tape& tape, ParameterSet& ps, const EncoderConfig& cfg, const GatConfig& gat,
                  std::size_t layer, Var queries, Var maps, Var cam_nodes, const EncoderGeometry& geo, bool training,
                  Rng* rng);

// Dense single-head attention from each cell to the 3x3 neighbourhood of the
// same cell in every history map. Empty history is replaced by one zero map.
Var temporal_self_attention(Tape& tape, ParameterSet& ps, std::size_t layer, Var queries,
                            const std::vector<Tensor>& history, const BevGridSpec& grid);

// Fixed sinusoidal embedding of the cell grid, [P x C].
Tensor grid_positional_embedding(std::size_t rows, std::size_t cols, std::size_t channels);

struct EncoderOutput {
  Var bev;  // [P x C]
  std::vector<FusionField> fields;  // one per layer
  std::vector<Var> resca_pre;       // one per layer
  std::vector<Var> edge_samples;    // one per layer
};

// features: one [C x h x w] map per camera (dummies included).
EncoderOutput encode(Tape& tape, ParameterSet& ps, const EncoderConfig& cfg, const GatConfig& gat,
                     const EncoderGeometry& geo, const std::vector<Var>& features,
                     const std::vector<Tensor>& history, bool training = false,
                     Rng* rng = nullptr);

}  // namespace rbev
