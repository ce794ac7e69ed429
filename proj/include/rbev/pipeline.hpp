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
#include <string>
#include <vector>

#include "rbev/model.hpp"

namespace rbev {

std::string read_text(const std::string& path);
void write_text(const std::string& path, const std::string& text);

// Binary PGM (P5). maxval > 255 stores 16-bit big-endian samples.
void write_pgm(const std::string& path, const std::vector<std::uint16_t>& pixels, std::size_t width,
               std::size_t height, std::uint16_t maxval);
std::vector<std::uint16_t> read_pgm(const std::string& path, std::size_t& width, std::size_t& height,
                                    std::uint16_t& maxval);

// [1 x H x W] intensities in [0, 1], quantized to 16 bits.
void save_image_pgm(const std::string& path, const Tensor& image);
Tensor load_image_pgm(const std::string& path);
// Row-major labels, maxval = the largest label the mask can hold.
void save_labels_pgm(const std::string& path, const std::vector<std::uint32_t>& labels, std::size_t rows,
                     std::size_t cols, std::uint32_t max_label);
std::vector<std::uint32_t> load_labels_pgm(const std::string& path, std::size_t rows, std::size_t cols);

// Images are quantized the way the bundle stores them.
Tensor quantize_image(const Tensor& image);

// History frames written next to the current frame, 0.5 s apart.
constexpr std::size_t kBundleHistory = 2;

// Writes scenario.json, rigs.json, gt.json, cam<n>.pgm, hist<t>_cam<n>.pgm,
// gt_map.pgm and gt_object.pgm. Everything is a pure function of the
// scenario; the only time-dependent file is the meta.json sidecar.
void write_bundle(const std::string& dir, const Scene& scene);
// Rebuilds a network sample; `model` must use the bundle's grid.
Sample load_bundle(const std::string& dir, const ModelConfig& model);
SceneConfig load_bundle_scenario(const std::string& dir);

// Sidecar with the command, seed and a wall-clock timestamp.
void write_meta(const std::string& dir, const std::string& command, std::uint64_t seed,
                const std::string& extra_json = "{}");

// Small 2-camera case for gradient checks: 10x10 grid, one encoder layer,
// no history, no dropout.
struct GradcheckCase {
  ModelConfig config;
  Sample sample;
};
GradcheckCase gradcheck_case(std::uint64_t seed);
// Same sizes, layout, camera count and seed taken from `base`.
GradcheckCase gradcheck_case(const SceneConfig& base);
// Finite-difference check of the total loss with the matching fixed at the
// initial parameters.
GradCheckReport gradcheck_model(Model& model, const Sample& sample, const GradCheckOptions& opts = {});

// Fixed 2-camera, 10-agent scene used by train-toy when no scenario is given.
SceneConfig toy_scenario(std::uint64_t seed);

}  // namespace rbev
