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

#include <string>
#include <vector>

#include "rbev/geometry.hpp"
#include "rbev/rng.hpp"
#include "rbev/tensor.hpp"

namespace rbev {

enum class CorruptionMode { kNone, kZero, kBlur };

struct CorruptionSpec {
  CorruptionMode mode = CorruptionMode::kNone;
  std::size_t camera_index = 0;
  double blur_sigma = 0.0;
  std::uint64_t seed = 0;  // hash of the sample id for test-time corruption

  void validate() const;
};

std::string to_string(CorruptionMode m);

constexpr std::size_t kBlurKernel = 11;
constexpr double kBlurSigmaMin = 3.0;
constexpr double kBlurSigmaMax = 10.0;

// Normalized 1-D Gaussian taps, centre at index size / 2.
std::vector<double> gaussian_kernel(std::size_t size, double sigma);

// Separable Gaussian over the last two axes of [C x H x W] (or [H x W]),
// mirrored borders without repeating the edge pixel.
Tensor gaussian_blur(const Tensor& image, double sigma, std::size_t kernel_size = kBlurKernel);

// Applies `spec` to images[spec.camera_index] in place.
void apply_corruption(std::vector<Tensor>& images, const CorruptionSpec& spec);

// With probability p_m one non-dummy view is zeroed or blurred (equal odds,
// sigma uniform in [3, 10]).
CorruptionSpec mask_views_train(std::vector<Tensor>& images, const std::vector<CameraRig>& rigs,
                                double p_m, Rng& rng);

// The test-time draw for `sample_id`, without touching any image. Mode is
// kNone when fewer than two real views exist.
CorruptionSpec test_corruption(const std::vector<CameraRig>& rigs, const std::string& sample_id);
CorruptionSpec corrupt_test(std::vector<Tensor>& images, const std::vector<CameraRig>& rigs,
                            const std::string& sample_id);

}  // namespace rbev
