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

#include "rbev/degradation.hpp"

#include <cmath>

namespace rbev {
namespace {

// Mirror index into [0, n) without repeating the edge sample.
std::size_t mirror(long i, long n) {
  if (n == 1) return 0;
  const long period = 2 * (n - 1);
  long m = i % period;
  if (m < 0) m += period;
  return static_cast<std::size_t>(m < n ? m : period - m);
}

std::vector<std::size_t> real_views(const std::vector<CameraRig>& rigs) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < rigs.size(); ++i)
    if (!rigs[i].is_dummy) out.push_back(i);
  return out;
}

CorruptionSpec draw(const std::vector<std::size_t>& real, Rng& rng) {
  CorruptionSpec s;
  s.camera_index = real[uniform_index(rng, real.size())];
  if (bernoulli(rng, 0.5)) {
    s.mode = CorruptionMode::kZero;
  } else {
    s.mode = CorruptionMode::kBlur;
    s.blur_sigma = uniform(rng, kBlurSigmaMin, kBlurSigmaMax);
  }
  return s;
}

}  // namespace

void CorruptionSpec::validate() const {
  if (mode == CorruptionMode::kBlur && !(blur_sigma >= kBlurSigmaMin && blur_sigma <= kBlurSigmaMax)) {
    throw ConfigError("corruption: blur sigma " + std::to_string(blur_sigma) + " outside [3, 10]");
  }
}

std::string to_string(CorruptionMode m) {
  switch (m) {
    case CorruptionMode::kNone: return "none";
    case CorruptionMode::kZero: return "zero";
    case CorruptionMode::kBlur: return "blur";
  }
  return "none";
}

std::vector<double> gaussian_kernel(std::size_t size, double sigma) {
  if (size == 0 || size % 2 == 0) throw ConfigError("gaussian_kernel: size must be odd");
  if (!(sigma > 0.0)) throw ConfigError("gaussian_kernel: sigma must be positive");
  const long r = static_cast<long>(size / 2);
  std::vector<double> k(size);
  double s = 0.0;
  for (long i = -r; i <= r; ++i) {
    const double v = std::exp(-static_cast<double>(i * i) / (2.0 * sigma * sigma));
    k[static_cast<std::size_t>(i + r)] = v;
    s += v;
  }
  for (double& v : k) v /= s;
  return k;
}

Tensor gaussian_blur(const Tensor& image, double sigma, std::size_t kernel_size) {
  if (image.rank() != 2 && image.rank() != 3) {
    throw DimensionError("gaussian_blur: expected [H x W] or [C x H x W], got " + shape_str(image.shape()));
  }
  const std::vector<double> k = gaussian_kernel(kernel_size, sigma);
  const long r = static_cast<long>(kernel_size / 2);
  const std::size_t c = image.rank() == 3 ? image.dim(0) : 1;
  const std::size_t h = image.dim(image.rank() - 2), w = image.dim(image.rank() - 1);
  Tensor tmp(image.shape()), out(image.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* src = image.data().data() + ch * h * w;
    double* mid = tmp.data().data() + ch * h * w;
    double* dst = out.data().data() + ch * h * w;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (long t = -r; t <= r; ++t)
          acc += k[static_cast<std::size_t>(t + r)] * src[y * w + mirror(static_cast<long>(x) + t, static_cast<long>(w))];
        mid[y * w + x] = acc;
      }
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (long t = -r; t <= r; ++t)
          acc += k[static_cast<std::size_t>(t + r)] * mid[mirror(static_cast<long>(y) + t, static_cast<long>(h)) * w + x];
        dst[y * w + x] = acc;
      }
  }
  return out;
}

void apply_corruption(std::vector<Tensor>& images, const CorruptionSpec& spec) {
  if (spec.mode == CorruptionMode::kNone) return;
  spec.validate();
  if (spec.camera_index >= images.size()) {
    throw DimensionError("apply_corruption: camera " + std::to_string(spec.camera_index) + " of " +
                         std::to_string(images.size()));
  }
  Tensor& img = images[spec.camera_index];
  if (spec.mode == CorruptionMode::kZero) {
    img.fill(0.0);
  } else {
    img = gaussian_blur(img, spec.blur_sigma);
  }
}

CorruptionSpec mask_views_train(std::vector<Tensor>& images, const std::vector<CameraRig>& rigs,
                                double p_m, Rng& rng) {
  if (!(p_m >= 0.0 && p_m <= 1.0)) throw ConfigError("mask_views_train: p_m must be in [0, 1]");
  if (images.size() != rigs.size()) throw DimensionError("mask_views_train: images and rigs differ in count");
  const std::vector<std::size_t> real = real_views(rigs);
  if (real.empty() || !bernoulli(rng, p_m)) return {};
  CorruptionSpec s = draw(real, rng);
  apply_corruption(images, s);
  return s;
}

CorruptionSpec test_corruption(const std::vector<CameraRig>& rigs, const std::string& sample_id) {
  const std::uint64_t seed = fnv1a64(sample_id);
  const std::vector<std::size_t> real = real_views(rigs);
  CorruptionSpec s;
  if (real.size() >= 2) {
    Rng rng(seed);
    s = draw(real, rng);
  }
  s.seed = seed;
  return s;
}

CorruptionSpec corrupt_test(std::vector<Tensor>& images, const std::vector<CameraRig>& rigs,
                            const std::string& sample_id) {
  if (images.size() != rigs.size()) throw DimensionError("corrupt_test: images and rigs differ in count");
  CorruptionSpec s = test_corruption(rigs, sample_id);
  apply_corruption(images, s);
  return s;
}

}  // namespace rbev
