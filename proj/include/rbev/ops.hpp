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

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "rbev/autodiff.hpp"

// Differentiable tensor operations recorded on a Tape. Shapes are strict:
// the only implicit broadcast is a row vector over a leading batch dimension
// (add_row / mul_row).
namespace rbev {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);

// [N x K] + [K]
Var add_row(Var a, Var row);
// [N x K] * [K]
Var mul_row(Var a, Var row);
// [N x K] * [N], each row scaled by its own weight.
Var mul_col(Var a, Var col);

Var relu(Var a);
Var elu(Var a, double alpha = 1.0);
Var leaky_relu(Var a, double slope = 0.2);
Var sigmoid(Var a);
Var exp(Var a);
Var log(Var a);
Var abs(Var a);

// [N x K] x [K x M] -> [N x M]
Var matmul(Var a, Var b);
// x [N x K], w [K x M], b [M]
Var linear(Var x, Var w, Var b);
Var transpose(Var a);
Var reshape(Var a, Shape shape);

Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_cols(Var a, std::size_t start, std::size_t count);

Var gather_rows(Var a, std::span<const std::uint32_t> index);
// `sorted_sum` adds each output row's terms in ascending order, making the
// result independent of the order of the input rows.
Var scatter_add_rows(Var a, std::span<const std::uint32_t> index, std::size_t rows, bool sorted_sum = false);

Var sum(Var a);
Var mean(Var a);
// [N x K] -> [N]
Var mean_last(Var a);

// Result of a masked softmax: slices whose mask is entirely false produce
// all-zero output and are flagged.
struct MaskedSoftmax {
  Tensor out;
  std::vector<char> empty_slice;
};

// Pure (non-recorded) masked softmax along `axis`; max-subtracted. With
// `sorted_sum` the normalizer adds the exponentials in ascending order, so
// permuting the slice permutes the output bit for bit.
MaskedSoftmax softmax_masked(const Tensor& logits, const Mask& mask, std::size_t axis,
                             bool sorted_sum = false);

// Recorded masked softmax along the last axis of a rank-2 tensor.
Var softmax_masked(Var logits, const Mask& mask, std::vector<char>* empty_rows = nullptr,
                   bool sorted_sum = false);
Var softmax_rows(Var logits);

// Softmax over rows sharing a segment id, independently per column.
// scores [E x H], segment[e] in [0, segments).
Var segment_softmax(Var scores, std::span<const std::uint32_t> segment, std::size_t segments,
                    bool sorted_sum = false);

// z [E x D], a [D] -> [E x H]: per-head dot product over contiguous D/H blocks.
Var grouped_dot(Var z, Var a, std::size_t heads);
// x [E x D], w [E x H] -> [E x D]: each head block scaled by its weight.
Var head_scale(Var x, Var w);

// Per-row dot products against a block of `group` rows.
// q [N x D], k [N*group x D] -> [N x group]
Var group_dot(Var q, Var k, std::size_t group);
// w [N x group], v [N*group x D] -> [N x D]
Var group_weighted_sum(Var w, Var v);

// Normalizes each row of x [N x K].
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
// x [C x H x W]; gamma, beta [C].
Var group_norm(Var x, std::size_t groups, Var gamma, Var beta, double eps = 1e-5);

enum class Padding { kZero, kReplicate };

// x [Cin x H x W], w [Cout x Cin x k x k] with k in {1, 3}, b [Cout]; stride 1,
// "same" output size.
Var conv2d(Var x, Var w, Var b, Padding padding = Padding::kZero);

// image [C x H x W] -> [(H/p)*(W/p) x C*p*p], patches in row-major order.
Var patchify(Var image, std::size_t patch);

// feat [C x H x W], points [P x 2] holding (x, y) in feature-cell units where
// integer coordinates are cell centres. Zero outside the map. -> [P x C]
Var bilinear_sample(Var feat, Var points);

Var dropout(Var a, double rate, std::mt19937_64& rng);

// Mean softmax cross-entropy over rows. labels[i] in [0, K).
Var softmax_cross_entropy(Var logits, std::span<const std::uint32_t> labels);

// Summed multi-class softmax focal loss. Rows labelled `background` use
// weight 1 - alpha, all others alpha.
Var softmax_focal(Var logits, std::span<const std::uint32_t> labels, double gamma, double alpha,
                  std::uint32_t background);

// Bilinear interpolation weights for one sample location. Corners outside
// [0,W) x [0,H) carry weight but must be skipped by the caller.
struct BilinearTap {
  int x0, y0;
  double wx1, wy1;  // fractional parts
};
inline BilinearTap bilinear_tap(double x, double y) {
  const double fx = std::floor(x);
  const double fy = std::floor(y);
  return {static_cast<int>(fx), static_cast<int>(fy), x - fx, y - fy};
}

// Samples channel-major map data [C x H x W] at (x, y); writes C values.
void bilinear_read(std::span<const double> feat, std::size_t channels, std::size_t height,
                   std::size_t width, double x, double y, std::span<double> out);

}  // namespace rbev
