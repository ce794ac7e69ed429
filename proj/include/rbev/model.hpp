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

#include "rbev/autodiff.hpp"
#include "rbev/degradation.hpp"
#include "rbev/fusion_encoder.hpp"
#include "rbev/heads.hpp"
#include "rbev/scene_sim.hpp"

namespace rbev {

struct ModelConfig {
  EncoderConfig encoder;
  GatConfig gat;
  HeadConfig head;
  BevGridSpec grid = BevGridSpec::desk();
  std::size_t max_cameras = kMaxCameras;
  // Spacing of the history frames fed to temporal attention, seconds.
  double history_dt = 0.5;

  // "toy" (single-layer, 32x32 grid), "desk" or "m2i".
  static ModelConfig preset(const std::string& name);
  void validate() const;
};

// One multi-camera frame ready for the network. Rigs and images are padded
// with dummies to max_cameras.
struct Sample {
  std::string id;
  std::vector<CameraRig> rigs;
  std::vector<Tensor> images;                      // [cam] of [1 x H x W]
  std::vector<std::vector<Tensor>> history_images; // [t][cam], t = 1 is the previous frame
  std::vector<Box3D> boxes;
  GtMasks masks;  // on the model grid
  EncoderGeometry geometry;
};

std::string sample_id(const SceneConfig& cfg);
Sample make_sample(const Scene& scene, const ModelConfig& cfg);
// Re-derives geometry after rigs changed (e.g. after loading from disk).
void refresh_geometry(Sample& s, const ModelConfig& cfg);

struct ForwardResult {
  EncoderOutput encoder;
  DetectOutput detect;
  SegOutput seg;
};

struct LossResult {
  Var total;
  LossBreakdown parts;
  std::vector<std::size_t> assignment;
};

class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  // History BEVs are encoded from the history images on a gradient-free
  // tape, with `images` substituted for the current frame.
  ForwardResult forward(Tape& tape, const Sample& s, const std::vector<Tensor>& images, bool training = false,
                        Rng* rng = nullptr);
  ForwardResult forward(Tape& tape, const Sample& s, bool training = false, Rng* rng = nullptr) {
    return forward(tape, s, s.images, training, rng);
  }
  // When `assignment` is non-empty it fixes the matching.
  LossResult loss(const ForwardResult& f, const Sample& s,
                  const std::vector<std::size_t>* assignment = nullptr) const;
  std::vector<Box3D> predict(const Sample& s, const std::vector<Tensor>& images);

 private:
  std::vector<Tensor> history_bev(const Sample& s);

  ModelConfig cfg_;
  ParameterSet params_;
};

enum class Optimizer { kSgd, kAdamW };
Optimizer parse_optimizer(const std::string& s);
std::string to_string(Optimizer o);

struct TrainConfig {
  std::size_t steps = 300;
  Optimizer optimizer = Optimizer::kAdamW;
  double lr = 2e-4;
  double weight_decay = 1e-2;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  bool cosine = false;
  double p_mask = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

class OptimizerState {
 public:
  OptimizerState(const ParameterSet& ps, const TrainConfig& cfg);
  // Applies one update from the accumulated gradients at learning rate `lr`.
  void step(ParameterSet& ps, double lr);

 private:
  TrainConfig cfg_;
  std::vector<Tensor> m_, v_;
  std::size_t t_ = 0;
};

double learning_rate(const TrainConfig& cfg, std::size_t step);

// Cycles through `samples`; masking and dropout draw from substreams of
// cfg.seed. Returns the loss breakdown before each update. Throws
// NumericError naming the step when the loss or a gradient is not finite.
std::vector<LossBreakdown> train(Model& model, const std::vector<Sample>& samples, const TrainConfig& cfg);

}  // namespace rbev
