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

#include "rbev/model.hpp"

#include <cmath>
#include <numbers>

#include "rbev/ops.hpp"

namespace rbev {
namespace {

BevGridSpec toy_grid() {
  BevGridSpec g;
  g.rows = 32;
  g.cols = 32;
  g.anchor_heights = spaced_anchor_heights(4);
  return g;
}

void check_finite(const Tensor& t, const std::string& what) {
  if (!t.all_finite()) throw NumericError(what + " is not finite");
}

}  // namespace

ModelConfig ModelConfig::preset(const std::string& name) {
  ModelConfig c;
  if (name == "toy") {
    c.grid = toy_grid();
    c.encoder.layers = 1;
    c.encoder.channels = 16;
    c.encoder.temporal_frames = 1;
    c.encoder.ffn_hidden = 32;
    c.encoder.points_per_ref = 2;
    c.encoder.dropout = 0.0;
    c.gat.layers = 1;
    c.gat.heads = 2;
    c.gat.hidden = 16;
    c.gat.dropout = 0.0;
    c.head.num_queries = 50;
    c.head.ffn_hidden = 32;
    c.head.seg_blocks = 1;
  } else if (name == "desk") {
    c.grid = BevGridSpec::desk();
    c.encoder.layers = 3;
    c.head.num_queries = 200;
    c.head.seg_blocks = 2;
  } else if (name == "m2i") {
    c.grid = BevGridSpec::m2i();
    c.encoder.channels = 64;
    c.encoder.ffn_hidden = 128;
    c.head.ffn_hidden = 128;
  } else {
    throw ConfigError("unknown model preset '" + name + "' (expected toy, desk or m2i)");
  }
  c.validate();
  return c;
}

void ModelConfig::validate() const {
  encoder.validate();
  gat.validate();
  head.validate(encoder.channels);
  grid.validate();
  if (max_cameras == 0) throw ConfigError("model: max_cameras must be positive");
  if (!(history_dt > 0.0)) throw ConfigError("model: history_dt must be positive");
}

std::string sample_id(const SceneConfig& cfg) {
  return "scene_" + to_string(cfg.layout) + "_" + std::to_string(cfg.num_cameras) + "cam_" + to_string(cfg.traffic) +
         "_" + std::to_string(cfg.seed);
}

void refresh_geometry(Sample& s, const ModelConfig& cfg) { s.geometry = prepare_geometry(cfg.grid, s.rigs); }

Sample make_sample(const Scene& scene, const ModelConfig& cfg) {
  cfg.validate();
  if (scene.rigs.size() > cfg.max_cameras) {
    throw ConfigError("make_sample: " + std::to_string(scene.rigs.size()) + " cameras exceed the model maximum " +
                      std::to_string(cfg.max_cameras));
  }
  Sample s;
  s.id = sample_id(scene.config);
  s.rigs = pad_rigs(scene.rigs, cfg.max_cameras, scene.config.image_width, scene.config.image_height);
  for (const CameraRig& r : s.rigs) s.images.push_back(render_view(scene.config.layout, scene.agents, r));
  for (std::size_t t = 1; t <= cfg.encoder.temporal_frames; ++t) {
    const std::vector<Agent> past = advance(scene.agents, -cfg.history_dt * static_cast<double>(t));
    std::vector<Tensor> frame;
    for (const CameraRig& r : s.rigs) frame.push_back(render_view(scene.config.layout, past, r));
    s.history_images.push_back(std::move(frame));
  }
  std::vector<Agent> kept;
  for (const Agent& a : scene.agents)
    if (inside_range(a.box, cfg.grid)) kept.push_back(a);
  s.boxes = gt_boxes(kept);
  s.masks = rasterize_gt(scene.config.layout, kept, cfg.grid);
  refresh_geometry(s, cfg);
  return s;
}

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng = substream(seed, "init");
  add_backbone_params(params_, cfg_.encoder.channels, rng);
  add_encoder_params(params_, cfg_.encoder, cfg_.gat, cfg_.grid, rng);
  add_head_params(params_, cfg_.head, cfg_.encoder.channels, rng);
}

std::vector<Tensor> Model::history_bev(const Sample& s) {
  std::vector<Tensor> out;
  const std::size_t t_max = std::min(cfg_.encoder.temporal_frames, s.history_images.size());
  for (std::size_t t = 0; t < t_max; ++t) {
    Tape tape(Tape::Mode::kNoGrad);
    std::vector<Var> feats;
    for (const Tensor& img : s.history_images[t]) feats.push_back(toy_backbone(tape, params_, tape.constant(img)));
    out.push_back(encode(tape, params_, cfg_.encoder, cfg_.gat, s.geometry, feats, {}).bev.value());
  }
  return out;
}

ForwardResult Model::forward(Tape& tape, const Sample& s, const std::vector<Tensor>& images, bool training,
                             Rng* rng) {
  if (images.size() != s.rigs.size()) {
    throw DimensionError("forward: " + std::to_string(images.size()) + " images for " +
                         std::to_string(s.rigs.size()) + " cameras");
  }
  const std::vector<Tensor> history = history_bev(s);
  std::vector<Var> feats;
  for (const Tensor& img : images) feats.push_back(toy_backbone(tape, params_, tape.constant(img)));
  ForwardResult f;
  f.encoder = encode(tape, params_, cfg_.encoder, cfg_.gat, s.geometry, feats, history, training, rng);
  f.detect = detect_forward(tape, params_, cfg_.head, f.encoder.bev, cfg_.grid);
  f.seg = seg_decode(tape, params_, cfg_.head, f.encoder.bev, cfg_.grid);
  return f;
}

LossResult Model::loss(const ForwardResult& f, const Sample& s, const std::vector<std::size_t>* assignment) const {
  DetectionLoss det = detection_loss(f.detect, s.boxes, cfg_.head, cfg_.grid,
                                     assignment != nullptr && !assignment->empty() ? assignment : nullptr);
  Var seg_map = segmentation_loss(f.seg.map_logits, s.masks.map);
  Var seg_obj = segmentation_loss(f.seg.object_logits, s.masks.object);
  LossResult r;
  r.total = total_loss(det.cls, det.reg, seg_map, seg_obj, cfg_.head);
  r.parts = total_loss(det.cls.value().item(), det.reg.value().item(), seg_map.value().item(),
                       seg_obj.value().item(), cfg_.head);
  r.assignment = std::move(det.assignment);
  return r;
}

std::vector<Box3D> Model::predict(const Sample& s, const std::vector<Tensor>& images) {
  Tape tape(Tape::Mode::kNoGrad);
  const ForwardResult f = forward(tape, s, images);
  return decode_detections(f.detect, cfg_.head, cfg_.grid);
}

Optimizer parse_optimizer(const std::string& s) {
  if (s == "sgd") return Optimizer::kSgd;
  if (s == "adamw") return Optimizer::kAdamW;
  throw ConfigError("unknown optimizer '" + s + "' (expected sgd or adamw)");
}

std::string to_string(Optimizer o) { return o == Optimizer::kSgd ? "sgd" : "adamw"; }

void TrainConfig::validate() const {
  if (steps == 0) throw ConfigError("train: steps must be positive");
  if (!(lr > 0.0)) throw ConfigError("train: lr must be positive");
  if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be >= 0");
  if (!(p_mask >= 0.0 && p_mask <= 1.0)) throw ConfigError("train: p_mask must be in [0, 1]");
}

OptimizerState::OptimizerState(const ParameterSet& ps, const TrainConfig& cfg) : cfg_(cfg) {
  for (const Parameter& p : ps) {
    m_.emplace_back(p.tensor.shape());
    v_.emplace_back(p.tensor.shape());
  }
}

void OptimizerState::step(ParameterSet& ps, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  std::size_t i = 0;
  for (Parameter& p : ps) {
    auto w = p.tensor.data();
    const auto g = p.grad.data();
    if (!p.learnable || g.size() != w.size()) {
      ++i;
      continue;
    }
    if (cfg_.optimizer == Optimizer::kSgd) {
      for (std::size_t k = 0; k < w.size(); ++k) w[k] -= lr * g[k];
    } else {
      auto m = m_[i].data();
      auto v = v_[i].data();
      for (std::size_t k = 0; k < w.size(); ++k) {
        m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
        v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
        const double mh = m[k] / bc1, vh = v[k] / bc2;
        w[k] -= lr * (mh / (std::sqrt(vh) + cfg_.adam_eps) + cfg_.weight_decay * w[k]);
      }
    }
    ++i;
  }
}

double learning_rate(const TrainConfig& cfg, std::size_t step) {
  if (!cfg.cosine || cfg.steps <= 1) return cfg.lr;
  const double x = static_cast<double>(step) / static_cast<double>(cfg.steps - 1);
  return 0.5 * cfg.lr * (1.0 + std::cos(std::numbers::pi * x));
}

std::vector<LossBreakdown> train(Model& model, const std::vector<Sample>& samples, const TrainConfig& cfg) {
  cfg.validate();
  if (samples.empty()) throw ConfigError("train: no samples");
  Rng mask_rng = substream(cfg.seed, "masking");
  Rng drop_rng = substream(cfg.seed, "dropout");
  OptimizerState opt(model.params(), cfg);
  std::vector<LossBreakdown> curve;
  curve.reserve(cfg.steps);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const Sample& s = samples[step % samples.size()];
    std::vector<Tensor> images = s.images;
    if (cfg.p_mask > 0.0) mask_views_train(images, s.rigs, cfg.p_mask, mask_rng);
    model.params().zero_grad();
    const std::string where = "train step " + std::to_string(step);
    Tape tape;
    LossBreakdown parts;
    try {
      const ForwardResult f = model.forward(tape, s, images, true, &drop_rng);
      const LossResult l = model.loss(f, s);
      parts = l.parts;
      if (!std::isfinite(parts.total)) throw NumericError("total loss is not finite");
      tape.backward(l.total);
    } catch (const NumericError& e) {
      throw NumericError(where + ": " + e.what());
    }
    for (const Parameter& p : model.params()) check_finite(p.grad, where + ": gradient of " + p.name);
    curve.push_back(parts);
    opt.step(model.params(), learning_rate(cfg, step));
  }
  return curve;
}

}  // namespace rbev
