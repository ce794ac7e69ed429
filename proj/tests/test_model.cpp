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

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "rbev/model.hpp"

using namespace rbev;

namespace {

ModelConfig toy() { return ModelConfig::preset("toy"); }

SceneConfig small_scene(const ModelConfig& mc, std::uint64_t seed, std::size_t cams = 2) {
  SceneConfig sc;
  sc.num_cameras = cams;
  sc.num_agents = 6;
  sc.aim_cameras = true;
  sc.image_width = 64;
  sc.image_height = 48;
  sc.focal = 64;
  sc.grid = mc.grid;
  sc.seed = seed;
  return sc;
}

Sample small_sample(const ModelConfig& mc, std::uint64_t seed, std::size_t cams = 2) {
  return make_sample(generate_scene(small_scene(mc, seed, cams)), mc);
}

}  // namespace

TEST(ModelConfig, PresetsValidate) {
  for (const char* n : {"toy", "desk", "m2i"}) EXPECT_NO_THROW(ModelConfig::preset(n));
  EXPECT_THROW(ModelConfig::preset("huge"), ConfigError);
  ModelConfig c = toy();
  c.max_cameras = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Sample, IdFormat) {
  SceneConfig sc;
  sc.layout = Layout::kTJunction;
  sc.num_cameras = 3;
  sc.traffic = Traffic::kHigh;
  sc.seed = 42;
  EXPECT_EQ(sample_id(sc), "scene_T-junction_3cam_high_42");
}

TEST(Sample, PaddedToMaxCameras) {
  const ModelConfig mc = toy();
  const Sample s = small_sample(mc, 3);
  ASSERT_EQ(s.rigs.size(), mc.max_cameras);
  ASSERT_EQ(s.images.size(), mc.max_cameras);
  EXPECT_FALSE(s.rigs[1].is_dummy);
  for (std::size_t n = 2; n < s.rigs.size(); ++n) {
    EXPECT_TRUE(s.rigs[n].is_dummy);
    for (double v : s.images[n].data()) EXPECT_EQ(v, 0.0);
  }
  EXPECT_EQ(s.history_images.size(), mc.encoder.temporal_frames);
  EXPECT_EQ(s.masks.map.size(), mc.grid.num_cells());
  for (const Box3D& b : s.boxes) EXPECT_TRUE(inside_range(b, mc.grid));
}

TEST(Sample, TooManyCamerasRejected) {
  ModelConfig mc = toy();
  mc.max_cameras = 1;
  EXPECT_THROW(make_sample(generate_scene(small_scene(mc, 1, 2)), mc), ConfigError);
}

TEST(Model, InitDependsOnlyOnSeed) {
  Model a(toy(), 5), b(toy(), 5), c(toy(), 6);
  ASSERT_EQ(a.params().size(), b.params().size());
  bool differs = false;
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    EXPECT_EQ(a.params()[i].tensor.data()[0], b.params()[i].tensor.data()[0]);
    const auto x = a.params()[i].tensor.data(), y = c.params()[i].tensor.data();
    for (std::size_t k = 0; k < x.size(); ++k) differs |= x[k] != y[k];
  }
  EXPECT_TRUE(differs);
}

TEST(Model, ForwardShapes) {
  const ModelConfig mc = toy();
  Model m(mc, 1);
  const Sample s = small_sample(mc, 2);
  Tape tape(Tape::Mode::kNoGrad);
  const ForwardResult f = m.forward(tape, s);
  EXPECT_EQ(f.encoder.bev.value().dim(0), mc.grid.num_cells());
  EXPECT_EQ(f.encoder.bev.value().dim(1), mc.encoder.channels);
  EXPECT_EQ(f.detect.logits.value().dim(0), mc.head.num_queries);
  EXPECT_EQ(f.seg.map_logits.value().dim(0), kMapClasses);
  EXPECT_EQ(m.predict(s, s.images).size(), mc.head.num_queries);
  const std::vector<Tensor> few(s.images.begin(), s.images.begin() + 2);
  EXPECT_THROW(m.forward(tape, s, few), DimensionError);
}

TEST(Model, LossMatchesBreakdown) {
  const ModelConfig mc = toy();
  Model m(mc, 1);
  const Sample s = small_sample(mc, 2);
  Tape tape;
  const LossResult l = m.loss(m.forward(tape, s), s);
  EXPECT_DOUBLE_EQ(l.total.value().item(), l.parts.total);
  EXPECT_NO_THROW(check_breakdown(l.parts, mc.head));
  EXPECT_EQ(l.assignment.size(), s.boxes.size());
  // A fixed assignment reproduces the same loss.
  Tape tape2;
  const LossResult l2 = m.loss(m.forward(tape2, s), s, &l.assignment);
  EXPECT_EQ(l2.parts.total, l.parts.total);
}

TEST(Optimizer, Parse) {
  EXPECT_EQ(parse_optimizer("sgd"), Optimizer::kSgd);
  EXPECT_EQ(parse_optimizer("adamw"), Optimizer::kAdamW);
  EXPECT_THROW(parse_optimizer("adam"), ConfigError);
  EXPECT_EQ(to_string(Optimizer::kAdamW), "adamw");
}

TEST(Optimizer, SgdStep) {
  ParameterSet ps;
  ps.add("w", Tensor(Shape{2}, 1.0));
  ps.add("frozen", Tensor(Shape{1}, 3.0), false);
  ps.zero_grad();
  ps.get("w").grad.data()[0] = 0.5;
  ps.get("w").grad.data()[1] = -2.0;
  TrainConfig tc;
  tc.optimizer = Optimizer::kSgd;
  OptimizerState opt(ps, tc);
  opt.step(ps, 0.1);
  EXPECT_DOUBLE_EQ(ps.get("w").tensor.data()[0], 1.0 - 0.05);
  EXPECT_DOUBLE_EQ(ps.get("w").tensor.data()[1], 1.0 + 0.2);
  EXPECT_EQ(ps.get("frozen").tensor.data()[0], 3.0);
}

TEST(Optimizer, AdamWTwoStepsByHand) {
  ParameterSet ps;
  ps.add("w", Tensor(Shape{1}, 2.0));
  ps.zero_grad();
  TrainConfig tc;
  tc.weight_decay = 0.1;
  OptimizerState opt(ps, tc);
  const double lr = 0.01, g1 = 0.3, g2 = -0.7;
  double w = 2.0, m = 0.0, v = 0.0;
  int t = 0;
  for (double g : {g1, g2}) {
    ps.get("w").grad.data()[0] = g;
    opt.step(ps, lr);
    ++t;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
    w -= lr * (mh / (std::sqrt(vh) + 1e-8) + 0.1 * w);
    EXPECT_NEAR(ps.get("w").tensor.data()[0], w, 1e-15);
  }
}

TEST(Optimizer, CosineSchedule) {
  TrainConfig tc;
  tc.steps = 11;
  tc.lr = 1.0;
  EXPECT_EQ(learning_rate(tc, 5), 1.0);
  tc.cosine = true;
  EXPECT_DOUBLE_EQ(learning_rate(tc, 0), 1.0);
  EXPECT_NEAR(learning_rate(tc, 5), 0.5, 1e-15);
  EXPECT_NEAR(learning_rate(tc, 10), 0.0, 1e-15);
}

TEST(Train, RejectsBadConfig) {
  Model m(toy(), 1);
  TrainConfig tc;
  EXPECT_THROW(train(m, {}, tc), ConfigError);
  tc.p_mask = 1.5;
  EXPECT_THROW(tc.validate(), ConfigError);
  tc.p_mask = 0.25;
  tc.steps = 0;
  EXPECT_THROW(tc.validate(), ConfigError);
}

TEST(Train, SeededRunsAreBitIdentical) {
  const ModelConfig mc = toy();
  const std::vector<Sample> ss{small_sample(mc, 7)};
  TrainConfig tc;
  tc.steps = 4;
  tc.p_mask = 0.5;
  tc.seed = 9;
  Model a(mc, 3), b(mc, 3);
  const auto ca = train(a, ss, tc), cb = train(b, ss, tc);
  ASSERT_EQ(ca.size(), 4u);
  for (std::size_t i = 0; i < ca.size(); ++i) EXPECT_EQ(ca[i].total, cb[i].total);
  for (std::size_t i = 0; i < a.params().size(); ++i)
    EXPECT_EQ(a.params()[i].tensor.data()[0], b.params()[i].tensor.data()[0]);
}

TEST(Train, LossDecreasesOnFixedScene) {
  const ModelConfig mc = toy();
  const std::vector<Sample> ss{small_sample(mc, 11)};
  TrainConfig tc;
  tc.steps = 40;
  tc.lr = 1e-3;
  Model m(mc, 1);
  const auto c = train(m, ss, tc);
  EXPECT_LT(c.back().total, 0.8 * c.front().total);
}

TEST(Train, NonFiniteParameterNamesStep) {
  const ModelConfig mc = toy();
  const std::vector<Sample> ss{small_sample(mc, 1)};
  Model m(mc, 1);
  m.params().get("det.cls.b").tensor.data()[0] = std::numeric_limits<double>::quiet_NaN();
  TrainConfig tc;
  tc.steps = 2;
  try {
    train(m, ss, tc);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("train step 0"), std::string::npos);
  }
}
