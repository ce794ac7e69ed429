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
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>

#include "json.hpp"
#include "rbev/metrics.hpp"
#include "rbev/pipeline.hpp"
#include "rbev/serialize.hpp"

using namespace rbev;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = -1;
  std::string out;
};

CliRun run(const std::string& args) {
  const char* bin = std::getenv("RBEV_CLI");
  EXPECT_NE(bin, nullptr) << "RBEV_CLI not set";
  CliRun r;
  FILE* p = popen((std::string(bin ? bin : "rbev") + " " + args + " 2>&1").c_str(), "r");
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path scratch(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("rbev_cli_" + std::to_string(getpid())) / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string small_scenario(const fs::path& dir, std::uint64_t seed = 5) {
  SceneConfig sc = toy_scenario(seed);
  sc.num_agents = 0;
  sc.traffic = Traffic::kLow;
  const std::string path = (dir / "scenario.json").string();
  write_text(path, scenario_to_json(sc));
  return path;
}

}  // namespace

TEST(Cli, HelpListsAllCommands) {
  const CliRun r = run("--help");
  EXPECT_EQ(r.code, 0);
  for (const char* c : {"simulate", "encode", "evaluate", "gradcheck", "train-toy", "weights-dump"})
    EXPECT_NE(r.out.find(c), std::string::npos) << c;
}

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run("simulate --no-such-flag").code, 2);
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("encode --bundle x --out y --corrupt sometimes").code, 2);
}

TEST(Cli, MissingFileNamesPath) {
  const fs::path d = scratch("missing");
  const CliRun r = run("simulate --config /nonexistent/scene.json --out " + (d / "b").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("/nonexistent/scene.json"), std::string::npos);
  EXPECT_EQ(run("evaluate --detections /nonexistent/d.json --gt /nonexistent/g.json").code, 2);
}

TEST(Cli, SimulateIsByteIdentical) {
  const fs::path d = scratch("ident");
  const std::string sc = small_scenario(d);
  ASSERT_EQ(run("simulate --config " + sc + " --out " + (d / "a").string()).code, 0);
  ASSERT_EQ(run("simulate --config " + sc + " --out " + (d / "b").string()).code, 0);
  std::size_t compared = 0;
  for (const auto& e : fs::directory_iterator(d / "a")) {
    const std::string name = e.path().filename().string();
    if (name == "meta.json") continue;
    EXPECT_EQ(read_text(e.path().string()), read_text((d / "b" / name).string())) << name;
    ++compared;
  }
  EXPECT_GE(compared, 9u);
  // A different seed changes the scene.
  ASSERT_EQ(run("simulate --config " + sc + " --seed 6 --out " + (d / "c").string()).code, 0);
  EXPECT_NE(read_text((d / "a" / "cam0.pgm").string()), read_text((d / "c" / "cam0.pgm").string()));
}

TEST(Bundle, ReloadRoundTrips) {
  const fs::path d = scratch("reload");
  const Scene scene = generate_scene(toy_scenario(3));
  write_bundle((d / "b").string(), scene);
  const ModelConfig mc = ModelConfig::preset("toy");
  const Sample direct = make_sample(scene, mc);
  const Sample loaded = load_bundle((d / "b").string(), mc);
  EXPECT_EQ(loaded.id, direct.id);
  ASSERT_EQ(loaded.images.size(), direct.images.size());
  for (std::size_t n = 0; n < direct.images.size(); ++n) {
    const Tensor q = quantize_image(direct.images[n]);
    ASSERT_EQ(loaded.images[n].shape(), q.shape());
    for (std::size_t i = 0; i < q.size(); ++i) ASSERT_EQ(loaded.images[n][i], q[i]);
    EXPECT_EQ(loaded.rigs[n].is_dummy, direct.rigs[n].is_dummy);
  }
  ASSERT_EQ(loaded.boxes.size(), direct.boxes.size());
  for (std::size_t i = 0; i < direct.boxes.size(); ++i) {
    EXPECT_EQ(loaded.boxes[i].x, direct.boxes[i].x);
    EXPECT_EQ(loaded.boxes[i].yaw, direct.boxes[i].yaw);
    EXPECT_EQ(loaded.boxes[i].label, direct.boxes[i].label);
  }
  EXPECT_EQ(loaded.masks.map, direct.masks.map);
  EXPECT_EQ(loaded.masks.object, direct.masks.object);
  for (std::size_t n = 0; n < direct.rigs.size(); ++n)
    for (std::size_t k = 0; k < 16; ++k) EXPECT_EQ(loaded.rigs[n].extrinsics[k], direct.rigs[n].extrinsics[k]);
  ModelConfig other = mc;
  other.grid.rows = 16;
  EXPECT_THROW(load_bundle((d / "b").string(), other), ConfigError);
}

TEST(Bundle, PgmRoundTrip) {
  const fs::path d = scratch("pgm");
  const std::vector<std::uint16_t> px{0, 1, 2, 3, 4, 5};
  std::size_t w, h;
  std::uint16_t mv;
  write_pgm((d / "a.pgm").string(), px, 3, 2, 6);
  EXPECT_EQ(read_pgm((d / "a.pgm").string(), w, h, mv), px);
  EXPECT_EQ(w, 3u);
  EXPECT_EQ(h, 2u);
  EXPECT_EQ(mv, 6);
  const std::vector<std::uint16_t> wide{0, 300, 65535};
  write_pgm((d / "b.pgm").string(), wide, 3, 1, 65535);
  EXPECT_EQ(read_pgm((d / "b.pgm").string(), w, h, mv), wide);
  EXPECT_EQ(fs::file_size(d / "b.pgm"), std::string("P5\n3 1\n65535\n").size() + 6);
  EXPECT_THROW(write_pgm((d / "c.pgm").string(), {7}, 1, 1, 6), ConfigError);
  write_text((d / "bad.pgm").string(), "P2\n1 1\n255\n0\n");
  EXPECT_THROW(read_pgm((d / "bad.pgm").string(), w, h, mv), ConfigError);
}

TEST(Cli, SimulateEncodeEvaluate) {
  const fs::path d = scratch("pipeline");
  const std::string sc = small_scenario(d);
  const std::string b = (d / "bundle").string(), e = (d / "enc").string(), r = (d / "rep").string();
  ASSERT_EQ(run("simulate --config " + sc + " --out " + b).code, 0);
  const CliRun enc = run("encode --bundle " + b + " --corrupt auto --out " + e);
  ASSERT_EQ(enc.code, 0) << enc.out;
  for (const char* f : {"bev.tensor", "fusion.tensor", "detections.json", "corruption.json", "meta.json"})
    EXPECT_TRUE(fs::exists(fs::path(e) / f)) << f;
  const CliRun ev = run("evaluate --detections " + e + "/detections.json --gt " + b + "/gt.json --out " + r);
  ASSERT_EQ(ev.code, 0) << ev.out;
  EXPECT_EQ(ev.out.rfind("class,AP@0.5,AP@1,AP@2,AP@4,mAP,mATE,mASE,mAOE,mAVE,mAAE,NDS\n", 0), 0u);

  // Schema: every aggregate present, in range, and NDS recomposes.
  const nlohmann::json j = nlohmann::json::parse(read_text(r + "/metrics.json"));
  MetricReport rep;
  rep.map = j.at("mAP").get<double>();
  rep.mate = j.at("mATE").get<double>();
  rep.mase = j.at("mASE").get<double>();
  rep.maoe = j.at("mAOE").get<double>();
  rep.mave = j.at("mAVE").get<double>();
  rep.maae = j.at("mAAE").get<double>();
  rep.nds = j.at("NDS").get<double>();
  EXPECT_NO_THROW(check_report(rep));
  ASSERT_TRUE(j.at("classes").is_array());
  for (const auto& c : j.at("classes")) EXPECT_EQ(c.at("ap").size(), 4u);

  // Encoding is reproducible byte for byte.
  ASSERT_EQ(run("encode --bundle " + b + " --corrupt auto --out " + e + "2").code, 0);
  for (const char* f : {"bev.tensor", "fusion.tensor", "detections.json", "corruption.json"})
    EXPECT_EQ(read_text(e + "/" + f), read_text(e + "2/" + f)) << f;

  // 8-bit heatmaps de-quantize to the last layer's weights within half a step.
  ASSERT_EQ(run("encode --bundle " + b + " --out " + e + "3").code, 0);
  const Tensor fusion = load_tensor(e + "3/fusion.tensor");
  const std::size_t layers = fusion.dim(0), cells = fusion.dim(1), cams = fusion.dim(2);
  const CliRun wd = run("weights-dump --bundle " + b + " --out " + (d / "w").string());
  ASSERT_EQ(wd.code, 0) << wd.out;
  const nlohmann::json side = nlohmann::json::parse(read_text((d / "w" / "fusion.json").string()));
  ASSERT_EQ(side.at("cameras").size(), 2u);
  for (const auto& c : side.at("cameras")) {
    const std::size_t cam = c.at("index").get<std::size_t>();
    const double lo = c.at("min").get<double>(), hi = c.at("max").get<double>();
    std::size_t w, h;
    std::uint16_t mv;
    const auto px = read_pgm((d / "w" / c.at("file").get<std::string>()).string(), w, h, mv);
    EXPECT_EQ(mv, 255);
    ASSERT_EQ(px.size(), cells);
    for (std::size_t p = 0; p < cells; ++p) {
      const double ref = fusion[((layers - 1) * cells + p) * cams + cam];
      EXPECT_NEAR(lo + px[p] / 255.0 * (hi - lo), ref, 0.5 / 255.0 * (hi - lo) + 1e-15);
    }
  }
}

TEST(Cli, TrainToyIsReproducible) {
  const fs::path d = scratch("train");
  const std::string a = (d / "a").string(), b = (d / "b").string();
  ASSERT_EQ(run("train-toy --steps 3 --seed 2 --p-mask 0.5 --out " + a).code, 0);
  ASSERT_EQ(run("train-toy --steps 3 --seed 2 --p-mask 0.5 --out " + b).code, 0);
  const std::string curve = read_text(a + "/loss_curve.csv");
  EXPECT_EQ(curve, read_text(b + "/loss_curve.csv"));
  EXPECT_EQ(std::count(curve.begin(), curve.end(), '\n'), 4);
  EXPECT_EQ(read_text(a + "/weights.bin"), read_text(b + "/weights.bin"));

  // Trained weights load back into encode; a mismatched preset is refused.
  const std::string sc = (d / "sc.json").string();
  write_text(sc, scenario_to_json(toy_scenario(2)));
  ASSERT_EQ(run("simulate --config " + sc + " --out " + (d / "bundle").string()).code, 0);
  EXPECT_EQ(run("encode --bundle " + (d / "bundle").string() + " --weights " + a + "/weights.bin --out " +
                (d / "enc").string())
                .code,
            0);
  EXPECT_EQ(run("encode --bundle " + (d / "bundle").string() + " --model desk --weights " + a +
                "/weights.bin --out " + (d / "enc2").string())
                .code,
            2);
}

TEST(Cli, NumericFailureExitsThree) {
  const fs::path d = scratch("numeric");
  const CliRun r = run("train-toy --steps 3 --optimizer sgd --lr 1e300 --out " + (d / "t").string());
  EXPECT_EQ(r.code, 3) << r.out;
  EXPECT_NE(r.out.find("train step"), std::string::npos);
}

TEST(Cli, GradcheckBreachExitsFour) {
  const fs::path d = scratch("gc");
  const CliRun ok = run("gradcheck --seed 1 --max-elements 2 --out " + (d / "ok").string());
  EXPECT_EQ(ok.code, 0) << ok.out;
  EXPECT_TRUE(fs::exists(d / "ok" / "gradcheck.csv"));
  EXPECT_EQ(run("gradcheck --seed 1 --max-elements 2 --tol 1e-15").code, 4);
}
