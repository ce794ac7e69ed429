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

#include "rbev/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "json.hpp"

namespace rbev {
namespace fs = std::filesystem;

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out << text;
  if (!out) throw ConfigError("write failed for '" + path + "'");
}

void write_pgm(const std::string& path, const std::vector<std::uint16_t>& pixels, std::size_t width,
               std::size_t height, std::uint16_t maxval) {
  if (pixels.size() != width * height) throw DimensionError("write_pgm: pixel count does not match size");
  if (maxval == 0) throw ConfigError("write_pgm: maxval must be positive");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out << "P5\n" << width << " " << height << "\n" << maxval << "\n";
  std::vector<char> buf;
  buf.reserve(pixels.size() * 2);
  for (std::uint16_t p : pixels) {
    if (p > maxval) throw ConfigError("write_pgm: sample above maxval");
    if (maxval > 255) buf.push_back(static_cast<char>(p >> 8));
    buf.push_back(static_cast<char>(p & 0xff));
  }
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw ConfigError("write failed for '" + path + "'");
}

std::vector<std::uint16_t> read_pgm(const std::string& path, std::size_t& width, std::size_t& height,
                                    std::uint16_t& maxval) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read '" + path + "'");
  std::string magic;
  long w = 0, h = 0, mv = 0;
  in >> magic >> w >> h >> mv;
  if (!in || magic != "P5" || w <= 0 || h <= 0 || mv <= 0 || mv > 65535) {
    throw ConfigError(path + ": not a binary PGM");
  }
  in.get();  // single whitespace before the raster
  width = static_cast<std::size_t>(w);
  height = static_cast<std::size_t>(h);
  maxval = static_cast<std::uint16_t>(mv);
  const std::size_t bytes = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(width * height * bytes);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size()) throw ConfigError(path + ": truncated raster");
  std::vector<std::uint16_t> px(width * height);
  for (std::size_t i = 0; i < px.size(); ++i) {
    px[i] = bytes == 2 ? static_cast<std::uint16_t>((raw[2 * i] << 8) | raw[2 * i + 1]) : raw[i];
    if (px[i] > maxval) throw ConfigError(path + ": sample above maxval");
  }
  return px;
}

namespace {

constexpr double kImageMax = 65535.0;

std::uint16_t to_level(double v) {
  return static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0, 1.0) * kImageMax));
}

}  // namespace

Tensor quantize_image(const Tensor& image) {
  Tensor out(image.shape());
  const auto src = image.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<double>(to_level(src[i])) / kImageMax;
  return out;
}

void save_image_pgm(const std::string& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 1) throw DimensionError("save_image_pgm: expected [1 x H x W]");
  std::vector<std::uint16_t> px(image.size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = to_level(image[i]);
  write_pgm(path, px, image.dim(2), image.dim(1), 65535);
}

Tensor load_image_pgm(const std::string& path) {
  std::size_t w = 0, h = 0;
  std::uint16_t mv = 0;
  const std::vector<std::uint16_t> px = read_pgm(path, w, h, mv);
  Tensor t(Shape{1, h, w});
  for (std::size_t i = 0; i < px.size(); ++i) t[i] = static_cast<double>(px[i]) / static_cast<double>(mv);
  return t;
}

void save_labels_pgm(const std::string& path, const std::vector<std::uint32_t>& labels, std::size_t rows,
                     std::size_t cols, std::uint32_t max_label) {
  if (max_label == 0 || max_label > 65535) throw ConfigError("save_labels_pgm: bad label range");
  std::vector<std::uint16_t> px(labels.size());
  for (std::size_t i = 0; i < px.size(); ++i) {
    if (labels[i] > max_label) throw ConfigError("save_labels_pgm: label above " + std::to_string(max_label));
    px[i] = static_cast<std::uint16_t>(labels[i]);
  }
  write_pgm(path, px, cols, rows, static_cast<std::uint16_t>(max_label));
}

std::vector<std::uint32_t> load_labels_pgm(const std::string& path, std::size_t rows, std::size_t cols) {
  std::size_t w = 0, h = 0;
  std::uint16_t mv = 0;
  const std::vector<std::uint16_t> px = read_pgm(path, w, h, mv);
  if (w != cols || h != rows) {
    throw ConfigError(path + ": " + std::to_string(h) + "x" + std::to_string(w) + " labels for a " +
                      std::to_string(rows) + "x" + std::to_string(cols) + " grid");
  }
  return {px.begin(), px.end()};
}

namespace {

std::string cam_file(std::size_t n) { return "cam" + std::to_string(n) + ".pgm"; }
std::string hist_file(std::size_t t, std::size_t n) {
  return "hist" + std::to_string(t) + "_cam" + std::to_string(n) + ".pgm";
}

bool same_grid(const BevGridSpec& a, const BevGridSpec& b) {
  return a.rows == b.rows && a.cols == b.cols && a.x_min == b.x_min && a.x_max == b.x_max && a.y_min == b.y_min &&
         a.y_max == b.y_max;
}

}  // namespace

void write_bundle(const std::string& dir, const Scene& scene) {
  fs::create_directories(dir);
  ModelConfig mc;
  mc.grid = scene.config.grid;
  mc.encoder.temporal_frames = kBundleHistory;
  const Sample s = make_sample(scene, mc);
  const fs::path d(dir);
  write_text((d / "scenario.json").string(), scenario_to_json(scene.config) + "\n");
  write_text((d / "rigs.json").string(), rigs_to_json(scene.rigs) + "\n");
  write_text((d / "gt.json").string(), detections_to_json({s.boxes}, agent_class_names()) + "\n");
  for (std::size_t n = 0; n < scene.rigs.size(); ++n) {
    save_image_pgm((d / cam_file(n)).string(), s.images[n]);
    for (std::size_t t = 0; t < s.history_images.size(); ++t)
      save_image_pgm((d / hist_file(t + 1, n)).string(), s.history_images[t][n]);
  }
  save_labels_pgm((d / "gt_map.pgm").string(), s.masks.map, s.masks.rows, s.masks.cols, kMapClasses - 1);
  save_labels_pgm((d / "gt_object.pgm").string(), s.masks.object, s.masks.rows, s.masks.cols, kNumAgentClasses);
}

SceneConfig load_bundle_scenario(const std::string& dir) {
  if (!fs::is_directory(dir)) throw ConfigError("bundle directory '" + dir + "' does not exist");
  return scenario_from_json(read_text((fs::path(dir) / "scenario.json").string()));
}

Sample load_bundle(const std::string& dir, const ModelConfig& model) {
  model.validate();
  const SceneConfig sc = load_bundle_scenario(dir);
  if (!same_grid(sc.grid, model.grid)) {
    throw ConfigError("bundle '" + dir + "' grid " + std::to_string(sc.grid.rows) + "x" +
                      std::to_string(sc.grid.cols) + " differs from the model grid " +
                      std::to_string(model.grid.rows) + "x" + std::to_string(model.grid.cols));
  }
  if (model.encoder.temporal_frames > kBundleHistory) {
    throw ConfigError("model wants " + std::to_string(model.encoder.temporal_frames) + " history frames, bundles hold " +
                      std::to_string(kBundleHistory));
  }
  const fs::path d(dir);
  const std::vector<CameraRig> rigs = rigs_from_json(read_text((d / "rigs.json").string()));
  if (rigs.size() != sc.num_cameras) throw ConfigError("bundle '" + dir + "': rigs.json disagrees with the scenario");
  Sample s;
  s.id = sample_id(sc);
  s.rigs = pad_rigs(rigs, model.max_cameras, sc.image_width, sc.image_height);
  auto load_frame = [&](auto name) {
    std::vector<Tensor> frame;
    for (std::size_t n = 0; n < s.rigs.size(); ++n) {
      if (s.rigs[n].is_dummy) {
        frame.emplace_back(Shape{1, static_cast<std::size_t>(s.rigs[n].height), static_cast<std::size_t>(s.rigs[n].width)});
      } else {
        frame.push_back(load_image_pgm((d / name(n)).string()));
      }
    }
    return frame;
  };
  s.images = load_frame([](std::size_t n) { return cam_file(n); });
  for (std::size_t t = 1; t <= model.encoder.temporal_frames; ++t)
    s.history_images.push_back(load_frame([t](std::size_t n) { return hist_file(t, n); }));
  const auto frames = detections_from_json(read_text((d / "gt.json").string()), agent_class_names());
  if (frames.size() != 1) throw ConfigError("bundle '" + dir + "': gt.json must hold one frame");
  s.boxes = frames[0];
  s.masks.rows = model.grid.rows;
  s.masks.cols = model.grid.cols;
  s.masks.map = load_labels_pgm((d / "gt_map.pgm").string(), s.masks.rows, s.masks.cols);
  s.masks.object = load_labels_pgm((d / "gt_object.pgm").string(), s.masks.rows, s.masks.cols);
  refresh_geometry(s, model);
  return s;
}

void write_meta(const std::string& dir, const std::string& command, std::uint64_t seed,
                const std::string& extra_json) {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream ts;
  ts << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  nlohmann::json j{{"command", command}, {"seed", seed}, {"created", ts.str()}};
  j["details"] = nlohmann::json::parse(extra_json);
  write_text((fs::path(dir) / "meta.json").string(), j.dump(2) + "\n");
}

GradcheckCase gradcheck_case(const SceneConfig& base) {
  GradcheckCase c;
  ModelConfig& m = c.config;
  m.grid.x_min = m.grid.y_min = -12.8;
  m.grid.x_max = m.grid.y_max = 12.8;
  m.grid.rows = m.grid.cols = 10;
  m.grid.anchor_heights = spaced_anchor_heights(2);
  m.max_cameras = std::max<std::size_t>(2, base.num_cameras);
  m.encoder.layers = 1;
  m.encoder.channels = 8;
  m.encoder.temporal_frames = 0;
  m.encoder.ffn_hidden = 8;
  m.encoder.points_per_ref = 2;
  m.encoder.dropout = 0.0;
  m.gat.layers = 1;
  m.gat.heads = 2;
  m.gat.hidden = 8;
  m.gat.dropout = 0.0;
  m.head.num_queries = 8;
  m.head.ffn_hidden = 8;
  m.head.seg_blocks = 1;
  m.head.seg_groups = 2;
  m.validate();
  SceneConfig sc = base;
  sc.num_agents = 4;
  sc.aim_cameras = true;
  sc.image_width = 48;
  sc.image_height = 32;
  sc.focal = 48;
  sc.grid = m.grid;
  c.sample = make_sample(generate_scene(sc), m);
  return c;
}

GradcheckCase gradcheck_case(std::uint64_t seed) {
  SceneConfig sc;
  sc.num_cameras = 2;
  sc.seed = seed;
  return gradcheck_case(sc);
}

GradCheckReport gradcheck_model(Model& model, const Sample& sample, const GradCheckOptions& opts) {
  std::vector<std::size_t> assignment;
  {
    Tape tape(Tape::Mode::kNoGrad);
    assignment = model.loss(model.forward(tape, sample), sample).assignment;
  }
  const ScalarFn f = [&](Tape& tape, ParameterSet&) {
    return model.loss(model.forward(tape, sample), sample, &assignment).total;
  };
  return grad_check(f, model.params(), opts);
}

SceneConfig toy_scenario(std::uint64_t seed) {
  SceneConfig sc;
  sc.num_cameras = 2;
  sc.num_agents = 10;
  sc.aim_cameras = true;
  sc.image_width = 160;
  sc.image_height = 120;
  sc.focal = 160;
  sc.grid = ModelConfig::preset("toy").grid;
  sc.seed = seed;
  return sc;
}

}  // namespace rbev
