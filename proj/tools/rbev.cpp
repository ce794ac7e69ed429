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

// rbev: simulate, encode, evaluate, gradcheck, train-toy, weights-dump.
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "rbev/metrics.hpp"
#include "rbev/pipeline.hpp"
#include "rbev/serialize.hpp"

using namespace rbev;
namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitTolerance = 4;

// Shortest round-trip form, so reruns print identical bytes.
std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string path_in(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

void require_file(const std::string& path, const std::string& what) {
  if (!fs::exists(path)) throw ConfigError(what + " '" + path + "' does not exist");
}

struct ModelOpts {
  std::string preset = "toy";
  std::string weights;
  std::uint64_t seed = 0;
  std::string corrupt = "none";
};

void add_model_opts(CLI::App* c, ModelOpts& o) {
  c->add_option("--model", o.preset, "Model preset")->check(CLI::IsMember({"toy", "desk", "m2i"}));
  c->add_option("--weights", o.weights, "Parameter file written by train-toy");
  c->add_option("--seed", o.seed, "Initialization seed when no weights are given");
  c->add_option("--corrupt", o.corrupt, "Corrupt one view as in the robustness protocol")
      ->check(CLI::IsMember({"none", "auto"}));
}

// Model on the bundle's grid, with weights when given.
Model bundle_model(const std::string& bundle, const ModelOpts& o, Sample& sample) {
  ModelConfig mc = ModelConfig::preset(o.preset);
  mc.grid = load_bundle_scenario(bundle).grid;
  mc.encoder.dropout = 0.0;
  sample = load_bundle(bundle, mc);
  Model m(mc, o.seed);
  if (!o.weights.empty()) {
    require_file(o.weights, "weights file");
    load_params_into(o.weights, m.params());
  }
  return m;
}

std::vector<Tensor> input_images(const Sample& s, const std::string& corrupt, CorruptionSpec& spec) {
  std::vector<Tensor> images = s.images;
  if (corrupt == "auto") spec = corrupt_test(images, s.rigs, s.id);
  return images;
}

std::string corruption_json(const CorruptionSpec& c) {
  nlohmann::json j{{"mode", to_string(c.mode)}};
  if (c.mode != CorruptionMode::kNone) {
    j["camera"] = c.camera_index;
    j["seed"] = c.seed;
    if (c.mode == CorruptionMode::kBlur) j["sigma"] = c.blur_sigma;
  }
  return j.dump(2);
}

int cmd_simulate(const std::string& config, std::optional<std::uint64_t> seed, const std::string& grid,
                 const std::string& out) {
  require_file(config, "scenario file");
  SceneConfig sc = load_scenario(config);
  if (seed) sc.seed = *seed;
  if (!grid.empty()) sc.grid = BevGridSpec::preset(grid);
  sc.validate();
  const Scene scene = generate_scene(sc);
  write_bundle(out, scene);
  write_meta(out, "simulate", sc.seed);
  std::cout << "simulate: " << scene.agents.size() << " agents, " << scene.rigs.size() << " cameras -> " << out
            << "\n";
  return kExitOk;
}

int cmd_encode(const std::string& bundle, const ModelOpts& o, const std::string& out) {
  Sample s;
  Model m = bundle_model(bundle, o, s);
  CorruptionSpec spec;
  const std::vector<Tensor> images = input_images(s, o.corrupt, spec);
  Tape tape(Tape::Mode::kNoGrad);
  const ForwardResult f = m.forward(tape, s, images);
  const Tensor& bev = f.encoder.bev.value();
  if (!bev.all_finite()) throw NumericError("encode: BEV features are not finite");
  const std::vector<Box3D> dets = decode_detections(f.detect, m.config().head, m.config().grid);

  fs::create_directories(out);
  save_tensor(path_in(out, "bev.tensor"), bev);
  const std::size_t layers = f.encoder.fields.size(), p = bev.dim(0), n = s.rigs.size();
  Tensor fusion(Shape{layers, p, n});
  for (std::size_t l = 0; l < layers; ++l) {
    const auto w = f.encoder.fields[l].weights.data();
    std::copy(w.begin(), w.end(), fusion.data().begin() + static_cast<std::ptrdiff_t>(l * p * n));
  }
  save_tensor(path_in(out, "fusion.tensor"), fusion);
  write_text(path_in(out, "detections.json"), detections_to_json({dets}, agent_class_names()) + "\n");
  write_text(path_in(out, "corruption.json"), corruption_json(spec) + "\n");
  write_meta(out, "encode", o.seed, nlohmann::json{{"bundle", bundle}, {"model", o.preset}}.dump());
  std::cout << "encode: " << s.id << ", BEV " << shape_str(bev.shape()) << ", " << dets.size()
            << " detections -> " << out << "\n";
  return kExitOk;
}

int cmd_evaluate(const std::string& dets_path, const std::string& gt_path, const std::string& out) {
  require_file(dets_path, "detections file");
  require_file(gt_path, "ground-truth file");
  const Frames preds = detections_from_json(read_text(dets_path), agent_class_names());
  const Frames gts = detections_from_json(read_text(gt_path), agent_class_names());
  const MetricReport r = evaluate(preds, gts);
  check_report(r);
  const std::string csv = report_to_csv(r);
  if (!out.empty()) {
    fs::create_directories(out);
    write_text(path_in(out, "metrics.csv"), csv);
    write_text(path_in(out, "metrics.json"), report_to_json(r) + "\n");
  }
  std::cout << csv;
  return kExitOk;
}

int cmd_gradcheck(const std::string& config, std::uint64_t seed, double eps, double tol, std::size_t max_elems,
                  const std::string& out) {
  SceneConfig base;
  base.num_cameras = 2;
  if (!config.empty()) {
    require_file(config, "scenario file");
    base = load_scenario(config);
  }
  base.seed = seed;
  const GradcheckCase c = gradcheck_case(base);
  Model m(c.config, seed);
  GradCheckOptions opts;
  opts.eps = eps;
  opts.tol = tol;
  opts.max_elements_per_param = max_elems;
  const GradCheckReport rep = gradcheck_model(m, c.sample, opts);
  std::ostringstream csv;
  csv << "parameter,checked,max_rel_error,worst_index,analytic,numeric\n";
  for (const GradCheckEntry& e : rep.entries) {
    csv << e.name << "," << e.checked << "," << num(e.max_rel_error) << "," << e.worst_index << ","
        << num(e.analytic_at_worst) << "," << num(e.numeric_at_worst) << "\n";
  }
  if (!out.empty()) {
    fs::create_directories(out);
    write_text(path_in(out, "gradcheck.csv"), csv.str());
    write_meta(out, "gradcheck", seed);
  }
  std::cout << csv.str() << "max relative error " << num(rep.max_rel_error) << " (tolerance " << num(tol) << "): "
            << (rep.passed ? "pass" : "FAIL") << "\n";
  return rep.passed ? kExitOk : kExitTolerance;
}

struct TrainOpts {
  std::string config;
  std::uint64_t seed = 0;
  std::size_t steps = 300;
  double lr = 2e-4;
  double weight_decay = 1e-2;
  std::string optimizer = "adamw";
  bool cosine = false;
  double p_mask = 0.0;
};

int cmd_train_toy(const TrainOpts& o, const std::string& out) {
  SceneConfig sc = toy_scenario(o.seed);
  if (!o.config.empty()) {
    require_file(o.config, "scenario file");
    sc = load_scenario(o.config);
  }
  ModelConfig mc = ModelConfig::preset("toy");
  mc.grid = sc.grid;
  const std::vector<Sample> samples{make_sample(generate_scene(sc), mc)};
  TrainConfig tc;
  tc.steps = o.steps;
  tc.lr = o.lr;
  tc.weight_decay = o.weight_decay;
  tc.optimizer = parse_optimizer(o.optimizer);
  tc.cosine = o.cosine;
  tc.p_mask = o.p_mask;
  tc.seed = o.seed;
  Model m(mc, o.seed);
  const std::vector<LossBreakdown> curve = train(m, samples, tc);
  std::ostringstream csv;
  csv << "step,cls,reg,seg_map,seg_obj,total\n";
  for (std::size_t i = 0; i < curve.size(); ++i) {
    const LossBreakdown& b = curve[i];
    csv << i << "," << num(b.cls) << "," << num(b.reg) << "," << num(b.seg_map) << "," << num(b.seg_obj) << ","
        << num(b.total) << "\n";
  }
  fs::create_directories(out);
  write_text(path_in(out, "loss_curve.csv"), csv.str());
  save_params(path_in(out, "weights.bin"), m.params());
  write_meta(out, "train-toy", o.seed,
             nlohmann::json{{"scene", samples[0].id}, {"optimizer", o.optimizer}, {"lr", o.lr}, {"steps", o.steps}}
                 .dump());
  std::cout << "train-toy: loss " << num(curve.front().total) << " -> " << num(curve.back().total) << " (ratio "
            << num(curve.back().total / curve.front().total) << ") -> " << out << "\n";
  return kExitOk;
}

int cmd_weights_dump(const std::string& bundle, const ModelOpts& o, const std::string& out) {
  Sample s;
  Model m = bundle_model(bundle, o, s);
  CorruptionSpec spec;
  const std::vector<Tensor> images = input_images(s, o.corrupt, spec);
  Tape tape(Tape::Mode::kNoGrad);
  const ForwardResult f = m.forward(tape, s, images);
  const FusionField& field = f.encoder.fields.back();
  const BevGridSpec& grid = m.config().grid;
  const std::size_t p = grid.num_cells(), n = s.rigs.size();
  fs::create_directories(out);
  nlohmann::json side{{"layer", f.encoder.fields.size() - 1},
                      {"rows", grid.rows},
                      {"cols", grid.cols},
                      {"x_range", {grid.x_min, grid.x_max}},
                      {"y_range", {grid.y_min, grid.y_max}},
                      {"row0", "y_min"},
                      {"maxval", 255},
                      {"dequantize", "min + pixel / 255 * (max - min)"},
                      {"corruption", nlohmann::json::parse(corruption_json(spec))},
                      {"cameras", nlohmann::json::array()}};
  for (std::size_t cam = 0; cam < n; ++cam) {
    if (s.rigs[cam].is_dummy) continue;
    double lo = 1.0, hi = 0.0, total = 0.0;
    std::size_t visible = 0;
    for (std::size_t cell = 0; cell < p; ++cell) {
      const double w = field.weights[cell * n + cam];
      if (!std::isfinite(w)) throw NumericError("weights-dump: fusion weight is not finite");
      lo = std::min(lo, w);
      hi = std::max(hi, w);
      visible += w > 0.0;
      total += w;
    }
    if (hi < lo) hi = lo;
    const double span = hi - lo;
    std::vector<std::uint16_t> px(p, 0);
    if (span > 0.0)
      for (std::size_t cell = 0; cell < p; ++cell)
        px[cell] = static_cast<std::uint16_t>(std::lround((field.weights[cell * n + cam] - lo) / span * 255.0));
    const std::string file = "fusion_cam" + std::to_string(cam) + ".pgm";
    write_pgm(path_in(out, file), px, grid.cols, grid.rows, 255);
    side["cameras"].push_back({{"index", cam}, {"file", file}, {"min", lo}, {"max", hi},
                               {"cells_with_weight", visible}, {"mean", total / static_cast<double>(p)}});
  }
  write_text(path_in(out, "fusion.json"), side.dump(2) + "\n");
  write_meta(out, "weights-dump", o.seed, nlohmann::json{{"bundle", bundle}, {"model", o.preset}}.dump());
  std::cout << "weights-dump: " << side["cameras"].size() << " heatmaps -> " << out << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-camera BEV fusion toolkit"};
  app.footer("Exit codes: 0 ok, 2 usage or config, 3 numeric failure, 4 gradcheck tolerance breach.\n"
             "RBEV_THREADS caps worker threads.");
  app.require_subcommand(1);

  std::string config, out, grid, bundle, dets, gt;
  std::optional<std::uint64_t> sim_seed;
  auto* sim = app.add_subcommand("simulate", "Generate a scene bundle from a scenario");
  sim->add_option("--config", config, "Scenario JSON")->required();
  sim->add_option("--seed", sim_seed, "Override the scenario seed");
  sim->add_option("--grid", grid, "Grid preset")->check(CLI::IsMember({"m2i", "desk"}));
  sim->add_option("--out", out, "Bundle directory")->required();

  ModelOpts mo;
  auto* enc = app.add_subcommand("encode", "Encode a bundle: BEV tensor, fusion weights, detections");
  enc->add_option("--bundle", bundle, "Bundle directory")->required();
  add_model_opts(enc, mo);
  enc->add_option("--out", out, "Output directory")->required();

  auto* ev = app.add_subcommand("evaluate", "Score detections against ground truth (CSV/JSON)");
  ev->add_option("--detections", dets, "Detections JSON")->required();
  ev->add_option("--gt", gt, "Ground-truth JSON")->required();
  ev->add_option("--out", out, "Report directory");

  std::uint64_t gc_seed = 0;
  double eps = 1e-5, tol = 1e-4;
  std::size_t max_elems = 0;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the end-to-end loss");
  gc->add_option("--config", config, "Scenario JSON (layout and camera count)");
  gc->add_option("--seed", gc_seed, "Scene and initialization seed");
  gc->add_option("--eps", eps, "Finite-difference step");
  gc->add_option("--tol", tol, "Relative error tolerance");
  gc->add_option("--max-elements", max_elems, "Elements checked per parameter, 0 = all");
  gc->add_option("--out", out, "Report directory");

  TrainOpts to;
  auto* tr = app.add_subcommand("train-toy", "Train the toy model on one scene and write the loss curve");
  tr->add_option("--config", to.config, "Scenario JSON (default: fixed 2-camera, 10-agent scene)");
  tr->add_option("--seed", to.seed, "Scene, initialization and masking seed");
  tr->add_option("--steps", to.steps, "Optimization steps")->check(CLI::PositiveNumber);
  tr->add_option("--lr", to.lr, "Learning rate");
  tr->add_option("--weight-decay", to.weight_decay, "Decoupled weight decay (adamw)");
  tr->add_option("--optimizer", to.optimizer, "Update rule")->check(CLI::IsMember({"adamw", "sgd"}));
  tr->add_flag("--cosine", to.cosine, "Cosine-annealed learning rate");
  tr->add_option("--p-mask", to.p_mask, "Training view-masking probability")->check(CLI::Range(0.0, 1.0));
  tr->add_option("--out", out, "Output directory")->required();

  ModelOpts wo;
  auto* wd = app.add_subcommand("weights-dump", "Write per-camera fusion-weight heatmaps");
  wd->add_option("--bundle", bundle, "Bundle directory")->required();
  add_model_opts(wd, wo);
  wd->add_option("--out", out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  std::string cmd = app.get_subcommands().front()->get_name();
  try {
    if (*sim) return cmd_simulate(config, sim_seed, grid, out);
    if (*enc) return cmd_encode(bundle, mo, out);
    if (*ev) return cmd_evaluate(dets, gt, out);
    if (*gc) return cmd_gradcheck(config, gc_seed, eps, tol, max_elems, out);
    if (*tr) return cmd_train_toy(to, out);
    if (*wd) return cmd_weights_dump(bundle, wo, out);
  } catch (const NumericError& e) {
    std::cerr << cmd << ": numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const ConfigError& e) {
    std::cerr << cmd << ": " << e.what() << "\n";
    return kExitUsage;
  } catch (const DimensionError& e) {
    std::cerr << cmd << ": " << e.what() << "\n";
    return kExitUsage;
  } catch (const fs::filesystem_error& e) {
    std::cerr << cmd << ": " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
