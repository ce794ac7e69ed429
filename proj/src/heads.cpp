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

#include "rbev/heads.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "json.hpp"
#include "rbev/fusion_encoder.hpp"
#include "rbev/init.hpp"
#include "rbev/ops.hpp"

namespace rbev {
namespace {

const std::string kSeg[2] = {"seg.map", "seg.obj"};

double sigmoid_inv(double p) { return std::log(p / (1.0 - p)); }

// Rectangular assignment (rows <= cols) by shortest augmenting paths with
// row/column potentials. After solve(), cost - u - v >= 0 everywhere and is
// zero on the assignment.
struct Assignment {
  std::vector<std::size_t> col_of_row;
  std::vector<double> u, v;
  double total = 0.0;
};

Assignment solve_assignment(const std::vector<std::size_t>& rows, const std::vector<std::size_t>& cols,
                            const Tensor& cost) {
  const std::size_t n = rows.size(), m = cols.size();
  const std::size_t stride = cost.dim(1);
  auto a = [&](std::size_t i, std::size_t j) { return cost[rows[i - 1] * stride + cols[j - 1]]; };
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a(i0, j) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  Assignment out;
  out.col_of_row.assign(n, 0);
  for (std::size_t j = 1; j <= m; ++j)
    if (p[j] != 0) out.col_of_row[p[j] - 1] = j - 1;
  out.u.assign(u.begin() + 1, u.end());
  out.v.assign(v.begin() + 1, v.end());
  for (std::size_t i = 0; i < n; ++i) out.total += cost[rows[i] * stride + cols[out.col_of_row[i]]];
  return out;
}

Var attention(Var q_in, Var k_in, Var v_in, Var wq, Var wk, Var wv) {
  const double s = 1.0 / std::sqrt(static_cast<double>(q_in.value().dim(1)));
  Var scores = scale(matmul(matmul(q_in, wq), transpose(matmul(k_in, wk))), s);
  return matmul(softmax_rows(scores), matmul(v_in, wv));
}

}  // namespace

void HeadConfig::validate(std::size_t channels) const {
  if (num_classes == 0 || num_queries == 0 || decoder_layers == 0 || ffn_hidden == 0) {
    throw ConfigError("heads: classes, queries, decoder layers and ffn width must be positive");
  }
  if (map_classes == 0 || seg_blocks == 0) throw ConfigError("heads: segmentation needs classes and blocks");
  if (seg_groups == 0 || channels % seg_groups != 0) {
    throw ConfigError("heads: " + std::to_string(channels) + " channels not divisible into " +
                      std::to_string(seg_groups) + " norm groups");
  }
  if (lambda_cls < 0 || lambda_reg < 0 || lambda_seg < 0) throw ConfigError("heads: loss weights must be >= 0");
  if (!(focal_alpha > 0.0 && focal_alpha < 1.0) || focal_gamma < 0.0) throw ConfigError("heads: invalid focal parameters");
  if (!(velocity_scale > 0.0)) throw ConfigError("heads: velocity_scale must be positive");
}

void add_head_params(ParameterSet& ps, const HeadConfig& cfg, std::size_t c, Rng& rng) {
  cfg.validate(c);
  const std::size_t nq = cfg.num_queries, k = cfg.num_classes;
  Tensor q(Shape{nq, c});
  for (double& v : q.data()) v = 0.1 * normal(rng);
  ps.add("det.query", std::move(q));
  Tensor ref(Shape{nq, 2});
  for (double& v : ref.data()) v = sigmoid_inv(uniform(rng, 0.05, 0.95));
  ps.add("det.ref", std::move(ref));
  add_dense(ps, "det.qpos.in", 2, c, rng);
  add_dense(ps, "det.qpos.out", c, c, rng);
  for (std::size_t l = 0; l < cfg.decoder_layers; ++l) {
    const std::string p = "det.l" + std::to_string(l);
    for (const char* blk : {".sa", ".ca"}) {
      ps.add(p + blk + ".wq", glorot({c, c}, c, c, rng));
      ps.add(p + blk + ".wk", glorot({c, c}, c, c, rng));
      ps.add(p + blk + ".wv", glorot({c, c}, c, c, rng));
      add_dense(ps, p + blk + ".out", c, c, rng);
    }
    add_norm(ps, p + ".ln1", c);
    add_norm(ps, p + ".ln2", c);
    add_dense(ps, p + ".ffn.in", c, cfg.ffn_hidden, rng);
    add_dense(ps, p + ".ffn.out", cfg.ffn_hidden, c, rng);
    add_norm(ps, p + ".ln3", c);
  }
  add_dense(ps, "det.cls", c, k + 1, rng);
  // Background prior of 1 - 0.01 * K.
  ps.get("det.cls.b").tensor[k] = std::log(100.0 - static_cast<double>(k));
  add_dense(ps, "det.reg.hidden", c, c, rng);
  add_dense(ps, "det.reg.out", c, cfg.box_dims(), rng);
  Tensor& rb = ps.get("det.reg.out.b").tensor;
  rb[3] = std::log(2.5);
  rb[4] = std::log(1.2);
  rb[5] = std::log(1.7);
  rb[7] = 1.0;

  for (std::size_t head = 0; head < 2; ++head) {
    const std::string& p = kSeg[head];
    const std::size_t out = head == 0 ? cfg.map_classes : k + 1;
    for (std::size_t b = 0; b < cfg.seg_blocks; ++b) {
      const std::string bp = p + ".b" + std::to_string(b);
      ps.add(bp + ".conv.w", glorot({c, c, 3, 3}, 9 * c, 9 * c, rng));
      ps.add(bp + ".conv.b", Tensor(Shape{c}));
      add_norm(ps, bp + ".gn", c);
    }
    ps.add(p + ".cls.w", glorot({out, c, 1, 1}, c, out, rng));
    ps.add(p + ".cls.b", Tensor(Shape{out}));
  }
}

std::vector<double> encode_box(const Box3D& b, const BevGridSpec& grid, const HeadConfig& cfg) {
  std::vector<double> v = {(b.x - grid.x_min) / (grid.x_max - grid.x_min),
                           (b.y - grid.y_min) / (grid.y_max - grid.y_min),
                           b.z / grid.z_max,
                           std::log(b.l),
                           std::log(b.w),
                           std::log(b.h),
                           std::sin(b.yaw),
                           std::cos(b.yaw)};
  if (cfg.velocity) {
    v.push_back(b.vx / cfg.velocity_scale);
    v.push_back(b.vy / cfg.velocity_scale);
  }
  return v;
}

Box3D decode_box(std::span<const double> v, const BevGridSpec& grid, const HeadConfig& cfg) {
  if (v.size() < cfg.box_dims()) throw DimensionError("decode_box: short box vector");
  auto size = [](double s) { return std::exp(std::clamp(s, -10.0, 10.0)); };
  Box3D b;
  b.x = grid.x_min + v[0] * (grid.x_max - grid.x_min);
  b.y = grid.y_min + v[1] * (grid.y_max - grid.y_min);
  b.z = v[2] * grid.z_max;
  b.l = size(v[3]);
  b.w = size(v[4]);
  b.h = size(v[5]);
  b.yaw = (v[6] == 0.0 && v[7] == 0.0) ? 0.0 : wrap_angle(std::atan2(v[6], v[7]));
  if (cfg.velocity) {
    b.vx = v[8] * cfg.velocity_scale;
    b.vy = v[9] * cfg.velocity_scale;
  }
  return b;
}

DetectOutput detect_forward(Tape& tape, ParameterSet& ps, const HeadConfig& cfg, Var bev,
                            const BevGridSpec& grid) {
  const Tensor& bv = bev.value();
  if (bv.rank() != 2 || bv.dim(0) != grid.num_cells()) {
    throw DimensionError("detect: features " + shape_str(bv.shape()) + " for a " + std::to_string(grid.rows) +
                         "x" + std::to_string(grid.cols) + " grid");
  }
  const std::size_t c = bv.dim(1);
  cfg.validate(c);
  auto P = [&](const std::string& n) { return pvar(tape, ps, n); };
  Var q = P("det.query");
  if (q.value().dim(0) != cfg.num_queries) {
    throw ConfigError("detect: parameters hold " + std::to_string(q.value().dim(0)) + " queries, config asks for " +
                      std::to_string(cfg.num_queries));
  }
  Var ref = P("det.ref");
  Var pos = linear(relu(linear(sigmoid(ref), P("det.qpos.in.w"), P("det.qpos.in.b"))), P("det.qpos.out.w"),
                   P("det.qpos.out.b"));
  Var keys = add(bev, tape.constant(grid_positional_embedding(grid.rows, grid.cols, c)));
  for (std::size_t l = 0; l < cfg.decoder_layers; ++l) {
    const std::string p = "det.l" + std::to_string(l);
    Var qp = add(q, pos);
    Var sa = attention(qp, qp, q, P(p + ".sa.wq"), P(p + ".sa.wk"), P(p + ".sa.wv"));
    q = layer_norm(add(q, linear(sa, P(p + ".sa.out.w"), P(p + ".sa.out.b"))), P(p + ".ln1.g"), P(p + ".ln1.b"));
    Var ca = attention(add(q, pos), keys, bev, P(p + ".ca.wq"), P(p + ".ca.wk"), P(p + ".ca.wv"));
    q = layer_norm(add(q, linear(ca, P(p + ".ca.out.w"), P(p + ".ca.out.b"))), P(p + ".ln2.g"), P(p + ".ln2.b"));
    Var ff = linear(relu(linear(q, P(p + ".ffn.in.w"), P(p + ".ffn.in.b"))), P(p + ".ffn.out.w"), P(p + ".ffn.out.b"));
    q = layer_norm(add(q, ff), P(p + ".ln3.g"), P(p + ".ln3.b"));
  }
  DetectOutput out;
  out.logits = linear(q, P("det.cls.w"), P("det.cls.b"));
  Var reg = linear(relu(linear(q, P("det.reg.hidden.w"), P("det.reg.hidden.b"))), P("det.reg.out.w"),
                   P("det.reg.out.b"));
  const Var parts[2] = {sigmoid(add(slice_cols(reg, 0, 2), ref)), slice_cols(reg, 2, cfg.box_dims() - 2)};
  out.boxes = concat_cols(parts);
  return out;
}

std::vector<Box3D> decode_detections(const DetectOutput& out, const HeadConfig& cfg,
                                     const BevGridSpec& grid) {
  const Tensor& lg = out.logits.value();
  const Tensor& bx = out.boxes.value();
  const std::size_t n = lg.dim(0), k = lg.dim(1), d = bx.dim(1);
  std::vector<Box3D> boxes;
  boxes.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = lg[i * k];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, lg[i * k + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(lg[i * k + j] - mx);
    Box3D b = decode_box(std::span<const double>(bx.data().data() + i * d, d), grid, cfg);
    b.label = 0;
    b.score = -1.0;
    for (std::size_t j = 0; j + 1 < k; ++j) {
      const double p = std::exp(lg[i * k + j] - mx) / z;
      if (p > b.score) {
        b.score = p;
        b.label = static_cast<int>(j);
      }
    }
    boxes.push_back(b);
  }
  return boxes;
}

std::vector<Box3D> detect(Tape& tape, ParameterSet& ps, const HeadConfig& cfg, Var bev,
                          const BevGridSpec& grid) {
  return decode_detections(detect_forward(tape, ps, cfg, bev, grid), cfg, grid);
}

std::vector<std::size_t> hungarian_match(const Tensor& cost) {
  if (cost.rank() != 2) throw DimensionError("hungarian_match: cost must be [G x Q], got " + shape_str(cost.shape()));
  const std::size_t g = cost.dim(0), q = cost.dim(1);
  if (g == 0) return {};
  if (g > q) {
    throw DimensionError("hungarian_match: " + std::to_string(g) + " ground-truth boxes for " + std::to_string(q) +
                         " predictions");
  }
  if (!cost.all_finite()) throw NumericError("hungarian_match: non-finite cost");
  double scale = 1.0;
  for (double v : cost.data()) scale = std::max(scale, std::abs(v));
  const double tol = 1e-9 * scale * static_cast<double>(g);

  std::vector<std::size_t> result(g);
  std::vector<std::size_t> free_cols(q);
  std::iota(free_cols.begin(), free_cols.end(), 0);
  for (std::size_t i = 0; i < g; ++i) {
    std::vector<std::size_t> rows(g - i);
    std::iota(rows.begin(), rows.end(), i);
    const Assignment best = solve_assignment(rows, free_cols, cost);
    const std::size_t chosen = free_cols[best.col_of_row[0]];
    std::size_t pick = chosen;
    // Earlier columns can only be optimal if their reduced cost is zero.
    for (std::size_t jj = 0; jj < free_cols.size() && free_cols[jj] < chosen; ++jj) {
      const std::size_t j = free_cols[jj];
      if (cost[i * q + j] - best.u[0] - best.v[jj] > tol) continue;
      double total = cost[i * q + j];
      if (rows.size() > 1) {
        std::vector<std::size_t> rest_rows(rows.begin() + 1, rows.end());
        std::vector<std::size_t> rest_cols;
        for (std::size_t c : free_cols)
          if (c != j) rest_cols.push_back(c);
        total += solve_assignment(rest_rows, rest_cols, cost).total;
      }
      if (total <= best.total + tol) {
        pick = j;
        break;
      }
    }
    result[i] = pick;
    free_cols.erase(std::find(free_cols.begin(), free_cols.end(), pick));
  }
  return result;
}

Tensor matching_cost(const DetectOutput& out, const std::vector<Box3D>& gts, const HeadConfig& cfg,
                     const BevGridSpec& grid) {
  const Tensor& lg = out.logits.value();
  const Tensor& bx = out.boxes.value();
  const std::size_t n = lg.dim(0), k = lg.dim(1), d = cfg.box_dims();
  Tensor probs(lg.shape());
  for (std::size_t i = 0; i < n; ++i) {
    double mx = lg[i * k];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, lg[i * k + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(lg[i * k + j] - mx);
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(lg[i * k + j] - mx) / z;
  }
  Tensor cost(Shape{gts.size(), n});
  for (std::size_t g = 0; g < gts.size(); ++g) {
    if (gts[g].label < 0 || static_cast<std::size_t>(gts[g].label) >= cfg.num_classes) {
      throw ConfigError("matching_cost: ground-truth label " + std::to_string(gts[g].label) + " out of range");
    }
    const std::vector<double> t = encode_box(gts[g], grid, cfg);
    for (std::size_t i = 0; i < n; ++i) {
      double l1 = 0.0;
      for (std::size_t j = 0; j < d; ++j) l1 += std::abs(bx[i * bx.dim(1) + j] - t[j]);
      cost[g * n + i] = -cfg.lambda_cls * probs[i * k + static_cast<std::size_t>(gts[g].label)] + cfg.lambda_reg * l1;
    }
  }
  return cost;
}

DetectionLoss detection_loss(const DetectOutput& out, const std::vector<Box3D>& gts,
                             const HeadConfig& cfg, const BevGridSpec& grid,
                             const std::vector<std::size_t>* assignment) {
  Tape& tape = *out.logits.tape;
  const std::size_t n = out.logits.value().dim(0), g = gts.size(), d = cfg.box_dims();
  DetectionLoss loss;
  loss.assignment = assignment ? *assignment : hungarian_match(matching_cost(out, gts, cfg, grid));
  if (loss.assignment.size() != g) throw DimensionError("detection_loss: assignment does not cover every ground-truth box");
  std::vector<std::uint32_t> labels(n, static_cast<std::uint32_t>(cfg.num_classes));
  for (std::size_t i = 0; i < g; ++i) labels[loss.assignment[i]] = static_cast<std::uint32_t>(gts[i].label);
  const double norm = 1.0 / std::max<double>(1.0, static_cast<double>(g));
  loss.cls = scale(softmax_focal(out.logits, labels, cfg.focal_gamma, cfg.focal_alpha,
                                 static_cast<std::uint32_t>(cfg.num_classes)),
                   norm);
  if (g == 0) {
    loss.reg = tape.constant(Tensor::scalar(0.0));
    return loss;
  }
  std::vector<std::uint32_t> rows(g);
  Tensor target(Shape{g, d});
  for (std::size_t i = 0; i < g; ++i) {
    rows[i] = static_cast<std::uint32_t>(loss.assignment[i]);
    const std::vector<double> t = encode_box(gts[i], grid, cfg);
    std::copy_n(t.begin(), d, target.data().begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  Var pred = gather_rows(slice_cols(out.boxes, 0, d), rows);
  loss.reg = scale(sum(abs(sub(pred, tape.constant(std::move(target))))), norm);
  return loss;
}

SegOutput seg_decode(Tape& tape, ParameterSet& ps, const HeadConfig& cfg, Var bev,
                     const BevGridSpec& grid) {
  const Tensor& bv = bev.value();
  if (bv.rank() != 2 || bv.dim(0) != grid.num_cells()) {
    throw DimensionError("seg_decode: features " + shape_str(bv.shape()) + " for a " + std::to_string(grid.rows) +
                         "x" + std::to_string(grid.cols) + " grid");
  }
  const std::size_t c = bv.dim(1);
  cfg.validate(c);
  Var x0 = reshape(transpose(bev), {c, grid.rows, grid.cols});
  Var heads[2];
  for (std::size_t head = 0; head < 2; ++head) {
    const std::string& p = kSeg[head];
    Var x = x0;
    for (std::size_t b = 0; b < cfg.seg_blocks; ++b) {
      const std::string bp = p + ".b" + std::to_string(b);
      x = conv2d(x, pvar(tape, ps, bp + ".conv.w"), pvar(tape, ps, bp + ".conv.b"));
      x = relu(group_norm(x, cfg.seg_groups, pvar(tape, ps, bp + ".gn.g"), pvar(tape, ps, bp + ".gn.b")));
    }
    heads[head] = conv2d(x, pvar(tape, ps, p + ".cls.w"), pvar(tape, ps, p + ".cls.b"));
  }
  return {heads[0], heads[1]};
}

Var segmentation_loss(Var logits, std::span<const std::uint32_t> labels) {
  const Tensor& v = logits.value();
  require_rank(v, 3, "segmentation_loss");
  const std::size_t n = v.dim(0), hw = v.dim(1) * v.dim(2);
  if (labels.size() != hw) {
    throw DimensionError("segmentation_loss: " + std::to_string(labels.size()) + " labels for logits " +
                         shape_str(v.shape()));
  }
  return softmax_cross_entropy(transpose(reshape(logits, {n, hw})), labels);
}

LossBreakdown total_loss(double cls, double reg, double seg_map, double seg_obj, const HeadConfig& cfg) {
  LossBreakdown b{cls, reg, seg_map, seg_obj, 0.0};
  b.total = cfg.lambda_cls * cls + cfg.lambda_reg * reg + cfg.lambda_seg * (seg_map + seg_obj);
  check_breakdown(b, cfg);
  return b;
}

Var total_loss(Var cls, Var reg, Var seg_map, Var seg_obj, const HeadConfig& cfg) {
  Var det = add(scale(cls, cfg.lambda_cls), scale(reg, cfg.lambda_reg));
  return add(det, scale(add(seg_map, seg_obj), cfg.lambda_seg));
}

void check_breakdown(const LossBreakdown& b, const HeadConfig& cfg) {
  for (double v : {b.cls, b.reg, b.seg_map, b.seg_obj, b.total}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw NumericError("loss breakdown has a negative or non-finite term");
  }
  const double expect = cfg.lambda_cls * b.cls + cfg.lambda_reg * b.reg + cfg.lambda_seg * (b.seg_map + b.seg_obj);
  if (std::abs(expect - b.total) > 1e-12 * std::max(1.0, std::abs(expect))) {
    throw NumericError("loss breakdown total does not match its components");
  }
}

std::string detections_to_json(const std::vector<std::vector<Box3D>>& frames,
                               const std::vector<std::string>& class_names) {
  nlohmann::json root = nlohmann::json::array();
  for (const auto& frame : frames) {
    nlohmann::json arr = nlohmann::json::array();
    for (const Box3D& b : frame) {
      if (b.label < 0 || static_cast<std::size_t>(b.label) >= class_names.size()) {
        throw ConfigError("detections_to_json: label " + std::to_string(b.label) + " has no class name");
      }
      arr.push_back({{"class", class_names[static_cast<std::size_t>(b.label)]},
                     {"score", b.score},
                     {"box", {b.x, b.y, b.z, b.l, b.w, b.h, b.yaw}},
                     {"vel", {b.vx, b.vy}}});
    }
    root.push_back(std::move(arr));
  }
  return root.dump(1);
}

std::vector<std::vector<Box3D>> detections_from_json(const std::string& text,
                                                     const std::vector<std::string>& class_names) {
  std::vector<std::vector<Box3D>> frames;
  try {
    const nlohmann::json root = nlohmann::json::parse(text);
    if (!root.is_array()) throw ConfigError("detections: top level must be an array of frames");
    for (const auto& frame : root) {
      if (!frame.is_array()) throw ConfigError("detections: each frame must be an array");
      std::vector<Box3D> boxes;
      for (const auto& o : frame) {
        const std::string cls = o.at("class").get<std::string>();
        auto it = std::find(class_names.begin(), class_names.end(), cls);
        if (it == class_names.end()) throw ConfigError("detections: unknown class '" + cls + "'");
        const auto box = o.at("box").get<std::vector<double>>();
        if (box.size() != 7) throw ConfigError("detections: box needs 7 values");
        Box3D b{box[0], box[1], box[2], box[3], box[4], box[5], box[6]};
        if (o.contains("vel")) {
          const auto vel = o.at("vel").get<std::vector<double>>();
          if (vel.size() != 2) throw ConfigError("detections: vel needs 2 values");
          b.vx = vel[0];
          b.vy = vel[1];
        }
        b.label = static_cast<int>(it - class_names.begin());
        b.score = o.value("score", 1.0);
        if (!(b.l > 0 && b.w > 0 && b.h > 0)) throw ConfigError("detections: box sizes must be positive");
        if (!(b.score >= 0.0 && b.score <= 1.0)) throw ConfigError("detections: score must be in [0, 1]");
        b.yaw = wrap_angle(b.yaw);
        boxes.push_back(b);
      }
      frames.push_back(std::move(boxes));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("detections: ") + e.what());
  }
  return frames;
}

}  // namespace rbev
