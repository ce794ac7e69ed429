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

#include "rbev/fusion_encoder.hpp"

#include <cmath>
#include <memory>
#include <string>

#include "rbev/init.hpp"
#include "rbev/ops.hpp"
#include "rbev/parallel.hpp"

namespace rbev {
namespace {

std::string layer_prefix(std::size_t layer) { return "enc.l" + std::to_string(layer); }

// Feature-map coordinates of a pixel: integer values are cell centres.
inline double to_feature(double px, double stride) { return px / stride - 0.5; }

struct MapView {
  const double* data;
  std::size_t channels, height, width;
};

// Sample of one query in one camera. refs holds R feature-space points,
// offsets R*K*2 values, attn R*K weights. Writes `channels` values to out.
void deform_forward(const MapView& m, const double* ref_xy, const char* ref_valid, std::size_t r,
                    std::size_t k, const double* offsets, const double* attn, double* out,
                    std::vector<double>& tmp) {
  for (std::size_t c = 0; c < m.channels; ++c) out[c] = 0.0;
  std::size_t used = 0;
  tmp.resize(m.channels);
  const std::span<const double> map(m.data, m.channels * m.height * m.width);
  for (std::size_t j = 0; j < r; ++j) {
    if (!ref_valid[j]) continue;
    ++used;
    for (std::size_t q = 0; q < k; ++q) {
      const std::size_t s = j * k + q;
      const double x = ref_xy[2 * j] + offsets[2 * s];
      const double y = ref_xy[2 * j + 1] + offsets[2 * s + 1];
      bilinear_read(map, m.channels, m.height, m.width, x, y, tmp);
      const double a = attn[s];
      for (std::size_t c = 0; c < m.channels; ++c) out[c] += a * tmp[c];
    }
  }
  if (used > 1) {
    const double n = static_cast<double>(used);
    for (std::size_t c = 0; c < m.channels; ++c) out[c] /= n;
  }
}

void deform_backward(const MapView& m, const double* ref_xy, const char* ref_valid, std::size_t r,
                     std::size_t k, const double* offsets, const double* attn, const double* g,
                     double* g_map, double* g_off, double* g_attn) {
  std::size_t used = 0;
  for (std::size_t j = 0; j < r; ++j) used += ref_valid[j] ? 1 : 0;
  if (used == 0) return;
  const double inv = 1.0 / static_cast<double>(used);
  const std::size_t hw = m.height * m.width;
  const int w = static_cast<int>(m.width), h = static_cast<int>(m.height);
  for (std::size_t j = 0; j < r; ++j) {
    if (!ref_valid[j]) continue;
    for (std::size_t q = 0; q < k; ++q) {
      const std::size_t s = j * k + q;
      const double x = ref_xy[2 * j] + offsets[2 * s];
      const double y = ref_xy[2 * j + 1] + offsets[2 * s + 1];
      if (!(x > -1.0 && y > -1.0 && x < static_cast<double>(w) && y < static_cast<double>(h))) continue;
      const BilinearTap tap = bilinear_tap(x, y);
      const double fx = tap.wx1, fy = tap.wy1;
      const double wts[4] = {(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy};
      const double dwx[4] = {-(1.0 - fy), 1.0 - fy, -fy, fy};
      const double dwy[4] = {-(1.0 - fx), -fx, 1.0 - fx, fx};
      const double a = attn[s];
      double ga = 0.0, gx = 0.0, gy = 0.0;
      for (int corner = 0; corner < 4; ++corner) {
        const int cx = tap.x0 + (corner & 1);
        const int cy = tap.y0 + (corner >> 1);
        if (cx < 0 || cy < 0 || cx >= w || cy >= h) continue;
        const std::size_t off = static_cast<std::size_t>(cy) * m.width + static_cast<std::size_t>(cx);
        double dot = 0.0;
        for (std::size_t c = 0; c < m.channels; ++c) {
          const double f = m.data[c * hw + off];
          dot += g[c] * f;
          if (g_map) g_map[c * hw + off] += inv * a * wts[corner] * g[c];
        }
        ga += wts[corner] * dot;
        gx += dwx[corner] * dot;
        gy += dwy[corner] * dot;
      }
      if (g_attn) g_attn[s] += inv * ga;
      if (g_off) {
        g_off[2 * s] += inv * a * gx;
        g_off[2 * s + 1] += inv * a * gy;
      }
    }
  }
}

// Offsets and per-reference attention weights for every query row.
std::pair<Var, Var> sampling_heads(Var queries, Var off_w, Var off_b, Var att_w, Var att_b,
                                   std::size_t refs, std::size_t points) {
  const std::size_t n = queries.value().dim(0);
  Var offsets = linear(queries, off_w, off_b);
  Var logits = reshape(linear(queries, att_w, att_b), {n * refs, points});
  Var attn = reshape(softmax_rows(logits), {n, refs * points});
  return {offsets, attn};
}

}  // namespace

void GatConfig::validate() const {
  if (layers == 0) throw ConfigError("gat: layers must be positive");
  if (heads == 0 || hidden == 0 || hidden % heads != 0) {
    throw ConfigError("gat: hidden (" + std::to_string(hidden) + ") must be a positive multiple of heads (" +
                      std::to_string(heads) + ")");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("gat: dropout must be in [0, 1)");
}

void EncoderConfig::validate() const {
  if (layers == 0) throw ConfigError("encoder: layers must be positive");
  if (channels == 0 || channels % 4 != 0) throw ConfigError("encoder: channels must be a positive multiple of 4");
  if (ffn_hidden == 0 || points_per_ref == 0) throw ConfigError("encoder: ffn_hidden and points_per_ref must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("encoder: dropout must be in [0, 1)");
  if (!(feature_stride > 0.0)) throw ConfigError("encoder: feature_stride must be positive");
}

EncoderGeometry prepare_geometry(const BevGridSpec& grid, const std::vector<CameraRig>& rigs) {
  grid.validate();
  EncoderGeometry g;
  g.grid = grid;
  g.samples = point_sampling(grid, rigs);
  g.visibility = visibility(g.samples);
  g.topology = build_topology(rigs, g.visibility, grid);
  g.covered.assign(grid.num_cells(), 0);
  for (std::uint32_t p : g.topology.edge_cell) g.covered[p] = 1;
  return g;
}

void add_gat_params(ParameterSet& ps, const GatConfig& gat, std::size_t channels, Rng& rng) {
  gat.validate();
  const std::size_t d = gat.hidden;
  add_dense(ps, "gat.proj", channels, d, rng);
  for (std::size_t l = 0; l < gat.layers; ++l) {
    const std::string p = "gat.l" + std::to_string(l);
    ps.add(p + ".ws", glorot({d, d}, d, d, rng));
    ps.add(p + ".wt", glorot({d, d}, d, d, rng));
    ps.add(p + ".we", glorot({kEdgeDim, d}, kEdgeDim, d, rng));
    ps.add(p + ".a", glorot({d}, d / gat.heads, 1, rng));
    ps.add(p + ".bias", Tensor(Shape{d}));
  }
  add_dense(ps, "gat.edge", kEdgeDim, d, rng);
  add_dense(ps, "gat.mix", 3 * d, d, rng);
  add_dense(ps, "gat.out", d, 1, rng);
}

void add_encoder_params(ParameterSet& ps, const EncoderConfig& cfg, const GatConfig& gat,
                        const BevGridSpec& grid, Rng& rng) {
  cfg.validate();
  const std::size_t c = cfg.channels, r = grid.n_ref(), k = cfg.points_per_ref;
  Tensor q(Shape{grid.num_cells(), c});
  for (double& v : q.data()) v = 0.1 * normal(rng);
  ps.add("enc.query", std::move(q));
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string p = layer_prefix(l);
    ps.add(p + ".tsa.wq", glorot({c, c}, c, c, rng));
    ps.add(p + ".tsa.wk", glorot({c, c}, c, c, rng));
    ps.add(p + ".tsa.wv", glorot({c, c}, c, c, rng));
    add_dense(ps, p + ".tsa.out", c, c, rng);
    add_norm(ps, p + ".ln1", c);
    ps.add(p + ".def.off.w", Tensor(Shape{c, r * k * 2}));
    ps.add(p + ".def.off.b", Tensor(Shape{r * k * 2}));
    ps.add(p + ".def.att.w", Tensor(Shape{c, r * k}));
    ps.add(p + ".def.att.b", Tensor(Shape{r * k}));
    add_dense(ps, p + ".sca.out", c, c, rng);
    add_norm(ps, p + ".ln2", c);
    add_dense(ps, p + ".ffn.in", c, cfg.ffn_hidden, rng);
    add_dense(ps, p + ".ffn.out", cfg.ffn_hidden, c, rng);
    add_norm(ps, p + ".ln3", c);
  }
  add_gat_params(ps, gat, c, rng);
}

GatOutput gat_score(Tape& tape, ParameterSet& ps, const GatConfig& cfg, Var bev_nodes,
                    Var cam_nodes, const GraphTopology& topo, bool training, Rng* rng) {
  cfg.validate();
  const std::size_t p = topo.num_cells, n = topo.num_cams, e = topo.num_edges();
  if (bev_nodes.value().rank() != 2 || bev_nodes.value().dim(0) != p || cam_nodes.value().rank() != 2 ||
      cam_nodes.value().dim(0) != n) {
    throw DimensionError("gat_score: nodes " + shape_str(bev_nodes.shape()) + " / " +
                         shape_str(cam_nodes.shape()) + " for " + std::to_string(p) + " cells and " +
                         std::to_string(n) + " cameras");
  }
  if (training && cfg.dropout > 0.0 && rng == nullptr) throw ConfigError("gat_score: training needs an rng");
  GatOutput out;
  out.dense = Tensor(Shape{p, n}, kNoEdge);
  if (e == 0) {
    out.edge_logits = tape.constant(Tensor(Shape{0, 1}));
    return out;
  }
  Var pw = pvar(tape, ps, "gat.proj.w"), pb = pvar(tape, ps, "gat.proj.b");
  Var cell = linear(bev_nodes, pw, pb);
  Var cam = linear(cam_nodes, pw, pb);
  Var attrs = tape.constant(topo.edge_attrs);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string pre = "gat.l" + std::to_string(l);
    Var src = matmul(cam, pvar(tape, ps, pre + ".ws"));
    Var dst = matmul(cell, pvar(tape, ps, pre + ".wt"));
    Var src_e = gather_rows(src, topo.edge_cam);
    Var z = leaky_relu(add(add(src_e, gather_rows(dst, topo.edge_cell)),
                           matmul(attrs, pvar(tape, ps, pre + ".we"))),
                       0.2);
    Var alpha = segment_softmax(grouped_dot(z, pvar(tape, ps, pre + ".a"), cfg.heads), topo.edge_cell, p, true);
    Var agg = scatter_add_rows(head_scale(src_e, alpha), topo.edge_cell, p, true);
    Var upd = elu(add_row(agg, pvar(tape, ps, pre + ".bias")));
    if (training && cfg.dropout > 0.0) upd = dropout(upd, cfg.dropout, *rng);
    cell = cfg.residual ? add(upd, cell) : upd;
  }
  Var edge = elu(linear(attrs, pvar(tape, ps, "gat.edge.w"), pvar(tape, ps, "gat.edge.b")));
  const Var parts[3] = {gather_rows(cell, topo.edge_cell), gather_rows(cam, topo.edge_cam), edge};
  // The mix must be nonlinear in the cell term: anything additive per cell
  // cancels in the per-cell softmax.
  Var mixed = elu(linear(concat_cols(parts), pvar(tape, ps, "gat.mix.w"), pvar(tape, ps, "gat.mix.b")));
  out.edge_logits = linear(mixed, pvar(tape, ps, "gat.out.w"), pvar(tape, ps, "gat.out.b"));
  const Tensor& lv = out.edge_logits.value();
  for (std::size_t i = 0; i < e; ++i) out.dense[topo.edge_cell[i] * n + topo.edge_cam[i]] = lv[i];
  return out;
}

FusionField fusion_weights(const Tensor& logits, const VisibilityMask& vis) {
  require_rank(logits, 2, "fusion_weights");
  if (logits.dim(0) != vis.num_cells || logits.dim(1) != vis.num_cams) {
    throw DimensionError("fusion_weights: logits " + shape_str(logits.shape()) + " vs mask " +
                         std::to_string(vis.num_cells) + "x" + std::to_string(vis.num_cams));
  }
  Mask mask(logits.shape());
  for (std::size_t i = 0; i < vis.bits.size(); ++i) mask.set(i, vis.bits[i] != 0);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (mask[i] && !std::isfinite(logits[i])) throw NumericError("fusion_weights: non-finite logit for a visible pair");
  }
  MaskedSoftmax sm = softmax_masked(logits, mask, 1, true);
  FusionField f;
  f.logits = logits;
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (!mask[i]) f.logits[i] = kNoEdge;
  f.weights = std::move(sm.out);
  f.uncovered = std::move(sm.empty_slice);
  return f;
}

Var fusion_weights(Var edge_logits, const GraphTopology& topo, const VisibilityMask& vis,
                   FusionField* field) {
  const std::size_t p = topo.num_cells, n = topo.num_cams, e = topo.num_edges();
  Tape& tape = *edge_logits.tape;
  if (edge_logits.value().size() != e) {
    throw DimensionError("fusion_weights: " + shape_str(edge_logits.shape()) + " logits for " +
                         std::to_string(e) + " edges");
  }
  Mask mask(Shape{p, n});
  for (std::size_t i = 0; i < vis.bits.size(); ++i) mask.set(i, vis.bits[i] != 0);
  if (e == 0) {
    if (field) *field = fusion_weights(Tensor(Shape{p, n}, kNoEdge), vis);
    return tape.constant(Tensor(Shape{0, 1}));
  }
  std::vector<std::uint32_t> slot(e);
  for (std::size_t i = 0; i < e; ++i) slot[i] = topo.edge_cell[i] * static_cast<std::uint32_t>(n) + topo.edge_cam[i];
  Var dense = reshape(scatter_add_rows(reshape(edge_logits, {e, 1}), slot, p * n), {p, n});
  std::vector<char> empty;
  Var w = softmax_masked(dense, mask, &empty, true);
  if (field) {
    field->logits = dense.value();
    for (std::size_t i = 0; i < field->logits.size(); ++i)
      if (!mask[i]) field->logits[i] = kNoEdge;
    field->weights = w.value();
    field->uncovered = std::move(empty);
  }
  return gather_rows(reshape(w, {p * n, 1}), slot);
}

Var deform_sample_edges(Var maps, std::size_t channels, Var offsets, Var attn,
                        const GraphTopology& topo, const PointSamples& samples, double stride) {
  const Tensor& mv = maps.value();
  require_rank(mv, 3, "deform_sample_edges");
  const std::size_t n = topo.num_cams, e = topo.num_edges(), r = samples.n_ref;
  if (mv.dim(0) != n * channels) {
    throw DimensionError("deform_sample_edges: maps " + shape_str(mv.shape()) + " for " +
                         std::to_string(n) + " cameras of " + std::to_string(channels) + " channels");
  }
  const Tensor& ov = offsets.value();
  const Tensor& av = attn.value();
  if (ov.rank() != 2 || av.rank() != 2 || ov.dim(0) != topo.num_cells || av.dim(0) != topo.num_cells ||
      av.dim(1) % r != 0 || ov.dim(1) != 2 * av.dim(1)) {
    throw DimensionError("deform_sample_edges: offsets " + shape_str(ov.shape()) + ", attention " +
                         shape_str(av.shape()));
  }
  if (samples.num_cams != n || samples.num_cells != topo.num_cells) {
    throw DimensionError("deform_sample_edges: point samples do not match the graph");
  }
  const std::size_t k = av.dim(1) / r, h = mv.dim(1), w = mv.dim(2);
  const std::size_t map_size = channels * h * w;

  // Reference points in feature coordinates, per edge.
  auto refs = std::make_shared<std::vector<double>>(e * r * 2);
  auto valid = std::make_shared<std::vector<char>>(e * r);
  for (std::size_t i = 0; i < e; ++i) {
    for (std::size_t j = 0; j < r; ++j) {
      const std::size_t s = samples.index(topo.edge_cam[i], j, topo.edge_cell[i]);
      (*valid)[i * r + j] = samples.valid[s];
      (*refs)[(i * r + j) * 2] = to_feature(samples.uv[2 * s], stride);
      (*refs)[(i * r + j) * 2 + 1] = to_feature(samples.uv[2 * s + 1], stride);
    }
  }

  Tensor out(Shape{e, channels});
  parallel_for(e, [&](std::size_t i) {
    std::vector<double> tmp;
    const std::size_t p = topo.edge_cell[i];
    const MapView m{mv.data().data() + topo.edge_cam[i] * map_size, channels, h, w};
    deform_forward(m, refs->data() + i * r * 2, valid->data() + i * r, r, k, ov.data().data() + p * r * k * 2,
                   av.data().data() + p * r * k, &out[i * channels], tmp);
  }, 16);

  const std::vector<std::uint32_t> cells = topo.edge_cell, cams = topo.edge_cam;
  Var anchor = maps.requires_grad() ? maps : (offsets.requires_grad() ? offsets : attn);
  return maps.tape->record(
      std::move(out), {anchor, maps, offsets, attn},
      [maps, offsets, attn, refs, valid, cells, cams, channels, h, w, r, k, map_size](Tape& t, const Tensor& g) {
        const Tensor& mv = t.value(maps);
        const Tensor& ov = t.value(offsets);
        const Tensor& av = t.value(attn);
        double* gm = t.requires_grad(maps) ? t.grad(maps).data().data() : nullptr;
        double* go = t.requires_grad(offsets) ? t.grad(offsets).data().data() : nullptr;
        double* gat = t.requires_grad(attn) ? t.grad(attn).data().data() : nullptr;
        for (std::size_t i = 0; i < cells.size(); ++i) {
          const std::size_t p = cells[i];
          const MapView m{mv.data().data() + cams[i] * map_size, channels, h, w};
          deform_backward(m, refs->data() + i * r * 2, valid->data() + i * r, r, k, ov.data().data() + p * r * k * 2,
                          av.data().data() + p * r * k, g.data().data() + i * channels, gm ? gm + cams[i] * map_size : nullptr,
                          go ? go + p * r * k * 2 : nullptr, gat ? gat + p * r * k : nullptr);
        }
      });
}

DeformParams deform_params(const ParameterSet& ps, std::size_t layer) {
  const std::string p = layer_prefix(layer) + ".def.";
  return {ps.get(p + "off.w").tensor, ps.get(p + "off.b").tensor, ps.get(p + "att.w").tensor,
          ps.get(p + "att.b").tensor};
}

Tensor deform_sample(const Tensor& query, std::span<const RefPoint> refs, const Tensor& feature_map,
                     const DeformParams& params, std::size_t points_per_ref, double stride) {
  require_rank(feature_map, 3, "deform_sample");
  const std::size_t c = feature_map.dim(0), r = refs.size(), k = points_per_ref;
  if (query.size() != params.offset_w.dim(0) || params.offset_w.dim(1) != r * k * 2 ||
      params.attn_w.dim(1) != r * k) {
    throw DimensionError("deform_sample: query of " + std::to_string(query.size()) + " with offsets " +
                         shape_str(params.offset_w.shape()) + " for " + std::to_string(r) +
                         " references of " + std::to_string(k) + " points");
  }
  Tape tape(Tape::Mode::kNoGrad);
  Var q = tape.constant(query.reshaped({1, query.size()}));
  auto [off, att] = sampling_heads(q, tape.constant(params.offset_w), tape.constant(params.offset_b),
                                   tape.constant(params.attn_w), tape.constant(params.attn_b), r, k);
  std::vector<double> xy(2 * r);
  std::vector<char> valid(r);
  for (std::size_t j = 0; j < r; ++j) {
    xy[2 * j] = to_feature(refs[j].u, stride);
    xy[2 * j + 1] = to_feature(refs[j].v, stride);
    valid[j] = refs[j].valid ? 1 : 0;
  }
  Tensor out(Shape{c});
  std::vector<double> tmp;
  const MapView m{feature_map.data().data(), c, feature_map.dim(1), feature_map.dim(2)};
  deform_forward(m, xy.data(), valid.data(), r, k, off.value().data().data(), att.value().data().data(),
                 out.data().data(), tmp);
  return out;
}

ResCAOutput resca(Tape& tape, ParameterSet& ps, const EncoderConfig& cfg, const GatConfig& gat,
                  std::size_t layer, Var queries, Var maps, Var cam_nodes, const EncoderGeometry& geo,
                  bool training, Rng* rng) {
  const GraphTopology& topo = geo.topology;
  const std::size_t p = topo.num_cells, c = cfg.channels, e = topo.num_edges();
  const std::string pre = layer_prefix(layer);
  ResCAOutput out;
  Var edge_logits;
  if (cfg.use_gat) {
    edge_logits = gat_score(tape, ps, gat, queries, cam_nodes, topo, training, rng).edge_logits;
  } else {
    edge_logits = tape.constant(Tensor(Shape{e, 1}));
  }
  Var fused_w = fusion_weights(edge_logits, topo, geo.visibility, &out.field);
  if (e == 0) {
    out.edge_samples = tape.constant(Tensor(Shape{0, c}));
    out.pre_residual = tape.constant(Tensor(Shape{p, c}));
  } else {
    auto [off, att] = sampling_heads(queries, pvar(tape, ps, pre + ".def.off.w"), pvar(tape, ps, pre + ".def.off.b"),
                                     pvar(tape, ps, pre + ".def.att.w"), pvar(tape, ps, pre + ".def.att.b"),
                                     geo.grid.n_ref(), cfg.points_per_ref);
    out.edge_samples = deform_sample_edges(maps, c, off, att, topo, geo.samples, cfg.feature_stride);
    out.pre_residual = scatter_add_rows(mul_col(out.edge_samples, reshape(fused_w, {e})), topo.edge_cell, p);
  }
  Tensor cover(Shape{p});
  for (std::size_t i = 0; i < p; ++i) cover[i] = geo.covered[i] ? 1.0 : 0.0;
  Var proj = linear(out.pre_residual, pvar(tape, ps, pre + ".sca.out.w"), pvar(tape, ps, pre + ".sca.out.b"));
  if (training && cfg.dropout > 0.0) proj = dropout(proj, cfg.dropout, *rng);
  proj = mul_col(proj, tape.constant(std::move(cover)));
  out.out = layer_norm(add(queries, proj), pvar(tape, ps, pre + ".ln2.g"), pvar(tape, ps, pre + ".ln2.b"));
  return out;
}

Var temporal_self_attention(Tape& tape, ParameterSet& ps, std::size_t layer, Var queries,
                            const std::vector<Tensor>& history, const BevGridSpec& grid) {
  const std::size_t p = grid.num_cells();
  const Tensor& qv = queries.value();
  if (qv.rank() != 2 || qv.dim(0) != p) {
    throw DimensionError("temporal_self_attention: queries " + shape_str(qv.shape()) + " for " +
                         std::to_string(p) + " cells");
  }
  const std::size_t c = qv.dim(1);
  std::vector<Tensor> hist = history;
  if (hist.empty()) hist.emplace_back(Shape{p, c});
  const std::size_t t = hist.size(), group = t * 9;
  Tensor stacked(Shape{t * p, c});
  for (std::size_t i = 0; i < t; ++i) {
    if (hist[i].shape() != qv.shape()) {
      throw DimensionError("temporal_self_attention: history " + shape_str(hist[i].shape()) +
                           " vs queries " + shape_str(qv.shape()));
    }
    std::copy(hist[i].data().begin(), hist[i].data().end(), stacked.data().begin() + static_cast<std::ptrdiff_t>(i * p * c));
  }
  std::vector<std::uint32_t> idx(p * group, 0);
  Mask mask(Shape{p, group});
  const long rows = static_cast<long>(grid.rows), cols = static_cast<long>(grid.cols);
  for (std::size_t cell = 0; cell < p; ++cell) {
    const long r0 = static_cast<long>(cell / grid.cols), c0 = static_cast<long>(cell % grid.cols);
    std::size_t s = 0;
    for (std::size_t f = 0; f < t; ++f) {
      for (long dr = -1; dr <= 1; ++dr) {
        for (long dc = -1; dc <= 1; ++dc, ++s) {
          const long rr = r0 + dr, cc = c0 + dc;
          if (rr < 0 || cc < 0 || rr >= rows || cc >= cols) continue;
          idx[cell * group + s] = static_cast<std::uint32_t>(f * p + static_cast<std::size_t>(rr * cols + cc));
          mask.set(cell * group + s, true);
        }
      }
    }
  }
  const std::string pre = layer_prefix(layer) + ".tsa";
  Var h = tape.constant(std::move(stacked));
  Var q = matmul(queries, pvar(tape, ps, pre + ".wq"));
  Var k = gather_rows(matmul(h, pvar(tape, ps, pre + ".wk")), idx);
  Var v = gather_rows(matmul(h, pvar(tape, ps, pre + ".wv")), idx);
  Var scores = scale(group_dot(q, k, group), 1.0 / std::sqrt(static_cast<double>(c)));
  Var attended = group_weighted_sum(softmax_masked(scores, mask), v);
  return add(queries, linear(attended, pvar(tape, ps, pre + ".out.w"), pvar(tape, ps, pre + ".out.b")));
}

Tensor grid_positional_embedding(std::size_t rows, std::size_t cols, std::size_t channels) {
  if (channels % 4 != 0) throw ConfigError("positional embedding needs channels divisible by 4");
  const std::size_t quarter = channels / 4;
  Tensor pe(Shape{rows * cols, channels});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      double* row = &pe[(r * cols + c) * channels];
      for (std::size_t i = 0; i < quarter; ++i) {
        const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(quarter));
        row[2 * i] = std::sin(static_cast<double>(r) * freq);
        row[2 * i + 1] = std::cos(static_cast<double>(r) * freq);
        row[2 * quarter + 2 * i] = std::sin(static_cast<double>(c) * freq);
        row[2 * quarter + 2 * i + 1] = std::cos(static_cast<double>(c) * freq);
      }
    }
  }
  return pe;
}

EncoderOutput encode(Tape& tape, ParameterSet& ps, const EncoderConfig& cfg, const GatConfig& gat,
                     const EncoderGeometry& geo, const std::vector<Var>& features,
                     const std::vector<Tensor>& history, bool training, Rng* rng) {
  cfg.validate();
  const std::size_t n = geo.topology.num_cams, c = cfg.channels;
  if (features.size() != n || n == 0) {
    throw DimensionError("encode: " + std::to_string(features.size()) + " feature maps for " +
                         std::to_string(n) + " cameras");
  }
  for (const Var& f : features) {
    if (f.value().rank() != 3 || f.value().dim(0) != c || f.value().shape() != features[0].value().shape()) {
      throw DimensionError("encode: feature map " + shape_str(f.shape()) + " (expected " +
                           std::to_string(c) + " channels, equal sizes)");
    }
  }
  if (training && (cfg.dropout > 0.0 || gat.dropout > 0.0) && rng == nullptr) {
    throw ConfigError("encode: training needs an rng");
  }
  std::vector<Tensor> hist = history;
  if (cfg.temporal_frames < hist.size()) hist.resize(cfg.temporal_frames);

  Var maps = concat_rows(features);
  Var cams;
  if (cfg.use_camera_features) {
    std::vector<Var> pooled;
    pooled.reserve(n);
    for (const Var& f : features) pooled.push_back(pool_camera_node(f));
    cams = concat_rows(pooled);
  } else {
    cams = tape.constant(Tensor(Shape{n, c}));
  }

  EncoderOutput out;
  Var x = add(pvar(tape, ps, "enc.query"),
              tape.constant(grid_positional_embedding(geo.grid.rows, geo.grid.cols, c)));
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string pre = layer_prefix(l);
    x = layer_norm(temporal_self_attention(tape, ps, l, x, hist, geo.grid), pvar(tape, ps, pre + ".ln1.g"),
                   pvar(tape, ps, pre + ".ln1.b"));
    ResCAOutput sca = resca(tape, ps, cfg, gat, l, x, maps, cams, geo, training, rng);
    out.fields.push_back(std::move(sca.field));
    out.resca_pre.push_back(sca.pre_residual);
    out.edge_samples.push_back(sca.edge_samples);
    x = sca.out;
    Var hidden = relu(linear(x, pvar(tape, ps, pre + ".ffn.in.w"), pvar(tape, ps, pre + ".ffn.in.b")));
    Var y = linear(hidden, pvar(tape, ps, pre + ".ffn.out.w"), pvar(tape, ps, pre + ".ffn.out.b"));
    if (training && cfg.dropout > 0.0) y = dropout(y, cfg.dropout, *rng);
    x = layer_norm(add(x, y), pvar(tape, ps, pre + ".ln3.g"), pvar(tape, ps, pre + ".ln3.b"));
  }
  out.bev = x;
  return out;
}

}  // namespace rbev
