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

#include "rbev/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "rbev/geometry.hpp"

namespace rbev {
namespace {

std::vector<std::size_t> score_order(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

// numpy.interp with right = 0: xp non-decreasing, may repeat.
double interp(double x, const std::vector<double>& xp, const std::vector<double>& fp) {
  const auto it = std::upper_bound(xp.begin(), xp.end(), x);
  const long j = static_cast<long>(it - xp.begin()) - 1;
  const long n = static_cast<long>(xp.size());
  if (j < 0) return fp.front();
  if (j == n - 1) return x == xp.back() ? fp.back() : 0.0;
  if (xp[j] == x) return fp[j];
  const double t = (x - xp[j]) / (xp[j + 1] - xp[j]);
  return fp[j] + t * (fp[j + 1] - fp[j]);
}

void require_unit(double v, const char* what) {
  if (!(v >= 0.0 && v <= 1.0)) throw NumericError(std::string("metrics: ") + what + " outside [0, 1]");
}

}  // namespace

void MetricConfig::validate() const {
  if (distance_thresholds.empty()) throw ConfigError("metrics: no distance thresholds");
  for (std::size_t i = 0; i < distance_thresholds.size(); ++i) {
    if (!(distance_thresholds[i] > 0.0)) throw ConfigError("metrics: thresholds must be positive");
    if (i > 0 && !(distance_thresholds[i] > distance_thresholds[i - 1])) {
      throw ConfigError("metrics: thresholds must be strictly ascending");
    }
  }
  if (classes.empty()) throw ConfigError("metrics: no classes");
  if (!(tp_threshold > 0.0)) throw ConfigError("metrics: tp_threshold must be positive");
  if (!(min_recall >= 0.0 && min_recall < 1.0) || !(min_precision >= 0.0 && min_precision < 1.0)) {
    throw ConfigError("metrics: recall / precision floors must be in [0, 1)");
  }
}

MatchResult match(const Frames& preds, const Frames& gts, int label, double d) {
  if (preds.size() != gts.size()) {
    throw DimensionError("match: " + std::to_string(preds.size()) + " prediction frames vs " +
                         std::to_string(gts.size()) + " ground-truth frames");
  }
  struct Cand {
    std::size_t frame, index;
    double score;
  };
  std::vector<Cand> cands;
  MatchResult r;
  std::vector<std::vector<char>> taken(gts.size());
  for (std::size_t f = 0; f < gts.size(); ++f) {
    taken[f].assign(gts[f].size(), 0);
    for (const Box3D& g : gts[f]) r.num_gt += g.label == label;
    for (std::size_t i = 0; i < preds[f].size(); ++i)
      if (preds[f][i].label == label) cands.push_back({f, i, preds[f][i].score});
  }
  std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) { return a.score > b.score; });
  for (const Cand& c : cands) {
    const Box3D& p = preds[c.frame][c.index];
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < gts[c.frame].size(); ++j) {
      const Box3D& g = gts[c.frame][j];
      if (g.label != label || taken[c.frame][j]) continue;
      const double dist = std::hypot(p.x - g.x, p.y - g.y);
      if (dist < best) {
        best = dist;
        best_j = j;
      }
    }
    const bool hit = best <= d;
    if (hit) {
      taken[c.frame][best_j] = 1;
      r.pairs.push_back({c.frame, c.index, best_j});
    }
    r.tp.push_back(hit ? 1 : 0);
    r.scores.push_back(c.score);
  }
  return r;
}

MatchResult match(const std::vector<Box3D>& preds, const std::vector<Box3D>& gts, int label, double d) {
  return match(Frames{preds}, Frames{gts}, label, d);
}

double average_precision(std::span<const char> tp, std::span<const double> scores, std::size_t num_gt,
                         double min_recall, double min_precision) {
  if (tp.size() != scores.size()) throw DimensionError("average_precision: labels and scores differ in length");
  if (num_gt == 0 || tp.empty()) return 0.0;
  const auto order = score_order(scores);
  std::vector<double> rec, prec;
  double ctp = 0.0, cfp = 0.0;
  for (std::size_t i : order) {
    (tp[i] ? ctp : cfp) += 1.0;
    rec.push_back(ctp / static_cast<double>(num_gt));
    prec.push_back(ctp / (ctp + cfp));
  }
  constexpr int kPoints = 101;
  const int first = static_cast<int>(std::round(100.0 * min_recall)) + 1;
  // Each sample is renormalized on its own, so a perfect curve sums exact ones.
  double acc = 0.0;
  int count = 0;
  for (int k = first; k < kPoints; ++k) {
    const double p = interp(static_cast<double>(k) / 100.0, rec, prec);
    acc += std::max(0.0, p - min_precision) / (1.0 - min_precision);
    ++count;
  }
  if (count == 0) return 0.0;
  return acc / static_cast<double>(count);
}

double aligned_iou(const Box3D& a, const Box3D& b) {
  const double inter = std::min(a.l, b.l) * std::min(a.w, b.w) * std::min(a.h, b.h);
  const double uni = a.l * a.w * a.h + b.l * b.w * b.h - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

TpErrors tp_errors(std::span<const std::pair<Box3D, Box3D>> pairs) {
  TpErrors e;
  e.count = pairs.size();
  if (pairs.empty()) return e;
  for (const auto& [p, g] : pairs) {
    e.ate += std::hypot(p.x - g.x, p.y - g.y);
    e.ase += 1.0 - aligned_iou(p, g);
    e.aoe += std::abs(wrap_angle(p.yaw - g.yaw));
    e.ave += std::hypot(p.vx - g.vx, p.vy - g.vy);
  }
  const double n = static_cast<double>(pairs.size());
  e.ate /= n;
  e.ase /= n;
  e.aoe /= n;
  e.ave /= n;
  return e;
}

double nds(double map, const std::array<double, 5>& mtp) {
  double s = 5.0 * map;
  for (double e : mtp) s += 1.0 - std::min(1.0, e);
  return s / 10.0;
}

MetricReport evaluate(const Frames& preds, const Frames& gts, const MetricConfig& cfg) {
  cfg.validate();
  if (preds.size() != gts.size()) {
    throw DimensionError("evaluate: " + std::to_string(preds.size()) + " prediction frames vs " +
                         std::to_string(gts.size()) + " ground-truth frames");
  }
  const int nc = static_cast<int>(cfg.classes.size());
  for (const Frames* fs : {&preds, &gts})
    for (const auto& f : *fs)
      for (const Box3D& b : f)
        if (b.label < 0 || b.label >= nc) {
          throw ConfigError("evaluate: box label " + std::to_string(b.label) + " outside the class list");
        }

  MetricReport r;
  r.thresholds = cfg.distance_thresholds;
  for (int c = 0; c < nc; ++c) {
    ClassReport cr;
    cr.name = cfg.classes[static_cast<std::size_t>(c)];
    for (const double d : cfg.distance_thresholds) {
      const MatchResult m = match(preds, gts, c, d);
      cr.num_gt = m.num_gt;
      cr.num_pred = m.tp.size();
      cr.ap.push_back(average_precision(m.tp, m.scores, m.num_gt, cfg.min_recall, cfg.min_precision));
    }
    if (cr.num_gt == 0) continue;
    cr.mean_ap = std::accumulate(cr.ap.begin(), cr.ap.end(), 0.0) / static_cast<double>(cr.ap.size());
    const MatchResult tpm = match(preds, gts, c, cfg.tp_threshold);
    std::vector<std::pair<Box3D, Box3D>> pairs;
    for (const auto& [f, i, j] : tpm.pairs) pairs.emplace_back(preds[f][i], gts[f][j]);
    if (pairs.empty()) {
      cr.errors = {1.0, 1.0, 1.0, 1.0, 0.0, 0};
    } else {
      cr.errors = tp_errors(pairs);
    }
    r.classes.push_back(cr);
  }
  if (!r.classes.empty()) {
    const double n = static_cast<double>(r.classes.size());
    for (const ClassReport& cr : r.classes) {
      r.map += cr.mean_ap / n;
      r.mate += cr.errors.ate / n;
      r.mase += cr.errors.ase / n;
      r.maoe += cr.errors.aoe / n;
      r.mave += cr.errors.ave / n;
      r.maae += cr.errors.aae / n;
    }
  }
  r.nds = nds(r.map, r.mtp());
  check_report(r);
  return r;
}

void check_report(const MetricReport& r) {
  require_unit(r.map, "mAP");
  require_unit(r.nds, "NDS");
  for (double e : r.mtp())
    if (!(e >= 0.0) || !std::isfinite(e)) throw NumericError("metrics: negative or non-finite error metric");
  for (const ClassReport& c : r.classes)
    for (double ap : c.ap) require_unit(ap, "AP");
  if (r.nds != nds(r.map, r.mtp())) throw NumericError("metrics: NDS does not match its parts");
}

std::string report_to_csv(const MetricReport& r) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "class";
  for (double d : r.thresholds) os << ",AP@" << d;
  os << ",mAP,mATE,mASE,mAOE,mAVE,mAAE,NDS\n";
  for (const ClassReport& c : r.classes) {
    os << c.name;
    for (double ap : c.ap) os << ',' << ap;
    os << ',' << c.mean_ap << ',' << c.errors.ate << ',' << c.errors.ase << ',' << c.errors.aoe << ','
       << c.errors.ave << ',' << c.errors.aae << ",\n";
  }
  os << "all";
  for (std::size_t k = 0; k < r.thresholds.size(); ++k) {
    double s = 0.0;
    for (const ClassReport& c : r.classes) s += c.ap[k];
    os << ',' << (r.classes.empty() ? 0.0 : s / static_cast<double>(r.classes.size()));
  }
  os << ',' << r.map << ',' << r.mate << ',' << r.mase << ',' << r.maoe << ',' << r.mave << ',' << r.maae << ','
     << r.nds << '\n';
  return os.str();
}

std::string report_to_json(const MetricReport& r) {
  nlohmann::json classes = nlohmann::json::array();
  for (const ClassReport& c : r.classes) {
    classes.push_back({{"class", c.name},
                       {"ap", c.ap},
                       {"mAP", c.mean_ap},
                       {"ATE", c.errors.ate},
                       {"ASE", c.errors.ase},
                       {"AOE", c.errors.aoe},
                       {"AVE", c.errors.ave},
                       {"AAE", c.errors.aae},
                       {"num_gt", c.num_gt},
                       {"num_pred", c.num_pred}});
  }
  const nlohmann::json j{{"thresholds", r.thresholds}, {"classes", classes}, {"mAP", r.map},
                         {"mATE", r.mate},             {"mASE", r.mase},    {"mAOE", r.maoe},
                         {"mAVE", r.mave},             {"mAAE", r.maae},    {"NDS", r.nds}};
  return j.dump(2);
}

}  // namespace rbev
