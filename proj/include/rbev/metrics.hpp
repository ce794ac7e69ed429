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

#include <array>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rbev/heads.hpp"

namespace rbev {

struct MetricConfig {
  std::vector<double> distance_thresholds{0.5, 1.0, 2.0, 4.0};
  std::vector<std::string> classes{"car", "truck", "pedestrian", "cyclist"};
  double tp_threshold = 2.0;
  double min_recall = 0.1;
  double min_precision = 0.1;

  void validate() const;
};

// One list of boxes per frame.
using Frames = std::vector<std::vector<Box3D>>;

struct MatchResult {
  // In descending score order (ties keep input order).
  std::vector<char> tp;
  std::vector<double> scores;
  // (frame, prediction index, ground-truth index) for each true positive.
  std::vector<std::array<std::size_t, 3>> pairs;
  std::size_t num_gt = 0;
};

// Greedy matching of `label` predictions to the nearest unmatched
// ground truth of the same frame and class by BEV centre distance <= d.
MatchResult match(const Frames& preds, const Frames& gts, int label, double d);
MatchResult match(const std::vector<Box3D>& preds, const std::vector<Box3D>& gts, int label, double d);

// Precision sampled at 101 recall points (linear interpolation, zero past
// the last recall), recall below min_recall dropped, precision offset by
// min_precision and renormalized. `tp` need not be sorted.
double average_precision(std::span<const char> tp, std::span<const double> scores, std::size_t num_gt,
                         double min_recall = 0.1, double min_precision = 0.1);

struct TpErrors {
  double ate = 0.0;  // BEV centre distance, m
  double ase = 0.0;  // 1 - IoU after aligning centres and headings
  double aoe = 0.0;  // |wrapped yaw difference|, rad
  double ave = 0.0;  // velocity L2, m/s
  double aae = 0.0;  // always 0: the data carries no attributes
  std::size_t count = 0;
};

double aligned_iou(const Box3D& a, const Box3D& b);
// Means over (prediction, ground truth) pairs; all zero when empty.
TpErrors tp_errors(std::span<const std::pair<Box3D, Box3D>> pairs);

// (5 * mAP + sum over five errors of (1 - min(1, e))) / 10.
double nds(double map, const std::array<double, 5>& mtp);

struct ClassReport {
  std::string name;
  std::vector<double> ap;  // per threshold
  double mean_ap = 0.0;
  TpErrors errors;
  std::size_t num_gt = 0;
  std::size_t num_pred = 0;
};

struct MetricReport {
  std::vector<double> thresholds;
  std::vector<ClassReport> classes;  // classes with ground truth only
  double map = 0.0;
  double mate = 0.0, mase = 0.0, maoe = 0.0, mave = 0.0, maae = 0.0;
  double nds = 0.0;

  std::array<double, 5> mtp() const { return {mate, mase, maoe, mave, maae}; }
};

// Box labels index cfg.classes. Classes absent from the ground truth are
// left out of every mean. A class with ground truth but no true positive at
// tp_threshold scores error 1 on each metric except the attribute error.
MetricReport evaluate(const Frames& preds, const Frames& gts, const MetricConfig& cfg = {});

// Throws NumericError unless values lie in range and NDS equals the
// formula applied to the reported parts.
void check_report(const MetricReport& r);

std::string report_to_csv(const MetricReport& r);
std::string report_to_json(const MetricReport& r);

}  // namespace rbev
