/* Copyright 2026 The Nowcast Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "nowcast/region_key.hpp"

namespace nowcast::eval {

struct ConfusionCounts {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t fn = 0;
  std::int64_t tn = 0;

  std::int64_t total() const { return tp + fp + fn + tn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
  friend ConfusionCounts operator+(ConfusionCounts a, const ConfusionCounts& b) { return a += b; }
  bool operator==(const ConfusionCounts&) const = default;
};

// Both masks must hold only 0/1 and share a shape.
ConfusionCounts confusion(const torch::Tensor& pred, const torch::Tensor& truth);

// std::nullopt is the undefined sentinel (zero denominator).
using Score = std::optional<double>;

Score csi(const ConfusionCounts& c);

struct MetricsReport {
  Score csi, f1, iou, accuracy, precision, recall;
  bool operator==(const MetricsReport&) const = default;
};

MetricsReport metrics_report(const ConfusionCounts& c);

// 1 where prob > p (strict), else 0. p must lie in (0, 1).
torch::Tensor predict_with_threshold(const torch::Tensor& prob, double p);

// 0.1, 0.2, ..., 0.9
const std::array<double, 9>& sweep_thresholds();

struct ThresholdPoint {
  double threshold = 0.0;
  ConfusionCounts counts;
  MetricsReport report;
};

struct GroupSweep {
  RegionKey key;
  std::vector<ThresholdPoint> points;
  // Highest defined CSI; ties go to the smaller threshold. Absent when every
  // bin is undefined.
  std::optional<double> best_threshold;
  Score best_csi;
};

struct SweepInput {
  RegionKey key;
  std::vector<torch::Tensor> probs;
  std::vector<torch::Tensor> truths;
};

struct SweepResult {
  static constexpr const char* kTieBreak = "smallest-threshold";
  std::vector<GroupSweep> groups;
  std::vector<std::string> warnings;  // one per skipped (empty) group

  const GroupSweep* find(const RegionKey& key) const;
};

SweepResult threshold_sweep(const std::vector<SweepInput>& inputs);

// region,year,threshold,TP,FP,FN,TN,csi,f1,iou,accuracy,precision,recall
// Undefined scores are written as empty fields.
std::string sweep_csv(const SweepResult& result);
std::string sweep_json(const SweepResult& result);
SweepResult sweep_from_json(const std::string& text);

std::string format_score(const Score& s);

}  // namespace nowcast::eval
