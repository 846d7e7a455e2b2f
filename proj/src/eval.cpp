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

#include "nowcast/eval.hpp"

#include <charconv>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "nowcast/errors.hpp"

namespace nowcast::eval {
namespace {

using json = nlohmann::json;

Score ratio(std::int64_t num, std::int64_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

void require_binary(const torch::Tensor& t, const char* what) {
  if (!(t.eq(0) | t.eq(1)).all().item<bool>()) {
    throw std::invalid_argument(std::string(what) + " must be a binary mask");
  }
}

json score_json(const Score& s) { return s ? json(*s) : json(nullptr); }

Score score_from(const json& j, const char* name) {
  if (!j.contains(name) || j[name].is_null()) return std::nullopt;
  return j[name].get<double>();
}

}  // namespace

ConfusionCounts confusion(const torch::Tensor& pred, const torch::Tensor& truth) {
  if (pred.sizes() != truth.sizes()) throw std::invalid_argument("confusion: shape mismatch");
  require_binary(pred, "prediction");
  require_binary(truth, "truth");
  const auto p = pred.to(torch::kBool);
  const auto t = truth.to(torch::kBool);
  ConfusionCounts c;
  c.tp = (p & t).sum().item<std::int64_t>();
  c.fp = (p & ~t).sum().item<std::int64_t>();
  c.fn = (~p & t).sum().item<std::int64_t>();
  c.tn = pred.numel() - c.tp - c.fp - c.fn;
  return c;
}

Score csi(const ConfusionCounts& c) { return ratio(c.tp, c.tp + c.fn + c.fp); }

MetricsReport metrics_report(const ConfusionCounts& c) {
  MetricsReport r;
  r.csi = csi(c);
  r.iou = ratio(c.tp, c.tp + c.fp + c.fn);
  // Derived from csi so the pooled identity f1 = 2 csi / (1 + csi) holds
  // bitwise; it agrees with 2TP / (2TP + FP + FN) to within rounding.
  if (r.csi) r.f1 = 2.0 * *r.csi / (1.0 + *r.csi);
  r.accuracy = ratio(c.tp + c.tn, c.total());
  r.precision = ratio(c.tp, c.tp + c.fp);
  r.recall = ratio(c.tp, c.tp + c.fn);
  return r;
}

torch::Tensor predict_with_threshold(const torch::Tensor& prob, double p) {
  if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("threshold must lie in (0, 1)");
  return prob.gt(p).to(torch::kFloat32);
}

const std::array<double, 9>& sweep_thresholds() {
  static const std::array<double, 9> bins = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  return bins;
}

const GroupSweep* SweepResult::find(const RegionKey& key) const {
  for (const auto& g : groups) {
    if (g.key == key) return &g;
  }
  return nullptr;
}

SweepResult threshold_sweep(const std::vector<SweepInput>& inputs) {
  SweepResult result;
  for (const auto& in : inputs) {
    if (in.probs.size() != in.truths.size()) {
      throw std::invalid_argument("sweep: probability/truth count mismatch for " + to_string(in.key));
    }
    if (in.probs.empty()) {
      result.warnings.push_back("no samples for " + to_string(in.key) + "; group skipped");
      continue;
    }
    std::vector<torch::Tensor> flat_p, flat_t;
    for (std::size_t i = 0; i < in.probs.size(); ++i) {
      if (in.probs[i].sizes() != in.truths[i].sizes()) {
        throw std::invalid_argument("sweep: shape mismatch in " + to_string(in.key));
      }
      flat_p.push_back(in.probs[i].reshape({-1}));
      flat_t.push_back(in.truths[i].reshape({-1}));
    }
    const auto prob = torch::cat(flat_p);
    const auto truth = torch::cat(flat_t);

    GroupSweep g;
    g.key = in.key;
    for (double p : sweep_thresholds()) {
      ThresholdPoint point;
      point.threshold = p;
      point.counts = confusion(predict_with_threshold(prob, p), truth);
      point.report = metrics_report(point.counts);
      if (point.report.csi && (!g.best_csi || *point.report.csi > *g.best_csi)) {
        g.best_csi = point.report.csi;
        g.best_threshold = p;
      }
      g.points.push_back(point);
    }
    result.groups.push_back(std::move(g));
  }
  return result;
}

std::string format_score(const Score& s) {
  if (!s) return "";
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, *s);
  return std::string(buf, res.ptr);
}

std::string sweep_csv(const SweepResult& result) {
  std::ostringstream out;
  out << "region,year,threshold,TP,FP,FN,TN,csi,f1,iou,accuracy,precision,recall\n";
  for (const auto& g : result.groups) {
    for (const auto& pt : g.points) {
      const auto& r = pt.report;
      out << g.key.region << ',' << g.key.year << ',' << format_score(pt.threshold) << ','
          << pt.counts.tp << ',' << pt.counts.fp << ',' << pt.counts.fn << ',' << pt.counts.tn
          << ',' << format_score(r.csi) << ',' << format_score(r.f1) << ','
          << format_score(r.iou) << ',' << format_score(r.accuracy) << ','
          << format_score(r.precision) << ',' << format_score(r.recall) << '\n';
    }
  }
  return out.str();
}

std::string sweep_json(const SweepResult& result) {
  json j;
  j["tie_break"] = SweepResult::kTieBreak;
  j["warnings"] = result.warnings;
  j["groups"] = json::array();
  for (const auto& g : result.groups) {
    json gj;
    gj["region"] = g.key.region;
    gj["year"] = g.key.year;
    gj["best_threshold"] = g.best_threshold ? json(*g.best_threshold) : json(nullptr);
    gj["best_csi"] = score_json(g.best_csi);
    gj["bins"] = json::array();
    for (const auto& pt : g.points) {
      gj["bins"].push_back({{"threshold", pt.threshold},
                            {"tp", pt.counts.tp},
                            {"fp", pt.counts.fp},
                            {"fn", pt.counts.fn},
                            {"tn", pt.counts.tn}});
    }
    j["groups"].push_back(std::move(gj));
  }
  return j.dump(2) + "\n";
}

SweepResult sweep_from_json(const std::string& text) {
  SweepResult result;
  try {
    const auto j = json::parse(text);
    result.warnings = j.at("warnings").get<std::vector<std::string>>();
    for (const auto& gj : j.at("groups")) {
      GroupSweep g;
      g.key = {gj.at("region").get<int>(), gj.at("year").get<int>()};
      if (!gj.at("best_threshold").is_null()) g.best_threshold = gj.at("best_threshold").get<double>();
      g.best_csi = score_from(gj, "best_csi");
      for (const auto& bj : gj.at("bins")) {
        ThresholdPoint pt;
        pt.threshold = bj.at("threshold").get<double>();
        pt.counts = {bj.at("tp").get<std::int64_t>(), bj.at("fp").get<std::int64_t>(),
                     bj.at("fn").get<std::int64_t>(), bj.at("tn").get<std::int64_t>()};
        pt.report = metrics_report(pt.counts);
        g.points.push_back(pt);
      }
      result.groups.push_back(std::move(g));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("sweep JSON malformed: ") + e.what());
  }
  return result;
}

}  // namespace nowcast::eval
