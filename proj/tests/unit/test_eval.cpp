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

#include <doctest.h>

#include <torch/torch.h>

#include <cmath>
#include <random>

#include "nowcast/errors.hpp"
#include "nowcast/eval.hpp"

using namespace nowcast;
using namespace nowcast::eval;

namespace {

torch::Tensor mask(std::initializer_list<float> v) { return torch::tensor(std::vector<float>(v)); }

ConfusionCounts naive_confusion(const torch::Tensor& pred, const torch::Tensor& truth) {
  const auto p = pred.reshape({-1}).contiguous();
  const auto t = truth.reshape({-1}).contiguous();
  ConfusionCounts c;
  for (std::int64_t i = 0; i < p.numel(); ++i) {
    const bool pi = p[i].item<float>() == 1.0f;
    const bool ti = t[i].item<float>() == 1.0f;
    if (pi && ti) ++c.tp;
    else if (pi) ++c.fp;
    else if (ti) ++c.fn;
    else ++c.tn;
  }
  return c;
}

double ulp_distance(double a, double b) {
  if (a == b) return 0.0;
  return std::abs(a - b) / (std::nextafter(std::max(a, b), 2.0) - std::max(a, b));
}

}  // namespace

TEST_CASE("confusion on small masks") {
  CHECK(confusion(mask({1, 1, 0, 0}), mask({1, 0, 1, 0})) == ConfusionCounts{1, 1, 1, 1});
  CHECK(confusion(mask({1, 1, 1}), mask({1, 1, 1})) == ConfusionCounts{3, 0, 0, 0});
  CHECK(confusion(mask({0, 0}), mask({0, 0})) == ConfusionCounts{0, 0, 0, 2});
  CHECK(confusion(mask({0, 0, 0}), mask({1, 1, 0})) == ConfusionCounts{0, 0, 2, 1});
}

TEST_CASE("confusion matches a naive loop on random 4x4x4 masks") {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(1);
  for (int trial = 0; trial < 25; ++trial) {
    const auto p = (torch::rand({4, 4, 4}, gen) > 0.5).to(torch::kFloat32);
    const auto t = (torch::rand({4, 4, 4}, gen) > 0.7).to(torch::kFloat32);
    const auto c = confusion(p, t);
    CHECK(c == naive_confusion(p, t));
    CHECK(c.total() == 64);
  }
}

TEST_CASE("pooling counts is associative") {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(2);
  std::vector<torch::Tensor> ps, ts;
  for (int i = 0; i < 3; ++i) {
    ps.push_back((torch::rand({2, 3, 3}, gen) > 0.5).to(torch::kFloat32));
    ts.push_back((torch::rand({2, 3, 3}, gen) > 0.5).to(torch::kFloat32));
  }
  const auto a = confusion(ps[0], ts[0]);
  const auto b = confusion(ps[1], ts[1]);
  const auto c = confusion(ps[2], ts[2]);
  CHECK((a + b) + c == a + (b + c));
  CHECK(a + b + c == confusion(torch::stack(ps), torch::stack(ts)));
}

TEST_CASE("confusion rejects malformed input") {
  CHECK_THROWS_AS(confusion(mask({1, 0}), mask({1, 0, 1})), std::invalid_argument);
  CHECK_THROWS_AS(confusion(mask({0.5f, 0}), mask({1, 0})), std::invalid_argument);
  CHECK_THROWS_AS(confusion(mask({1, 0}), mask({2, 0})), std::invalid_argument);
}

TEST_CASE("csi and metrics on fixed counts") {
  CHECK(*csi({1, 1, 1, 1}) == doctest::Approx(1.0 / 3.0));
  CHECK(*csi({3, 0, 0, 0}) == 1.0);
  CHECK(*csi({0, 2, 3, 5}) == 0.0);
  CHECK_FALSE(csi({0, 0, 0, 10}).has_value());

  const auto r = metrics_report({6, 2, 4, 88});
  CHECK(*r.csi == doctest::Approx(0.5));
  CHECK(*r.iou == *r.csi);
  CHECK(*r.f1 == doctest::Approx(12.0 / 18.0));
  CHECK(*r.accuracy == doctest::Approx(0.94));
  CHECK(*r.precision == doctest::Approx(0.75));
  CHECK(*r.recall == doctest::Approx(0.6));

  const auto empty = metrics_report({0, 0, 0, 5});
  CHECK_FALSE(empty.csi);
  CHECK_FALSE(empty.f1);
  CHECK_FALSE(empty.iou);
  CHECK_FALSE(empty.precision);
  CHECK_FALSE(empty.recall);
  CHECK(*empty.accuracy == 1.0);

  const auto nothing = metrics_report({});
  CHECK_FALSE(nothing.accuracy);
}

TEST_CASE("pooled f1 identity holds for random counts") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::int64_t> dist(0, 5000);
  int checked = 0;
  for (int i = 0; i < 1000; ++i) {
    const ConfusionCounts c{dist(rng), dist(rng), dist(rng), dist(rng)};
    const auto r = metrics_report(c);
    if (!r.csi) continue;
    ++checked;
    CHECK(*r.f1 == 2.0 * *r.csi / (1.0 + *r.csi));
    const double from_counts = 2.0 * static_cast<double>(c.tp) /
                               static_cast<double>(2 * c.tp + c.fp + c.fn);
    CHECK(ulp_distance(*r.f1, from_counts) <= 2.0);
  }
  CHECK(checked > 990);
}

TEST_CASE("threshold predictions") {
  const auto prob = mask({0.05f, 0.5f, 0.51f, 0.95f});
  CHECK(torch::equal(predict_with_threshold(prob, 0.5), mask({0, 0, 1, 1})));
  CHECK(torch::equal(predict_with_threshold(prob, 0.05), mask({0, 1, 1, 1})));
  CHECK(torch::equal(predict_with_threshold(mask({0.0f, 1.0f}), 0.9), mask({0, 1})));
  CHECK_THROWS_AS(predict_with_threshold(prob, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(predict_with_threshold(prob, 1.0), std::invalid_argument);
}

TEST_CASE("positives shrink monotonically as the threshold rises") {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(4);
  const auto prob = torch::rand({3, 8, 8}, gen);
  std::int64_t previous = prob.numel() + 1;
  for (double p : sweep_thresholds()) {
    const auto positives = predict_with_threshold(prob, p).sum().item<std::int64_t>();
    CHECK(positives <= previous);
    previous = positives;
  }
}

TEST_CASE("sweep bins and selection") {
  CHECK(sweep_thresholds().size() == 9);
  CHECK(sweep_thresholds().front() == doctest::Approx(0.1));
  CHECK(sweep_thresholds().back() == doctest::Approx(0.9));

  SUBCASE("ties resolve to the smallest threshold") {
    // Every probability sits far from the bins, so 0.3..0.7 score identically.
    SweepInput in{{0, 2019}, {mask({0.25f, 0.75f, 0.75f, 0.25f})}, {mask({0, 1, 1, 0})}};
    const auto res = threshold_sweep({in});
    REQUIRE(res.groups.size() == 1);
    CHECK(*res.groups[0].best_csi == 1.0);
    CHECK(*res.groups[0].best_threshold == doctest::Approx(0.3));
  }
  SUBCASE("low thresholds win for under-confident positives") {
    SweepInput in{{3, 2020}, {mask({0.15f, 0.18f, 0.05f, 0.02f})}, {mask({1, 1, 0, 0})}};
    const auto res = threshold_sweep({in});
    CHECK(*res.groups[0].best_threshold == doctest::Approx(0.1));
  }
  SUBCASE("the reported best is the maximum over the bins") {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(5);
    SweepInput in{{1, 2019}, {}, {}};
    for (int i = 0; i < 3; ++i) {
      const auto truth = (torch::rand({4, 6, 6}, gen) > 0.8).to(torch::kFloat32);
      in.probs.push_back((0.6 * truth + 0.5 * torch::rand({4, 6, 6}, gen)).clamp(0, 1));
      in.truths.push_back(truth);
    }
    const auto res = threshold_sweep({in});
    const auto& g = res.groups[0];
    REQUIRE(g.points.size() == 9);
    for (const auto& pt : g.points) {
      CHECK(pt.counts == confusion(predict_with_threshold(torch::stack(in.probs), pt.threshold),
                                   torch::stack(in.truths)));
      if (pt.report.csi) CHECK(*pt.report.csi <= *g.best_csi);
    }
  }
  SUBCASE("all-negative groups report no best threshold") {
    SweepInput in{{2, 2019}, {mask({0.0f, 0.05f})}, {mask({0, 0})}};
    const auto res = threshold_sweep({in});
    CHECK_FALSE(res.groups[0].best_threshold);
    CHECK_FALSE(res.groups[0].best_csi);
  }
  SUBCASE("empty groups are skipped with a warning") {
    SweepInput empty{{4, 2020}, {}, {}};
    SweepInput full{{5, 2020}, {mask({0.9f})}, {mask({1})}};
    const auto res = threshold_sweep({empty, full});
    CHECK(res.groups.size() == 1);
    REQUIRE(res.warnings.size() == 1);
    CHECK(res.warnings[0].find("r4_y2020") != std::string::npos);
    CHECK(res.find({4, 2020}) == nullptr);
    CHECK(res.find({5, 2020}) != nullptr);
  }
  CHECK_THROWS_AS(threshold_sweep({{{0, 2019}, {mask({0.5f})}, {}}}), std::invalid_argument);
}

TEST_CASE("sweep serialisation") {
  SweepInput a{{0, 2019}, {mask({0.25f, 0.75f})}, {mask({0, 1})}};
  SweepInput b{{6, 2020}, {mask({0.0f})}, {mask({0})}};
  const auto res = threshold_sweep({a, b, {{1, 2019}, {}, {}}});

  const auto csv = sweep_csv(res);
  CHECK(csv.starts_with("region,year,threshold,TP,FP,FN,TN,csi,f1,iou,accuracy,precision,recall\n"));
  CHECK(csv.find("\n0,2019,0.3,1,0,0,1,1,1,1,1,1,1\n") != std::string::npos);
  CHECK(csv.find("\n6,2020,0.5,0,0,0,1,,,,1,,\n") != std::string::npos);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 2 * 9);

  const auto back = sweep_from_json(sweep_json(res));
  REQUIRE(back.groups.size() == 2);
  CHECK(back.warnings == res.warnings);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(back.groups[i].key == res.groups[i].key);
    CHECK(back.groups[i].best_threshold == res.groups[i].best_threshold);
    CHECK(back.groups[i].best_csi == res.groups[i].best_csi);
    for (std::size_t k = 0; k < 9; ++k) {
      CHECK(back.groups[i].points[k].counts == res.groups[i].points[k].counts);
      CHECK(back.groups[i].points[k].report == res.groups[i].points[k].report);
    }
  }
  CHECK_THROWS_AS(sweep_from_json("{\"groups\": 3}"), FormatError);
  CHECK_THROWS_AS(sweep_from_json("not json"), FormatError);
}

TEST_CASE("format_score") {
  CHECK(format_score(std::nullopt).empty());
  CHECK(format_score(0.5) == "0.5");
  CHECK(format_score(0.1) == "0.1");
  const double third = 1.0 / 3.0;
  CHECK(std::stod(format_score(third)) == third);
}
