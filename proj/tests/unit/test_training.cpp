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
#include <type_traits>

#include "nowcast/errors.hpp"
#include "nowcast/training.hpp"

using namespace nowcast;
using namespace nowcast::training;

namespace {

model::BackboneConfig tiny_config() {
  model::BackboneConfig c;
  c.levels = 1;
  c.base_channels = 4;
  c.out_frames = 3;
  c.dropout_rate = 0.0;
  return c;
}

TrainConfig quick_config(int epochs) {
  TrainConfig c;
  c.learning_rate = 3e-3;
  c.max_epochs = epochs;
  c.patience = 0;
  c.batch_size = 2;
  c.distill_epochs = 2;
  c.finetune_epochs = 2;
  c.seed = 11;
  return c;
}

LabeledSet toy_set(int n, std::vector<RegionKey> keys, std::uint64_t seed) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  LabeledSet set;
  for (int i = 0; i < n; ++i) {
    LabeledExample ex;
    ex.x = torch::randn({11, 4, 4, 4}, gen);
    ex.target = (ex.x.slice(0, 0, 1).slice(1, 0, 1).expand({1, 3, 4, 4}) > 0.3).to(torch::kFloat32);
    ex.key = keys[static_cast<std::size_t>(i) % keys.size()];
    set.push_back(ex);
  }
  return set;
}

UnlabeledSet strip(const LabeledSet& set) {
  UnlabeledSet out;
  for (const auto& ex : set) out.push_back({ex.x, ex.key});
  return out;
}

// Direct formula, scalar loops in double.
double dice_bce_oracle(const torch::Tensor& pred, const torch::Tensor& target) {
  const auto p = pred.to(torch::kFloat64).contiguous();
  const auto t = target.to(torch::kFloat64).contiguous();
  const double* pp = p.data_ptr<double>();
  const double* tp = t.data_ptr<double>();
  const auto n = p.numel();
  double bce = 0.0, inter = 0.0, sp = 0.0, st = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double q = std::clamp(pp[i], 1e-7, 1.0 - 1e-7);
    bce += -(tp[i] * std::log(q) + (1.0 - tp[i]) * std::log(1.0 - q));
    inter += q * tp[i];
    sp += q;
    st += tp[i];
  }
  return bce / static_cast<double>(n) + 1.0 - (2.0 * inter + 1.0) / (sp + st + 1.0);
}

double dbl(const torch::Tensor& t) { return t.item<double>(); }

template <typename T>
concept HasTarget = requires(T e) { e.target; };

}  // namespace

TEST_CASE("DiceBCE on small examples") {
  SUBCASE("perfect prediction of positives") {
    const auto ones = torch::ones({1, 1, 1, 2, 2}, torch::kFloat64);
    const auto terms = dice_bce_terms(ones, ones);
    CHECK(dbl(terms.bce) == doctest::Approx(-std::log(1.0 - 1e-7)).epsilon(1e-9));
    const double dice = 1.0 - (2.0 * 4 * (1 - 1e-7) + 1.0) / (4 * (1 - 1e-7) + 4 + 1.0);
    CHECK(dbl(terms.dice) == doctest::Approx(dice).epsilon(1e-9));
    CHECK(dbl(terms.total()) < 1e-6);
  }
  SUBCASE("all-zero target and prediction") {
    const auto zeros = torch::zeros({1, 1, 2, 2, 2}, torch::kFloat64);
    const auto terms = dice_bce_terms(zeros, zeros);
    CHECK(dbl(terms.bce) == doctest::Approx(-std::log(1.0 - 1e-7)).epsilon(1e-9));
    // Smoothing keeps dice defined: 1 - 1 / (8e-7 + 1).
    CHECK(dbl(terms.dice) == doctest::Approx(1.0 - 1.0 / (8e-7 + 1.0)).epsilon(1e-9));
  }
  SUBCASE("uniform 0.5 against half positives") {
    const auto p = torch::full({1, 1, 1, 1, 4}, 0.5, torch::kFloat64);
    const auto t = torch::tensor({0.0, 1.0, 0.0, 1.0}, torch::kFloat64).reshape({1, 1, 1, 1, 4});
    CHECK(dbl(dice_bce_loss(p, t)) == doctest::Approx(std::log(2.0) + 1.0 - 3.0 / 5.0).epsilon(1e-12));
  }
  SUBCASE("confident wrong prediction is clamped, not infinite") {
    const auto p = torch::zeros({1, 1, 1, 1, 1}, torch::kFloat64);
    const auto t = torch::ones({1, 1, 1, 1, 1}, torch::kFloat64);
    const double loss = dbl(dice_bce_loss(p, t));
    CHECK(std::isfinite(loss));
    CHECK(loss == doctest::Approx(-std::log(1e-7) + 1.0 - (2e-7 + 1.0) / (1e-7 + 2.0)).epsilon(1e-9));
  }
  CHECK_THROWS_AS(dice_bce_loss(torch::zeros({2}), torch::zeros({3})), std::invalid_argument);
}

TEST_CASE("DiceBCE agrees with the scalar-loop formula on random data") {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = torch::rand({2, 1, 2, 4, 4}, gen, torch::kFloat64);
    const auto t = (torch::rand({2, 1, 2, 4, 4}, gen, torch::kFloat64) > 0.6).to(torch::kFloat64);
    const auto terms = dice_bce_terms(p, t);
    CHECK(std::abs(dbl(terms.total()) - dice_bce_oracle(p, t)) < 1e-6);
    CHECK(dbl(terms.total()) == doctest::Approx(dbl(terms.bce) + dbl(terms.dice)).epsilon(1e-15));

    const auto pf = p.to(torch::kFloat32);
    CHECK(std::abs(dbl(dice_bce_loss(pf, t.to(torch::kFloat32))) - dice_bce_oracle(pf, t)) < 1e-5);
  }
}

TEST_CASE("mix_batch") {
  TrainBatch b;
  b.x = torch::arange(4, torch::kFloat32).reshape({4, 1});
  b.y = torch::tensor({1.0f, 0.0f, 1.0f, 0.0f}).reshape({4, 1});
  b.regions = {0, 1, 2, 3};
  const std::vector<std::int64_t> perm{1, 0, 3, 2};

  const auto one = mix_batch(b, 1.0, perm);
  CHECK(torch::equal(one.x, b.x));
  CHECK(torch::equal(one.y, b.y));
  const auto zero = mix_batch(b, 0.0, perm);
  CHECK(torch::equal(zero.x, torch::tensor({1.0f, 0.0f, 3.0f, 2.0f}).reshape({4, 1})));
  CHECK(torch::equal(zero.y, torch::tensor({0.0f, 1.0f, 0.0f, 1.0f}).reshape({4, 1})));
  CHECK(zero.regions == b.regions);

  const auto half = mix_batch(b, 0.5, perm);
  CHECK(torch::allclose(half.x, torch::tensor({0.5f, 0.5f, 2.5f, 2.5f}).reshape({4, 1})));
  CHECK(torch::allclose(half.y, torch::full({4, 1}, 0.5f)));

  CHECK_THROWS_AS(mix_batch(b, 1.5, perm), std::invalid_argument);
  CHECK_THROWS_AS(mix_batch(b, 0.5, {0, 1}), std::invalid_argument);
  TrainBatch empty;
  empty.x = torch::zeros({0, 1});
  empty.y = torch::zeros({0, 1});
  std::mt19937_64 rng(1);
  CHECK_THROWS_AS(mixup_batch(empty, 1.0, rng), std::invalid_argument);
}

TEST_CASE("mixup outputs stay inside the convex hull of their sources") {
  std::mt19937_64 rng(2);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(2);
  for (int trial = 0; trial < 50; ++trial) {
    TrainBatch b;
    b.x = torch::randn({5, 3}, gen);
    b.y = (torch::rand({5, 3}, gen) > 0.5).to(torch::kFloat32);
    b.regions = {0, 0, 1, 1, 2};
    const auto draw = mixup_batch(b, 1.0, rng);
    CHECK(draw.lambda >= 0.0);
    CHECK(draw.lambda <= 1.0);
    const auto xj = b.x.index_select(0, torch::tensor(draw.perm, torch::kInt64));
    const auto lo = torch::minimum(b.x, xj) - 1e-6;
    const auto hi = torch::maximum(b.x, xj) + 1e-6;
    CHECK((draw.batch.x >= lo).all().item<bool>());
    CHECK((draw.batch.x <= hi).all().item<bool>());
    CHECK((draw.batch.y >= 0).all().item<bool>());
    CHECK((draw.batch.y <= 1).all().item<bool>());
    CHECK(draw.batch.regions == b.regions);
  }
}

TEST_CASE("Beta(1,1) draws have mean near one half") {
  std::mt19937_64 rng(3);
  double sum = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) sum += sample_beta(1.0, rng);
  CHECK(std::abs(sum / n - 0.5) < 0.01);
  CHECK_THROWS_AS(sample_beta(0.0, rng), std::invalid_argument);
}

TEST_CASE("train config json round trip and validation") {
  auto c = quick_config(7);
  c.srip.lambda = 0.25;
  c.mixup = false;
  const auto back = train_config_from_json(to_json(c));
  CHECK(back.max_epochs == 7);
  CHECK(back.srip.lambda == 0.25);
  CHECK_FALSE(back.mixup);
  CHECK(back.learning_rate == c.learning_rate);

  auto bad = quick_config(1);
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = quick_config(1);
  bad.learning_rate = -1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("backbone training is deterministic under a fixed seed") {
  const auto train = toy_set(6, {{0, 2019}, {1, 2019}}, 1);
  const auto val = toy_set(2, {{0, 2019}}, 2);
  const auto a = train_backbone(tiny_config(), 2, quick_config(2), train, val);
  const auto b = train_backbone(tiny_config(), 2, quick_config(2), train, val);
  CHECK(log_csv(a.log) == log_csv(b.log));
  CHECK(model::parameter_hash(*a.checkpoint.backbone) == model::parameter_hash(*b.checkpoint.backbone));
  CHECK(a.checkpoint.stage == "backbone");
  CHECK(a.log.size() == 2);
  CHECK(a.log.front().srip_term >= 0.0);
  CHECK(log_csv(a.log).starts_with("epoch,train_loss,val_CSI,val_F1,val_IoU,srip_term\n"));
}

TEST_CASE("training gives distinct regions distinct bottleneck contexts") {
  const auto train = toy_set(8, {{0, 2019}, {1, 2019}}, 3);
  auto out = train_backbone(tiny_config(), 2, quick_config(3), train, {});
  torch::NoGradGuard no_grad;
  const auto [gamma, beta] = out.checkpoint.backbone->region_context({0, 1});
  CHECK_FALSE(torch::equal(gamma[0], gamma[1]));
  CHECK_FALSE(torch::equal(beta[0], beta[1]));
}

TEST_CASE("a NaN loss aborts training with a numerical error") {
  auto train = toy_set(2, {{0, 2019}}, 4);
  train[0].x[0][0][0][0] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(train_backbone(tiny_config(), 1, quick_config(1), train, {}), NumericalError);
}

TEST_CASE("self-distillation") {
  static_assert(!std::is_invocable_v<decltype(&self_distill), const Checkpoint&, const TrainConfig&,
                                     const LabeledSet&, const ProgressFn&>,
                "distillation must not accept labelled data");
  static_assert(!HasTarget<UnlabeledExample>, "unlabelled examples carry no target");
  static_assert(HasTarget<LabeledExample>);

  const auto set = toy_set(4, {{0, 2019}, {1, 2020}}, 5);
  auto teacher = train_backbone(tiny_config(), 2, quick_config(1), set, {}).checkpoint;
  const auto teacher_hash = model::parameter_hash(*teacher.backbone);

  SUBCASE("zero epochs reproduces the teacher") {
    auto cfg = quick_config(1);
    cfg.distill_epochs = 0;
    const auto student = self_distill(teacher, cfg, strip(set));
    CHECK(student.checkpoint.stage == "distilled");
    std::vector<torch::Tensor> xs;
    std::vector<RegionKey> keys;
    for (const auto& ex : set) {
      xs.push_back(ex.x);
      keys.push_back(ex.key);
    }
    CHECK(torch::equal(predict(teacher.backbone, xs, keys), predict(student.checkpoint.backbone, xs, keys)));
  }
  SUBCASE("training the student leaves the teacher untouched") {
    const auto student = self_distill(teacher, quick_config(1), strip(set));
    CHECK(model::parameter_hash(*teacher.backbone) == teacher_hash);
    CHECK(model::parameter_hash(*student.checkpoint.backbone) != teacher_hash);
    CHECK(student.log.size() == 2);
  }
  CHECK_THROWS_AS(self_distill(teacher, quick_config(1), {}), std::invalid_argument);
}

TEST_CASE("FiLM fine-tuning") {
  const RegionKey key{1, 2020};
  const auto set = toy_set(4, {key}, 6);
  auto ckpt = train_backbone(tiny_config(), 2, quick_config(1), set, {}).checkpoint;
  const auto hash = model::parameter_hash(*ckpt.backbone);

  SUBCASE("zero epochs returns identity adapters") {
    auto cfg = quick_config(1);
    cfg.finetune_epochs = 0;
    const auto out = film_finetune(ckpt, key, set, cfg);
    const auto identity = ckpt.backbone->identity_adapters(key);
    REQUIRE(out.adapters.gamma.size() == identity.gamma.size());
    for (std::size_t l = 0; l < identity.gamma.size(); ++l) {
      CHECK(torch::equal(out.adapters.gamma[l], identity.gamma[l]));
      CHECK(torch::equal(out.adapters.beta[l], identity.beta[l]));
    }
  }
  SUBCASE("adapters move and the backbone does not") {
    const auto out = film_finetune(ckpt, key, set, quick_config(1));
    CHECK(model::parameter_hash(*ckpt.backbone) == hash);
    CHECK(out.adapters.key == key);
    CHECK_FALSE(torch::equal(out.adapters.gamma[0], torch::ones_like(out.adapters.gamma[0])));
    CHECK(out.log.size() == 2);
  }
  SUBCASE("with validation the result is never worse than identity") {
    const auto val = toy_set(2, {key}, 7);
    const auto out = film_finetune(ckpt, key, set, quick_config(1), &val);
    std::map<RegionKey, model::FiLMAdapterSet> tuned{{key, out.adapters}};
    const auto before = eval::csi(evaluate_counts(ckpt.backbone, val, 0.5));
    const auto after = eval::csi(evaluate_counts(ckpt.backbone, val, 0.5, &tuned));
    if (before) {
      REQUIRE(after);
      CHECK(*after >= *before);
    }
  }
  CHECK_THROWS_AS(film_finetune(ckpt, key, {}, quick_config(1)), std::invalid_argument);
  CHECK_THROWS_AS(film_finetune(ckpt, {0, 2019}, set, quick_config(1)), std::invalid_argument);
}

TEST_CASE("predict groups by key and honours adapters") {
  const auto set = toy_set(5, {{0, 2019}, {1, 2019}}, 8);
  auto ckpt = train_backbone(tiny_config(), 2, quick_config(1), set, {}).checkpoint;
  std::vector<torch::Tensor> xs;
  std::vector<RegionKey> keys;
  for (const auto& ex : set) {
    xs.push_back(ex.x);
    keys.push_back(ex.key);
  }
  const auto all = predict(ckpt.backbone, xs, keys, nullptr, 2);
  CHECK(all.sizes() == at::IntArrayRef({5, 1, 3, 4, 4}));
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const auto single = predict(ckpt.backbone, {xs[i]}, {keys[i]});
    CHECK(torch::allclose(single[0], all[static_cast<std::int64_t>(i)], 1e-6, 1e-6));
  }
  CHECK_THROWS_AS(predict(ckpt.backbone, xs, {}), std::invalid_argument);
}
