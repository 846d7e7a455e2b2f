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

#include "nowcast/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "nowcast/errors.hpp"

namespace nowcast::training {
namespace {

using json = nlohmann::json;

constexpr std::uint64_t kShuffleSalt = 0x243F6A8885A308D3ULL;

// Dropout draws from the global generator; shuffling and mixup draw from a
// std engine. Both are seeded from config.seed.
void seed_stage(const TrainConfig& config) {
  if (config.deterministic) torch::set_num_threads(1);
  torch::manual_seed(config.seed);
}

std::vector<std::vector<std::size_t>> shuffled_batches(std::size_t n, int batch_size,
                                                       std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(n, i + static_cast<std::size_t>(batch_size));
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

void check_finite(const torch::Tensor& loss, const std::string& stage, int epoch, int step) {
  if (!std::isfinite(loss.item<double>())) {
    throw NumericalError(stage + ": loss is not finite at epoch " + std::to_string(epoch) +
                         ", step " + std::to_string(step));
  }
}

// Restores a module's training flag on scope exit.
class ModeGuard {
 public:
  explicit ModeGuard(torch::nn::Module& m) : module_(m), was_training_(m.is_training()) {}
  ~ModeGuard() { module_.train(was_training_); }
  ModeGuard(const ModeGuard&) = delete;
  ModeGuard& operator=(const ModeGuard&) = delete;

 private:
  torch::nn::Module& module_;
  bool was_training_;
};

template <typename T>
void read_key(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight_decay must be >= 0");
  if (max_epochs < 0 || patience < 0) throw std::invalid_argument("epochs and patience must be >= 0");
  if (patience > max_epochs) throw std::invalid_argument("patience must not exceed max_epochs");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (!(mixup_alpha > 0.0)) throw std::invalid_argument("mixup_alpha must be > 0");
  if (!(srip.lambda >= 0.0)) throw std::invalid_argument("srip.lambda must be >= 0");
  if (srip.iters < 1) throw std::invalid_argument("srip.iters must be >= 1");
  if (distill_epochs < 0 || finetune_epochs < 0) {
    throw std::invalid_argument("stage epoch counts must be >= 0");
  }
  if (!(finetune_learning_rate > 0.0)) throw std::invalid_argument("finetune_learning_rate must be > 0");
  if (!(eval_threshold > 0.0 && eval_threshold < 1.0)) {
    throw std::invalid_argument("eval_threshold must lie in (0, 1)");
  }
}

json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"weight_decay", c.weight_decay},
          {"max_epochs", c.max_epochs},
          {"patience", c.patience},
          {"batch_size", c.batch_size},
          {"mixup", c.mixup},
          {"mixup_alpha", c.mixup_alpha},
          {"srip", {{"lambda", c.srip.lambda}, {"iters", c.srip.iters}, {"seed", c.srip.seed}}},
          {"distill_epochs", c.distill_epochs},
          {"finetune_epochs", c.finetune_epochs},
          {"finetune_learning_rate", c.finetune_learning_rate},
          {"eval_threshold", c.eval_threshold},
          {"seed", c.seed},
          {"deterministic", c.deterministic}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  read_key(j, "learning_rate", c.learning_rate);
  read_key(j, "weight_decay", c.weight_decay);
  read_key(j, "max_epochs", c.max_epochs);
  read_key(j, "patience", c.patience);
  read_key(j, "batch_size", c.batch_size);
  read_key(j, "mixup", c.mixup);
  read_key(j, "mixup_alpha", c.mixup_alpha);
  if (j.contains("srip")) {
    const auto& s = j.at("srip");
    read_key(s, "lambda", c.srip.lambda);
    read_key(s, "iters", c.srip.iters);
    read_key(s, "seed", c.srip.seed);
  }
  read_key(j, "distill_epochs", c.distill_epochs);
  read_key(j, "finetune_epochs", c.finetune_epochs);
  read_key(j, "finetune_learning_rate", c.finetune_learning_rate);
  read_key(j, "eval_threshold", c.eval_threshold);
  read_key(j, "seed", c.seed);
  read_key(j, "deterministic", c.deterministic);
  return c;
}

LabeledSet labeled_set(const datagen::Dataset& ds, const std::string& split, int region, int year) {
  LabeledSet out;
  for (const auto* s : ds.select(split, region, year)) {
    out.push_back({s->x, ds.mask(*s).unsqueeze(0), {s->key.region, s->key.year}});
  }
  return out;
}

UnlabeledSet unlabeled_set(const datagen::Dataset& ds, const std::string& split, int region,
                           int year) {
  UnlabeledSet out;
  for (const auto* s : ds.select(split, region, year)) {
    out.push_back({s->x, {s->key.region, s->key.year}});
  }
  return out;
}

TrainBatch make_batch(const LabeledSet& set, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw std::invalid_argument("empty batch");
  std::vector<torch::Tensor> xs, ys;
  TrainBatch batch;
  for (auto i : indices) {
    xs.push_back(set.at(i).x);
    ys.push_back(set.at(i).target);
    batch.regions.push_back(set.at(i).key.region);
  }
  batch.x = torch::stack(xs);
  batch.y = torch::stack(ys);
  return batch;
}

DiceBceTerms dice_bce_terms(const torch::Tensor& pred, const torch::Tensor& target) {
  if (pred.sizes() != target.sizes()) throw std::invalid_argument("dice_bce_loss: shape mismatch");
  const auto p = pred.clamp(kProbEpsilon, 1.0 - kProbEpsilon);
  const auto bce = -(target * torch::log(p) + (1.0 - target) * torch::log(1.0 - p)).mean();
  const auto intersection = (p * target).sum();
  const auto dice = 1.0 - (2.0 * intersection + kDiceSmooth) / (p.sum() + target.sum() + kDiceSmooth);
  return {bce, dice};
}

torch::Tensor dice_bce_loss(const torch::Tensor& pred, const torch::Tensor& target) {
  return dice_bce_terms(pred, target).total();
}

TrainBatch mix_batch(const TrainBatch& batch, double lambda, const std::vector<std::int64_t>& perm) {
  const auto b = batch.x.size(0);
  if (b == 0) throw std::invalid_argument("mixup needs a nonempty batch");
  if (static_cast<std::int64_t>(perm.size()) != b) {
    throw std::invalid_argument("mixup permutation length must equal the batch size");
  }
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("mixup lambda must lie in [0, 1]");
  const auto index = torch::tensor(perm, torch::kInt64);
  const auto xj = batch.x.index_select(0, index);
  const auto yj = batch.y.index_select(0, index);
  TrainBatch out;
  out.regions = batch.regions;
  if (lambda == 1.0) {
    out.x = batch.x.clone();
    out.y = batch.y.clone();
  } else if (lambda == 0.0) {
    out.x = xj;
    out.y = yj;
  } else {
    out.x = lambda * batch.x + (1.0 - lambda) * xj;
    out.y = lambda * batch.y + (1.0 - lambda) * yj;
  }
  return out;
}

double sample_beta(double alpha, std::mt19937_64& rng) {
  if (!(alpha > 0.0)) throw std::invalid_argument("Beta parameter must be > 0");
  std::gamma_distribution<double> gamma(alpha, 1.0);
  const double a = gamma(rng);
  const double b = gamma(rng);
  return a + b > 0.0 ? a / (a + b) : 0.5;
}

MixupDraw mixup_batch(const TrainBatch& batch, double alpha, std::mt19937_64& rng) {
  if (!batch.x.defined() || batch.x.size(0) == 0) {
    throw std::invalid_argument("mixup needs a nonempty batch");
  }
  MixupDraw draw;
  draw.lambda = sample_beta(alpha, rng);
  draw.perm.resize(static_cast<std::size_t>(batch.x.size(0)));
  std::iota(draw.perm.begin(), draw.perm.end(), std::int64_t{0});
  std::shuffle(draw.perm.begin(), draw.perm.end(), rng);
  draw.batch = mix_batch(batch, draw.lambda, draw.perm);
  return draw;
}

std::string log_csv(const std::vector<EpochLog>& log) {
  std::ostringstream out;
  out << "epoch,train_loss,val_CSI,val_F1,val_IoU,srip_term\n";
  for (const auto& e : log) {
    out << e.epoch << ',' << eval::format_score(e.train_loss) << ',' << eval::format_score(e.val.csi)
        << ',' << eval::format_score(e.val.f1) << ',' << eval::format_score(e.val.iou) << ','
        << eval::format_score(e.srip_term) << '\n';
  }
  return out.str();
}

torch::Tensor predict(model::Backbone backbone, const std::vector<torch::Tensor>& inputs,
                      const std::vector<RegionKey>& keys,
                      const std::map<RegionKey, model::FiLMAdapterSet>* adapters, int batch_size) {
  if (inputs.size() != keys.size()) throw std::invalid_argument("predict: one key per input");
  if (inputs.empty()) throw std::invalid_argument("predict: no inputs");
  torch::NoGradGuard no_grad;
  ModeGuard mode(*backbone);
  backbone->eval();
  std::vector<torch::Tensor> outputs;
  std::size_t i = 0;
  while (i < inputs.size()) {
    // Chunks never straddle keys so one adapter set covers a chunk.
    std::size_t j = i;
    std::vector<torch::Tensor> xs;
    std::vector<int> regions;
    while (j < inputs.size() && keys[j] == keys[i] && static_cast<int>(j - i) < batch_size) {
      xs.push_back(inputs[j]);
      regions.push_back(keys[j].region);
      ++j;
    }
    const model::FiLMAdapterSet* set = nullptr;
    if (adapters != nullptr) {
      auto it = adapters->find(keys[i]);
      if (it != adapters->end()) set = &it->second;
    }
    outputs.push_back(backbone->forward(torch::stack(xs), regions, set));
    i = j;
  }
  return torch::cat(outputs);
}

eval::ConfusionCounts evaluate_counts(model::Backbone backbone, const LabeledSet& set,
                                      double threshold,
                                      const std::map<RegionKey, model::FiLMAdapterSet>* adapters) {
  std::vector<torch::Tensor> xs, ys;
  std::vector<RegionKey> keys;
  for (const auto& ex : set) {
    xs.push_back(ex.x);
    ys.push_back(ex.target);
    keys.push_back(ex.key);
  }
  const auto prob = predict(backbone, xs, keys, adapters);
  return eval::confusion(eval::predict_with_threshold(prob, threshold), torch::stack(ys));
}

TrainOutcome train_backbone(const model::BackboneConfig& backbone_config, int num_regions,
                            const TrainConfig& config, const LabeledSet& train,
                            const LabeledSet& val, const ProgressFn& progress) {
  config.validate();
  if (train.empty()) throw std::invalid_argument("train_backbone: empty training set");
  auto backbone = model::build_backbone(backbone_config, num_regions, config.seed);
  seed_stage(config);
  std::mt19937_64 rng(config.seed ^ kShuffleSalt);

  torch::optim::AdamW optimizer(
      backbone->parameters(),
      torch::optim::AdamWOptions(config.learning_rate).weight_decay(config.weight_decay));
  const auto kernels = backbone->orthogonal_kernel_tensors();

  TrainOutcome outcome;
  model::Backbone best{nullptr};
  std::optional<double> best_csi;
  int best_epoch = 0;
  int since_best = 0;
  int step = 0;
  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    backbone->train();
    double loss_sum = 0.0, srip_sum = 0.0;
    const auto batches = shuffled_batches(train.size(), config.batch_size, rng);
    for (const auto& indices : batches) {
      auto batch = make_batch(train, indices);
      if (config.mixup) batch = mixup_batch(batch, config.mixup_alpha, rng).batch;
      const auto pred = backbone->forward(batch.x, batch.regions);
      const auto loss = dice_bce_loss(pred, batch.y);
      auto total = loss;
      if (config.srip.lambda > 0.0) {
        auto opts = config.srip;
        opts.seed = config.srip.seed + static_cast<std::uint64_t>(step);
        const auto penalty = orthoreg::srip_penalty(kernels, opts);
        srip_sum += penalty.item<double>();
        total = total + penalty;
      }
      check_finite(total, "train", epoch, step);
      optimizer.zero_grad();
      total.backward();
      optimizer.step();
      loss_sum += loss.item<double>();
      ++step;
    }

    EpochLog entry;
    entry.epoch = epoch;
    entry.train_loss = loss_sum / static_cast<double>(batches.size());
    entry.srip_term = srip_sum / static_cast<double>(batches.size());
    bool improved = val.empty();
    if (!val.empty()) {
      entry.val = eval::metrics_report(evaluate_counts(backbone, val, config.eval_threshold));
      improved = entry.val.csi && (!best_csi || *entry.val.csi > *best_csi);
      if (improved) best_csi = entry.val.csi;
    }
    if (improved || !best) {
      best = model::clone_backbone(backbone);
      best_epoch = epoch;
    }
    since_best = improved ? 0 : since_best + 1;
    outcome.log.push_back(entry);
    if (progress) progress(entry);
    if (!val.empty() && since_best >= config.patience && config.patience > 0) break;
  }
  if (!best) best = model::clone_backbone(backbone);

  outcome.checkpoint.stage = "backbone";
  outcome.checkpoint.backbone = best;
  outcome.checkpoint.seed = config.seed;
  outcome.checkpoint.train_config = to_json(config);
  outcome.checkpoint.epoch = best_epoch;
  outcome.checkpoint.best_val_csi = best_csi;
  return outcome;
}

TrainOutcome self_distill(const Checkpoint& teacher, const TrainConfig& config,
                          const UnlabeledSet& train, const ProgressFn& progress) {
  config.validate();
  if (!teacher.backbone) throw std::invalid_argument("self_distill: teacher has no backbone");
  if (train.empty()) throw std::invalid_argument("self_distill: empty training set");
  const auto& arch = teacher.backbone->config();
  for (const auto& ex : train) {
    if (ex.x.dim() != 4 || ex.x.size(0) != arch.in_channels || ex.x.size(1) != arch.t_in) {
      throw std::invalid_argument("self_distill: inputs do not match the teacher architecture");
    }
  }

  // The caller's teacher is only read through a private copy.
  auto frozen_teacher = model::clone_backbone(teacher.backbone);
  auto student = model::clone_backbone(teacher.backbone);
  seed_stage(config);
  std::mt19937_64 rng(config.seed ^ kShuffleSalt);

  std::vector<torch::Tensor> xs;
  std::vector<RegionKey> keys;
  for (const auto& ex : train) {
    xs.push_back(ex.x);
    keys.push_back(ex.key);
  }
  const auto soft_targets = predict(frozen_teacher, xs, keys, nullptr, config.batch_size);

  torch::optim::AdamW optimizer(
      student->parameters(),
      torch::optim::AdamWOptions(config.learning_rate).weight_decay(config.weight_decay));
  const auto kernels = student->orthogonal_kernel_tensors();

  TrainOutcome outcome;
  int step = 0;
  for (int epoch = 1; epoch <= config.distill_epochs; ++epoch) {
    student->train();
    double loss_sum = 0.0, srip_sum = 0.0;
    const auto batches = shuffled_batches(train.size(), config.batch_size, rng);
    for (const auto& indices : batches) {
      std::vector<torch::Tensor> bx;
      std::vector<int> regions;
      std::vector<std::int64_t> rows;
      for (auto i : indices) {
        bx.push_back(train[i].x);
        regions.push_back(train[i].key.region);
        rows.push_back(static_cast<std::int64_t>(i));
      }
      const auto target = soft_targets.index_select(0, torch::tensor(rows, torch::kInt64));
      const auto loss = dice_bce_loss(student->forward(torch::stack(bx), regions), target);
      auto total = loss;
      if (config.srip.lambda > 0.0) {
        auto opts = config.srip;
        opts.seed = config.srip.seed + static_cast<std::uint64_t>(step);
        const auto penalty = orthoreg::srip_penalty(kernels, opts);
        srip_sum += penalty.item<double>();
        total = total + penalty;
      }
      check_finite(total, "distill", epoch, step);
      optimizer.zero_grad();
      total.backward();
      optimizer.step();
      loss_sum += loss.item<double>();
      ++step;
    }
    EpochLog entry;
    entry.epoch = epoch;
    entry.train_loss = loss_sum / static_cast<double>(batches.size());
    entry.srip_term = srip_sum / static_cast<double>(batches.size());
    outcome.log.push_back(entry);
    if (progress) progress(entry);
  }
  student->eval();

  outcome.checkpoint.stage = "distilled";
  outcome.checkpoint.backbone = student;
  outcome.checkpoint.seed = config.seed;
  outcome.checkpoint.train_config = to_json(config);
  outcome.checkpoint.epoch = config.distill_epochs;
  return outcome;
}

FinetuneOutcome film_finetune(const Checkpoint& backbone, RegionKey key,
                              const LabeledSet& region_set, const TrainConfig& config,
                              const LabeledSet* val, const ProgressFn& progress) {
  config.validate();
  if (!backbone.backbone) throw std::invalid_argument("film_finetune: checkpoint has no backbone");
  if (region_set.empty()) throw std::invalid_argument("film_finetune: empty region set for " + to_string(key));
  auto check_keys = [&key](const LabeledSet& set) {
    for (const auto& ex : set) {
      if (ex.key != key) {
        throw std::invalid_argument("film_finetune: sample " + to_string(ex.key) +
                                    " does not belong to " + to_string(key));
      }
    }
  };
  check_keys(region_set);
  if (val != nullptr) check_keys(*val);

  auto frozen = model::clone_backbone(backbone.backbone);
  frozen->eval();
  for (auto& p : frozen->parameters()) p.requires_grad_(false);

  seed_stage(config);
  std::mt19937_64 rng(config.seed ^ kShuffleSalt ^ static_cast<std::uint64_t>(key.region * 7919 + key.year));

  auto adapters = frozen->identity_adapters(key);
  for (auto& t : adapters.gamma) t.requires_grad_(true);
  for (auto& t : adapters.beta) t.requires_grad_(true);
  // No weight decay: decay would pull the scales toward zero instead of one.
  torch::optim::AdamW optimizer(
      adapters.parameters(),
      torch::optim::AdamWOptions(config.finetune_learning_rate).weight_decay(0.0));

  auto val_csi = [&](const model::FiLMAdapterSet& set) -> eval::Score {
    std::map<RegionKey, model::FiLMAdapterSet> lookup;
    lookup.emplace(key, set.clone());
    return eval::csi(evaluate_counts(frozen, *val, config.eval_threshold, &lookup));
  };

  FinetuneOutcome outcome;
  auto best = adapters.clone();
  eval::Score best_csi = val != nullptr && !val->empty() ? val_csi(adapters) : std::nullopt;
  for (int epoch = 1; epoch <= config.finetune_epochs; ++epoch) {
    double loss_sum = 0.0;
    const auto batches = shuffled_batches(region_set.size(), config.batch_size, rng);
    int step = 0;
    for (const auto& indices : batches) {
      const auto batch = make_batch(region_set, indices);
      const auto loss = dice_bce_loss(frozen->forward(batch.x, batch.regions, &adapters), batch.y);
      check_finite(loss, "finetune " + to_string(key), epoch, step++);
      optimizer.zero_grad();
      loss.backward();
      optimizer.step();
      loss_sum += loss.item<double>();
    }
    EpochLog entry;
    entry.epoch = epoch;
    entry.train_loss = loss_sum / static_cast<double>(batches.size());
    if (val != nullptr && !val->empty()) {
      std::map<RegionKey, model::FiLMAdapterSet> lookup;
      lookup.emplace(key, adapters.clone());
      entry.val = eval::metrics_report(evaluate_counts(frozen, *val, config.eval_threshold, &lookup));
      if (entry.val.csi && (!best_csi || *entry.val.csi > *best_csi)) {
        best_csi = entry.val.csi;
        best = adapters.clone();
      }
    } else {
      best = adapters.clone();
    }
    outcome.log.push_back(entry);
    if (progress) progress(entry);
  }
  outcome.adapters = std::move(best);
  return outcome;
}

}  // namespace nowcast::training
