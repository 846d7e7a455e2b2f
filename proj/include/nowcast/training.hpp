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

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "nowcast/checkpoint.hpp"
#include "nowcast/datagen.hpp"
#include "nowcast/eval.hpp"
#include "nowcast/model.hpp"
#include "nowcast/orthoreg.hpp"

namespace nowcast::training {

struct TrainConfig {
  // AdamW
  double learning_rate = 1e-4;
  double weight_decay = 1e-2;
  int max_epochs = 90;
  int patience = 40;
  int batch_size = 8;
  bool mixup = true;
  double mixup_alpha = 1.0;
  orthoreg::SripOptions srip{};
  int distill_epochs = 10;
  int finetune_epochs = 20;
  double finetune_learning_rate = 1e-2;
  double eval_threshold = 0.5;  // early-stopping CSI threshold
  std::uint64_t seed = 0;
  bool deterministic = true;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

struct LabeledExample {
  torch::Tensor x;       // [C][T_in][H][W]
  torch::Tensor target;  // [1][T_out][H][W], values in [0, 1]
  RegionKey key;
};
using LabeledSet = std::vector<LabeledExample>;

// Inputs only: no target field exists, so a distillation stage fed from this
// type cannot see ground truth.
struct UnlabeledExample {
  torch::Tensor x;
  RegionKey key;
};
using UnlabeledSet = std::vector<UnlabeledExample>;

LabeledSet labeled_set(const datagen::Dataset& ds, const std::string& split, int region = -1,
                       int year = -1);
UnlabeledSet unlabeled_set(const datagen::Dataset& ds, const std::string& split, int region = -1,
                           int year = -1);

struct TrainBatch {
  torch::Tensor x;  // [B][C][T_in][H][W]
  torch::Tensor y;  // [B][1][T_out][H][W]
  std::vector<int> regions;
};

TrainBatch make_batch(const LabeledSet& set, const std::vector<std::size_t>& indices);

inline constexpr double kProbEpsilon = 1e-7;
inline constexpr double kDiceSmooth = 1.0;

struct DiceBceTerms {
  torch::Tensor bce;   // mean binary cross-entropy
  torch::Tensor dice;  // 1 - (2 sum(p t) + s) / (sum p + sum t + s)
  torch::Tensor total() const { return bce + dice; }
};

DiceBceTerms dice_bce_terms(const torch::Tensor& pred, const torch::Tensor& target);
torch::Tensor dice_bce_loss(const torch::Tensor& pred, const torch::Tensor& target);

// x~ = lambda x + (1 - lambda) x[perm], likewise y; region tags keep the
// unpermuted side.
TrainBatch mix_batch(const TrainBatch& batch, double lambda, const std::vector<std::int64_t>& perm);

double sample_beta(double alpha, std::mt19937_64& rng);

struct MixupDraw {
  TrainBatch batch;
  double lambda = 1.0;
  std::vector<std::int64_t> perm;
};

// One lambda ~ Beta(alpha, alpha) per batch and one random permutation.
MixupDraw mixup_batch(const TrainBatch& batch, double alpha, std::mt19937_64& rng);

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  eval::MetricsReport val;
  double srip_term = 0.0;
};

// epoch,train_loss,val_CSI,val_F1,val_IoU,srip_term
std::string log_csv(const std::vector<EpochLog>& log);

struct TrainOutcome {
  Checkpoint checkpoint;
  std::vector<EpochLog> log;
};

using ProgressFn = std::function<void(const EpochLog&)>;

// Stage 1: DiceBCE + SRIP+ with per-batch mixup, early stopping on validation
// CSI. Returns the best-validation checkpoint.
TrainOutcome train_backbone(const model::BackboneConfig& backbone_config, int num_regions,
                            const TrainConfig& config, const LabeledSet& train,
                            const LabeledSet& val, const ProgressFn& progress = {});

// Stage 2: the student starts from the teacher and fits the teacher's
// probabilities. The teacher is never modified.
TrainOutcome self_distill(const Checkpoint& teacher, const TrainConfig& config,
                          const UnlabeledSet& train, const ProgressFn& progress = {});

struct FinetuneOutcome {
  model::FiLMAdapterSet adapters;
  std::vector<EpochLog> log;
};

// Stage 3: trains only the skip-path FiLM scale/bias for one (region, year);
// the backbone stays frozen. With `val`, the adapters with the best validation
// CSI are returned (identity counts as epoch 0).
FinetuneOutcome film_finetune(const Checkpoint& backbone, RegionKey key,
                              const LabeledSet& region_set, const TrainConfig& config,
                              const LabeledSet* val = nullptr, const ProgressFn& progress = {});

// Probabilities [N][1][T_out][H][W] in eval mode. Adapters are looked up per
// example key; missing keys fall back to identity.
torch::Tensor predict(model::Backbone backbone, const std::vector<torch::Tensor>& inputs,
                      const std::vector<RegionKey>& keys,
                      const std::map<RegionKey, model::FiLMAdapterSet>* adapters = nullptr,
                      int batch_size = 8);

eval::ConfusionCounts evaluate_counts(model::Backbone backbone, const LabeledSet& set,
                                      double threshold,
                                      const std::map<RegionKey, model::FiLMAdapterSet>* adapters = nullptr);

}  // namespace nowcast::training
