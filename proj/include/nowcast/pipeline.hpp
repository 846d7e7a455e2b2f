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

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "nowcast/datagen.hpp"
#include "nowcast/model.hpp"
#include "nowcast/training.hpp"

namespace nowcast::pipeline {

// Config file (JSON). Key paths mirror the module config types:
//   {
//     "data": "<dataset dir>", "out": "<run dir>", "seed": 7, "deterministic": true,
//     "datagen": {"regions", "years", "events", "height", "width", "t_in",
//                 "t_out", "channels", "val_fraction", "rain_threshold"},
//     "model":   {"levels", "base_channels", "dropout_rate", "rcn_hidden_per_region"},
//     "train":   {"learning_rate", ..., "srip": {"lambda", "iters", "seed"}},
//     "predict": {"split"}
//   }
// Precedence: built-in defaults < config file < command-line flags.
struct PipelineConfig {
  std::filesystem::path data_dir = "data";
  std::filesystem::path out_dir = "run";
  std::uint64_t seed = 0;
  bool deterministic = false;

  int regions = 7;
  std::vector<int> years{2019, 2020};
  int events = 10;
  datagen::Dims dims;
  double val_fraction = 0.2;
  double rain_threshold = datagen::kDefaultRainThreshold;

  model::BackboneConfig backbone;
  training::TrainConfig train;
  std::string predict_split = "val";

  // Pushes the global seed and determinism flag into every stage config.
  void propagate();
};

void apply_config_json(PipelineConfig& cfg, const nlohmann::json& j);
PipelineConfig load_config_file(const std::filesystem::path& path);

// File names inside the run directory.
inline constexpr const char* kBackboneCheckpoint = "backbone.ckpt";
inline constexpr const char* kDistilledCheckpoint = "distilled.ckpt";
inline constexpr const char* kFinetunedCheckpoint = "finetuned.ckpt";
inline constexpr const char* kSweepJson = "sweep.json";

// Each command writes its outputs atomically and throws DependencyError when a
// prerequisite stage has not run, FormatError on bad inputs, NumericalError on
// divergence, std::invalid_argument on bad settings.
std::size_t cmd_datagen(const PipelineConfig& cfg);
void cmd_train(const PipelineConfig& cfg);
void cmd_distill(const PipelineConfig& cfg);
std::size_t cmd_finetune(const PipelineConfig& cfg);  // returns adapter sets written
void cmd_sweep(const PipelineConfig& cfg);
std::size_t cmd_predict(const PipelineConfig& cfg);  // returns masks written
double cmd_report(const PipelineConfig& cfg);        // returns overall mean CSI

}  // namespace nowcast::pipeline
