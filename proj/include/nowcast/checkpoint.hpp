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
#include <map>
#include <optional>
#include <string>

#include <json.hpp>

#include "nowcast/model.hpp"

namespace nowcast {

// Checkpoint container:
//   bytes 0..7  magic "NCCKPT01"
//   u32         format version
//   u64         header length L
//   L bytes     UTF-8 JSON header: stage, backbone config, num_regions, seed,
//               epoch, best validation CSI, train config snapshot, and a
//               tensor index [{name, shape, offset}] into the payload
//   payload     little-endian float32 tensor data
// Backbone tensors are named "backbone/<parameter>"; adapter tensors are
// named "adapter/r<region>_y<year>/{gamma,beta}/<level>".
inline constexpr std::string_view kCheckpointMagic = "NCCKPT01";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string stage;  // "backbone", "distilled" or "finetuned"
  model::Backbone backbone{nullptr};
  std::map<RegionKey, model::FiLMAdapterSet> adapters;
  std::uint64_t seed = 0;
  nlohmann::json train_config = nlohmann::json::object();
  int epoch = 0;
  std::optional<double> best_val_csi;
};

Checkpoint copy_checkpoint(const Checkpoint& ckpt);

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes);

// Atomic write (temp file + rename).
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
// Throws FormatError naming the offending field.
Checkpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::json backbone_config_to_json(const model::BackboneConfig& config);
model::BackboneConfig backbone_config_from_json(const nlohmann::json& j);

}  // namespace nowcast
