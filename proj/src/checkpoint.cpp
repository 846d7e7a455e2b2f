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

#include "nowcast/checkpoint.hpp"

#include "nowcast/array_io.hpp"
#include "nowcast/errors.hpp"

namespace nowcast {
namespace {

using json = nlohmann::json;

template <typename T>
T field(const json& j, const char* name) {
  if (!j.contains(name)) throw FormatError(std::string("checkpoint header missing field: ") + name);
  try {
    return j.at(name).get<T>();
  } catch (const json::exception&) {
    throw FormatError(std::string("checkpoint header field has wrong type: ") + name);
  }
}

std::string adapter_prefix(const RegionKey& key) { return "adapter/" + to_string(key) + "/"; }

}  // namespace

json backbone_config_to_json(const model::BackboneConfig& c) {
  return {{"levels", c.levels},
          {"base_channels", c.base_channels},
          {"in_channels", c.in_channels},
          {"t_in", c.t_in},
          {"out_frames", c.out_frames},
          {"dropout_rate", c.dropout_rate},
          {"super_resolution", c.super_resolution},
          {"rcn_hidden_per_region", c.rcn_hidden_per_region}};
}

model::BackboneConfig backbone_config_from_json(const json& j) {
  model::BackboneConfig c;
  c.levels = field<int>(j, "levels");
  c.base_channels = field<int>(j, "base_channels");
  c.in_channels = field<int>(j, "in_channels");
  c.t_in = field<int>(j, "t_in");
  c.out_frames = field<int>(j, "out_frames");
  c.dropout_rate = field<double>(j, "dropout_rate");
  c.super_resolution = field<int>(j, "super_resolution");
  c.rcn_hidden_per_region = field<int>(j, "rcn_hidden_per_region");
  return c;
}

Checkpoint copy_checkpoint(const Checkpoint& ckpt) {
  Checkpoint out;
  out.stage = ckpt.stage;
  out.backbone = model::clone_backbone(ckpt.backbone);
  for (const auto& [key, set] : ckpt.adapters) out.adapters.emplace(key, set.clone());
  out.seed = ckpt.seed;
  out.train_config = ckpt.train_config;
  out.epoch = ckpt.epoch;
  out.best_val_csi = ckpt.best_val_csi;
  return out;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.backbone) throw std::invalid_argument("checkpoint has no backbone");
  json header;
  header["format_version"] = kCheckpointVersion;
  header["stage"] = ckpt.stage;
  header["config"] = backbone_config_to_json(ckpt.backbone->config());
  header["num_regions"] = ckpt.backbone->num_regions();
  header["seed"] = ckpt.seed;
  header["train_config"] = ckpt.train_config;
  header["epoch"] = ckpt.epoch;
  header["best_val_csi"] = ckpt.best_val_csi ? json(*ckpt.best_val_csi) : json(nullptr);

  std::string payload;
  json index = json::array();
  auto add = [&](const std::string& name, const torch::Tensor& t) {
    index.push_back({{"name", name}, {"shape", t.sizes().vec()}, {"offset", payload.size()}});
    io::put_f32_data(payload, t);
  };
  for (const auto& item : ckpt.backbone->named_parameters()) add("backbone/" + item.key(), item.value());
  for (const auto& item : ckpt.backbone->named_buffers()) add("backbone/" + item.key(), item.value());
  json keys = json::array();
  for (const auto& [key, set] : ckpt.adapters) {
    keys.push_back({{"region", key.region}, {"year", key.year}, {"levels", set.gamma.size()}});
    for (std::size_t l = 0; l < set.gamma.size(); ++l) {
      add(adapter_prefix(key) + "gamma/" + std::to_string(l), set.gamma[l]);
      add(adapter_prefix(key) + "beta/" + std::to_string(l), set.beta[l]);
    }
  }
  header["adapters"] = keys;
  header["tensors"] = index;

  const std::string header_text = header.dump();
  std::string out(kCheckpointMagic);
  io::put_u32(out, kCheckpointVersion);
  io::put_u64(out, header_text.size());
  out += header_text;
  out += payload;
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < kCheckpointMagic.size() ||
      bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic) {
    throw FormatError("checkpoint magic mismatch");
  }
  std::size_t pos = kCheckpointMagic.size();
  const auto version = io::get_u32(bytes, pos, "format_version");
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint format_version mismatch: " + std::to_string(version));
  }
  const auto header_len = io::get_u64(bytes, pos, "header_length");
  if (header_len > bytes.size() - pos) throw FormatError("checkpoint header truncated");
  json header;
  try {
    header = json::parse(bytes.substr(pos, header_len));
  } catch (const json::exception&) {
    throw FormatError("checkpoint header is not valid JSON");
  }
  pos += header_len;
  const std::string_view payload = bytes.substr(pos);

  std::map<std::string, torch::Tensor> tensors;
  for (const auto& entry : field<json>(header, "tensors")) {
    const auto name = field<std::string>(entry, "name");
    const auto shape = field<std::vector<std::int64_t>>(entry, "shape");
    auto offset = field<std::size_t>(entry, "offset");
    tensors[name] = io::get_f32_data(payload, offset, shape, name);
  }
  auto take = [&tensors](const std::string& name) -> torch::Tensor {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw FormatError("checkpoint missing tensor: " + name);
    return it->second;
  };

  Checkpoint ckpt;
  ckpt.stage = field<std::string>(header, "stage");
  ckpt.seed = field<std::uint64_t>(header, "seed");
  ckpt.epoch = field<int>(header, "epoch");
  ckpt.train_config = field<json>(header, "train_config");
  if (!header.contains("best_val_csi")) throw FormatError("checkpoint header missing field: best_val_csi");
  if (!header["best_val_csi"].is_null()) ckpt.best_val_csi = field<double>(header, "best_val_csi");

  model::BackboneConfig config;
  try {
    config = backbone_config_from_json(field<json>(header, "config"));
    config.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("checkpoint config invalid: ") + e.what());
  }
  const int num_regions = field<int>(header, "num_regions");
  if (num_regions < 1) throw FormatError("checkpoint num_regions must be >= 1");
  ckpt.backbone = model::build_backbone(config, num_regions, ckpt.seed);
  {
    torch::NoGradGuard no_grad;
    auto load_into = [&](const std::string& name, torch::Tensor& dst) {
      const auto src = take("backbone/" + name);
      if (src.sizes() != dst.sizes()) throw FormatError("checkpoint shape mismatch for tensor: " + name);
      dst.copy_(src);
    };
    for (auto& item : ckpt.backbone->named_parameters()) load_into(item.key(), item.value());
    for (auto& item : ckpt.backbone->named_buffers()) load_into(item.key(), item.value());
  }
  const auto skip_channels = config.skip_channels();
  for (const auto& entry : field<json>(header, "adapters")) {
    const RegionKey key{field<int>(entry, "region"), field<int>(entry, "year")};
    if (field<std::size_t>(entry, "levels") != skip_channels.size()) {
      throw FormatError("adapter levels mismatch for " + to_string(key));
    }
    model::FiLMAdapterSet set;
    set.key = key;
    for (std::size_t l = 0; l < skip_channels.size(); ++l) {
      auto g = take(adapter_prefix(key) + "gamma/" + std::to_string(l));
      auto b = take(adapter_prefix(key) + "beta/" + std::to_string(l));
      if (g.dim() != 1 || g.size(0) != skip_channels[l] || b.sizes() != g.sizes()) {
        throw FormatError("adapter shape mismatch for " + to_string(key));
      }
      set.gamma.push_back(g);
      set.beta.push_back(b);
    }
    ckpt.adapters.emplace(key, std::move(set));
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  io::write_file_atomic(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DependencyError("checkpoint not found: " + path.string());
  return decode_checkpoint(io::read_file(path));
}

}  // namespace nowcast
