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
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "nowcast/region_key.hpp"

namespace nowcast::model {

struct BackboneConfig {
  int levels = 3;
  int base_channels = 32;  // doubles per level
  int in_channels = 11;
  int t_in = 4;
  int out_frames = 32;
  double dropout_rate = 0.4;
  int super_resolution = 6;  // informational only
  int rcn_hidden_per_region = 4;

  void validate() const;
  int level_channels(int level) const { return base_channels << level; }
  int bottleneck_channels() const { return base_channels << levels; }
  std::vector<int> skip_channels() const;
  bool operator==(const BackboneConfig&) const = default;
};

using nowcast::RegionKey;
using nowcast::to_string;

struct RegionTag {
  int region_id = 0;
  int year = 0;
  std::vector<float> one_hot;

  static RegionTag make(int region_id, int year, int num_regions);
};

// Per-skip-level channel scale and bias for one (region, year).
struct FiLMAdapterSet {
  RegionKey key;
  std::vector<torch::Tensor> gamma;
  std::vector<torch::Tensor> beta;

  static FiLMAdapterSet identity(RegionKey key, const std::vector<int>& channels);
  std::int64_t parameter_count() const;
  std::vector<torch::Tensor> parameters() const;
  FiLMAdapterSet clone() const;
};

// out[b, c, ...] = gamma[b, c] * x[b, c, ...] + beta[b, c]. Accepts an
// unbatched feature map [C][T][H][W] with [C] vectors, or a batch
// [B][C][T][H][W] with [C] or [B][C] vectors.
torch::Tensor apply_modulation(const torch::Tensor& x, const torch::Tensor& gamma,
                               const torch::Tensor& beta);

// Two fully-connected layers with a ReLU. The last layer starts at zero and
// predicts (delta_gamma, beta) with gamma = 1 + delta_gamma, so a fresh
// conditioner is the identity modulation.
class RCNConditionerImpl : public torch::nn::Module {
 public:
  RCNConditionerImpl(int num_regions, int hidden, int channels);

  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& one_hot);

  int num_regions() const { return num_regions_; }
  int channels() const { return channels_; }

 private:
  int num_regions_;
  int channels_;
  torch::nn::Linear fc1_{nullptr};
  torch::nn::Linear fc2_{nullptr};
};
TORCH_MODULE(RCNConditioner);

class ResidualUnitImpl : public torch::nn::Module {
 public:
  ResidualUnitImpl(int in_channels, int out_channels, bool transposed);

  torch::Tensor forward(const torch::Tensor& x);

  bool has_projection() const { return !projection_.is_empty(); }
  torch::Tensor projection_weight() const;

 private:
  // Exactly one of the conv / transposed-conv pairs is populated.
  torch::nn::Conv3d conv1_{nullptr};
  torch::nn::Conv3d conv2_{nullptr};
  torch::nn::ConvTranspose3d tconv1_{nullptr};
  torch::nn::ConvTranspose3d tconv2_{nullptr};
  torch::nn::GroupNorm norm1_{nullptr};
  torch::nn::GroupNorm norm2_{nullptr};
  torch::nn::Conv3d projection_{nullptr};
};
TORCH_MODULE(ResidualUnit);

struct ForwardOptions {
  // false skips the region-conditioned bottleneck modulation entirely.
  bool use_rcn = true;
};

class BackboneImpl : public torch::nn::Module {
 public:
  BackboneImpl(BackboneConfig config, int num_regions);

  // x: [B][C_in][T_in][H][W]; one region id per batch entry. When `adapters`
  // is null the identity FiLM set is applied; otherwise its key region must
  // match every region id. Returns probabilities [B][1][T_out][H][W].
  torch::Tensor forward(const torch::Tensor& x, const std::vector<int>& region_ids,
                        const FiLMAdapterSet* adapters = nullptr,
                        ForwardOptions options = {});

  // Single-sample convenience: x [C_in][T_in][H][W] -> [1][T_out][H][W].
  torch::Tensor forward_one(const torch::Tensor& x, const RegionTag& tag,
                            const FiLMAdapterSet* adapters = nullptr);

  std::pair<torch::Tensor, torch::Tensor> region_context(const std::vector<int>& region_ids);

  // The kernel set penalized by SRIP+: skip-path 1x1x1 convolutions followed
  // by residual-shortcut 1x1x1 convolutions, in a stable order.
  std::vector<std::pair<std::string, torch::Tensor>> orthogonal_kernels() const;
  std::vector<torch::Tensor> orthogonal_kernel_tensors() const;

  std::vector<torch::Tensor> conditioning_parameters() const;  // RCN only
  std::vector<torch::Tensor> backbone_parameters() const;      // everything else

  FiLMAdapterSet identity_adapters(RegionKey key) const;

  const BackboneConfig& config() const { return config_; }
  int num_regions() const { return num_regions_; }

 private:
  BackboneConfig config_;
  int num_regions_;
  std::vector<ResidualUnit> encoders_;
  ResidualUnit bottleneck_{nullptr};
  RCNConditioner rcn_{nullptr};
  std::vector<torch::nn::Conv3d> skip_convs_;
  std::vector<torch::nn::ConvTranspose3d> upsamplers_;
  std::vector<ResidualUnit> decoders_;
  torch::nn::Conv3d head_{nullptr};
  torch::nn::Dropout dropout_{nullptr};
  torch::nn::MaxPool3d pool_{nullptr};
};
TORCH_MODULE(Backbone);

// Parameters are initialised from `seed` via the global libtorch generator.
Backbone build_backbone(const BackboneConfig& config, int num_regions, std::uint64_t seed);

struct ParameterCounts {
  std::int64_t backbone = 0;
  std::int64_t conditioning = 0;  // RCN + every adapter set supplied
  double overhead() const {
    return backbone > 0 ? static_cast<double>(conditioning) / static_cast<double>(backbone) : 0.0;
  }
};

ParameterCounts count_parameters(const Backbone& backbone,
                                 const std::vector<FiLMAdapterSet>& adapters = {});

// Deep copy (parameters and buffers) into a freshly built module.
Backbone clone_backbone(const Backbone& backbone);

// FNV-1a over the raw bytes of every parameter and buffer, in registration order.
std::uint64_t parameter_hash(const torch::nn::Module& module);

}  // namespace nowcast::model
