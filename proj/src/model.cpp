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

#include "nowcast/model.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cstring>
#include <stdexcept>

#include "nowcast/datagen.hpp"

namespace nowcast::model {
namespace {

namespace nn = torch::nn;

int norm_groups(int channels) {
  for (int g : {8, 4, 2}) {
    if (channels % g == 0) return g;
  }
  return 1;
}

// Restores the default CPU generator when leaving scope.
class GeneratorStateGuard {
 public:
  GeneratorStateGuard() : state_(at::detail::getDefaultCPUGenerator().get_state()) {}
  ~GeneratorStateGuard() {
    at::Generator gen = at::detail::getDefaultCPUGenerator();
    gen.set_state(state_);
  }
  GeneratorStateGuard(const GeneratorStateGuard&) = delete;
  GeneratorStateGuard& operator=(const GeneratorStateGuard&) = delete;

 private:
  at::Tensor state_;
};

}  // namespace

void BackboneConfig::validate() const {
  if (levels < 1) throw std::invalid_argument("levels must be >= 1");
  if (base_channels < 1) throw std::invalid_argument("base_channels must be >= 1");
  if (in_channels < 1 || t_in < 1 || out_frames < 1) {
    throw std::invalid_argument("in_channels, t_in and out_frames must be >= 1");
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw std::invalid_argument("dropout_rate must lie in [0, 1)");
  }
  if (rcn_hidden_per_region < 1) throw std::invalid_argument("rcn_hidden_per_region must be >= 1");
  if (levels > 16 || (static_cast<long long>(base_channels) << levels) > (1LL << 20)) {
    throw std::invalid_argument("channel count overflow");
  }
}

std::vector<int> BackboneConfig::skip_channels() const {
  std::vector<int> out;
  for (int l = 0; l < levels; ++l) out.push_back(level_channels(l));
  return out;
}

RegionTag RegionTag::make(int region_id, int year, int num_regions) {
  return {region_id, year, datagen::region_one_hot(region_id, num_regions)};
}

FiLMAdapterSet FiLMAdapterSet::identity(RegionKey key, const std::vector<int>& channels) {
  FiLMAdapterSet set;
  set.key = key;
  for (int c : channels) {
    set.gamma.push_back(torch::ones({c}));
    set.beta.push_back(torch::zeros({c}));
  }
  return set;
}

std::int64_t FiLMAdapterSet::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& g : gamma) n += g.numel();
  for (const auto& b : beta) n += b.numel();
  return n;
}

std::vector<torch::Tensor> FiLMAdapterSet::parameters() const {
  std::vector<torch::Tensor> out(gamma);
  out.insert(out.end(), beta.begin(), beta.end());
  return out;
}

FiLMAdapterSet FiLMAdapterSet::clone() const {
  FiLMAdapterSet out;
  out.key = key;
  for (const auto& g : gamma) out.gamma.push_back(g.detach().clone());
  for (const auto& b : beta) out.beta.push_back(b.detach().clone());
  return out;
}

torch::Tensor apply_modulation(const torch::Tensor& x, const torch::Tensor& gamma,
                               const torch::Tensor& beta) {
  if (gamma.sizes() != beta.sizes()) {
    throw std::invalid_argument("gamma and beta must have the same shape");
  }
  if (x.dim() == 4) {
    if (gamma.dim() != 1 || gamma.size(0) != x.size(0)) {
      throw std::invalid_argument("modulation vectors must match the channel count");
    }
    return gamma.view({-1, 1, 1, 1}) * x + beta.view({-1, 1, 1, 1});
  }
  if (x.dim() == 5) {
    const auto batch = x.size(0), channels = x.size(1);
    if (gamma.dim() == 1 && gamma.size(0) == channels) {
      return gamma.view({1, -1, 1, 1, 1}) * x + beta.view({1, -1, 1, 1, 1});
    }
    if (gamma.dim() == 2 && gamma.size(0) == batch && gamma.size(1) == channels) {
      return gamma.view({batch, channels, 1, 1, 1}) * x + beta.view({batch, channels, 1, 1, 1});
    }
    throw std::invalid_argument("modulation vectors must match the channel count");
  }
  throw std::invalid_argument("feature map must be [C][T][H][W] or [B][C][T][H][W]");
}

RCNConditionerImpl::RCNConditionerImpl(int num_regions, int hidden, int channels)
    : num_regions_(num_regions), channels_(channels) {
  fc1_ = register_module("fc1", nn::Linear(num_regions, hidden));
  fc2_ = register_module("fc2", nn::Linear(hidden, 2 * channels));
  torch::NoGradGuard no_grad;
  fc2_->weight.zero_();
  fc2_->bias.zero_();
}

std::pair<torch::Tensor, torch::Tensor> RCNConditionerImpl::forward(const torch::Tensor& one_hot) {
  const auto input = one_hot.dim() == 1 ? one_hot.unsqueeze(0) : one_hot;
  if (input.dim() != 2 || input.size(1) != num_regions_) {
    throw std::invalid_argument("RCN input length must equal the number of regions");
  }
  const auto out = fc2_(torch::relu(fc1_(input)));
  auto gamma = 1.0 + out.narrow(1, 0, channels_);
  auto beta = out.narrow(1, channels_, channels_);
  if (one_hot.dim() == 1) return {gamma.squeeze(0), beta.squeeze(0)};
  return {gamma, beta};
}

ResidualUnitImpl::ResidualUnitImpl(int in_channels, int out_channels, bool transposed) {
  if (transposed) {
    tconv1_ = register_module(
        "conv1", nn::ConvTranspose3d(nn::ConvTranspose3dOptions(in_channels, out_channels, 3).padding(1)));
    tconv2_ = register_module(
        "conv2", nn::ConvTranspose3d(nn::ConvTranspose3dOptions(out_channels, out_channels, 3).padding(1)));
  } else {
    conv1_ = register_module(
        "conv1", nn::Conv3d(nn::Conv3dOptions(in_channels, out_channels, 3).padding(1)));
    conv2_ = register_module(
        "conv2", nn::Conv3d(nn::Conv3dOptions(out_channels, out_channels, 3).padding(1)));
  }
  norm1_ = register_module("norm1", nn::GroupNorm(norm_groups(out_channels), out_channels));
  norm2_ = register_module("norm2", nn::GroupNorm(norm_groups(out_channels), out_channels));
  if (in_channels != out_channels) {
    projection_ = register_module(
        "projection", nn::Conv3d(nn::Conv3dOptions(in_channels, out_channels, 1).bias(false)));
  }
}

torch::Tensor ResidualUnitImpl::forward(const torch::Tensor& x) {
  auto h = conv1_ ? conv1_(x) : tconv1_(x);
  h = torch::relu(norm1_(h));
  h = conv2_ ? conv2_(h) : tconv2_(h);
  h = norm2_(h);
  const auto shortcut = projection_ ? projection_(x) : x;
  return torch::relu(h + shortcut);
}

torch::Tensor ResidualUnitImpl::projection_weight() const {
  if (!projection_) throw std::logic_error("residual unit has no projection");
  return projection_->weight;
}

BackboneImpl::BackboneImpl(BackboneConfig config, int num_regions)
    : config_(config), num_regions_(num_regions) {
  config_.validate();
  if (num_regions < 1) throw std::invalid_argument("num_regions must be >= 1");
  const int levels = config_.levels;

  int in = config_.in_channels;
  for (int l = 0; l < levels; ++l) {
    const int c = config_.level_channels(l);
    encoders_.push_back(register_module("encoder" + std::to_string(l), ResidualUnit(in, c, false)));
    in = c;
  }
  const int cb = config_.bottleneck_channels();
  bottleneck_ = register_module("bottleneck", ResidualUnit(in, cb, false));
  rcn_ = register_module("rcn",
                         RCNConditioner(num_regions, config_.rcn_hidden_per_region * num_regions, cb));

  skip_convs_.resize(static_cast<std::size_t>(levels), nullptr);
  upsamplers_.resize(static_cast<std::size_t>(levels), nullptr);
  decoders_.resize(static_cast<std::size_t>(levels), nullptr);
  for (int l = levels - 1; l >= 0; --l) {
    const auto i = static_cast<std::size_t>(l);
    const int c = config_.level_channels(l);
    const int above = l + 1 == levels ? cb : config_.level_channels(l + 1);
    const auto name = std::to_string(l);
    skip_convs_[i] = register_module(
        "skip" + name, nn::Conv3d(nn::Conv3dOptions(c, c, 1).bias(false)));
    upsamplers_[i] = register_module(
        "up" + name,
        nn::ConvTranspose3d(nn::ConvTranspose3dOptions(above, c, {1, 2, 2}).stride({1, 2, 2})));
    decoders_[i] = register_module("decoder" + name, ResidualUnit(2 * c, c, true));
  }
  // Collapses the temporal axis and emits one channel per lead time.
  head_ = register_module(
      "head", nn::Conv3d(nn::Conv3dOptions(config_.level_channels(0), config_.out_frames,
                                           {config_.t_in, 1, 1})));
  dropout_ = register_module("dropout", nn::Dropout(config_.dropout_rate));
  pool_ = register_module("pool", nn::MaxPool3d(nn::MaxPool3dOptions({1, 2, 2})));
}

std::pair<torch::Tensor, torch::Tensor> BackboneImpl::region_context(
    const std::vector<int>& region_ids) {
  auto one_hot = torch::zeros({static_cast<std::int64_t>(region_ids.size()), num_regions_});
  for (std::size_t b = 0; b < region_ids.size(); ++b) {
    const int r = region_ids[b];
    if (r < 0 || r >= num_regions_) {
      throw std::invalid_argument("region id " + std::to_string(r) + " out of range");
    }
    one_hot[static_cast<std::int64_t>(b)][r] = 1.0f;
  }
  return rcn_(one_hot);
}

torch::Tensor BackboneImpl::forward(const torch::Tensor& x, const std::vector<int>& region_ids,
                                    const FiLMAdapterSet* adapters, ForwardOptions options) {
  const int levels = config_.levels;
  if (x.dim() != 5) throw std::invalid_argument("input must be [B][C][T][H][W]");
  if (x.size(1) != config_.in_channels || x.size(2) != config_.t_in) {
    throw std::invalid_argument("input channel/time extents do not match the backbone config");
  }
  const std::int64_t stride = 1LL << levels;
  if (x.size(3) % stride != 0 || x.size(4) % stride != 0) {
    throw std::invalid_argument("input height and width must be divisible by 2^levels");
  }
  if (static_cast<std::int64_t>(region_ids.size()) != x.size(0)) {
    throw std::invalid_argument("need one region id per batch entry");
  }

  FiLMAdapterSet identity;
  if (adapters != nullptr) {
    for (int r : region_ids) {
      if (r != adapters->key.region) {
        throw std::invalid_argument("adapter key " + to_string(adapters->key) +
                                    " does not match region " + std::to_string(r));
      }
    }
    if (adapters->gamma.size() != static_cast<std::size_t>(levels) ||
        adapters->beta.size() != static_cast<std::size_t>(levels)) {
      throw std::invalid_argument("adapter set must hold one pair per skip level");
    }
  } else {
    identity = identity_adapters({region_ids.empty() ? 0 : region_ids.front(), 0});
    adapters = &identity;
  }

  std::vector<torch::Tensor> skips;
  auto h = x;
  for (int l = 0; l < levels; ++l) {
    h = dropout_(encoders_[static_cast<std::size_t>(l)](h));
    skips.push_back(h);
    h = pool_(h);
  }
  h = dropout_(bottleneck_(h));
  if (options.use_rcn) {
    const auto [gamma, beta] = region_context(region_ids);
    h = apply_modulation(h, gamma, beta);
  }
  for (int l = levels - 1; l >= 0; --l) {
    const auto i = static_cast<std::size_t>(l);
    const auto up = upsamplers_[i](h);
    auto skip = skip_convs_[i](skips[i]);
    skip = apply_modulation(skip, adapters->gamma[i], adapters->beta[i]);
    h = decoders_[i](torch::cat({up, skip}, 1));
  }
  // [B][T_out][1][H][W] -> [B][1][T_out][H][W]
  return torch::sigmoid(head_(h).permute({0, 2, 1, 3, 4}));
}

torch::Tensor BackboneImpl::forward_one(const torch::Tensor& x, const RegionTag& tag,
                                        const FiLMAdapterSet* adapters) {
  if (x.dim() != 4) throw std::invalid_argument("sample must be [C][T][H][W]");
  if (static_cast<int>(tag.one_hot.size()) != num_regions_) {
    throw std::invalid_argument("region tag one-hot length does not match the backbone");
  }
  if (adapters != nullptr && adapters->key.year != tag.year) {
    throw std::invalid_argument("adapter key " + to_string(adapters->key) +
                                " does not match the tag year");
  }
  return forward(x.unsqueeze(0), {tag.region_id}, adapters).squeeze(0);
}

std::vector<std::pair<std::string, torch::Tensor>> BackboneImpl::orthogonal_kernels() const {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (int l = 0; l < config_.levels; ++l) {
    out.emplace_back("skip" + std::to_string(l) + ".weight",
                     skip_convs_[static_cast<std::size_t>(l)]->weight);
  }
  auto add_projection = [&out](const std::string& name, const ResidualUnit& unit) {
    if (unit->has_projection()) out.emplace_back(name + ".projection.weight", unit->projection_weight());
  };
  for (int l = 0; l < config_.levels; ++l) {
    add_projection("encoder" + std::to_string(l), encoders_[static_cast<std::size_t>(l)]);
  }
  add_projection("bottleneck", bottleneck_);
  for (int l = 0; l < config_.levels; ++l) {
    add_projection("decoder" + std::to_string(l), decoders_[static_cast<std::size_t>(l)]);
  }
  return out;
}

std::vector<torch::Tensor> BackboneImpl::orthogonal_kernel_tensors() const {
  std::vector<torch::Tensor> out;
  for (auto& [name, w] : orthogonal_kernels()) out.push_back(w);
  return out;
}

std::vector<torch::Tensor> BackboneImpl::conditioning_parameters() const {
  return rcn_->parameters();
}

std::vector<torch::Tensor> BackboneImpl::backbone_parameters() const {
  std::vector<torch::Tensor> out;
  for (const auto& item : named_parameters()) {
    if (item.key().rfind("rcn.", 0) != 0) out.push_back(item.value());
  }
  return out;
}

FiLMAdapterSet BackboneImpl::identity_adapters(RegionKey key) const {
  return FiLMAdapterSet::identity(key, config_.skip_channels());
}

Backbone build_backbone(const BackboneConfig& config, int num_regions, std::uint64_t seed) {
  config.validate();
  if (num_regions < 1) throw std::invalid_argument("num_regions must be >= 1");
  torch::manual_seed(seed);
  return Backbone(config, num_regions);
}

ParameterCounts count_parameters(const Backbone& backbone,
                                 const std::vector<FiLMAdapterSet>& adapters) {
  ParameterCounts counts;
  for (const auto& p : backbone->backbone_parameters()) counts.backbone += p.numel();
  for (const auto& p : backbone->conditioning_parameters()) counts.conditioning += p.numel();
  for (const auto& a : adapters) counts.conditioning += a.parameter_count();
  return counts;
}

Backbone clone_backbone(const Backbone& backbone) {
  Backbone copy{nullptr};
  {
    GeneratorStateGuard guard;
    copy = Backbone(backbone->config(), backbone->num_regions());
  }
  torch::NoGradGuard no_grad;
  const auto src = backbone->named_parameters();
  for (auto& item : copy->named_parameters()) item.value().copy_(src[item.key()]);
  const auto src_buffers = backbone->named_buffers();
  for (auto& item : copy->named_buffers()) item.value().copy_(src_buffers[item.key()]);
  copy->train(backbone->is_training());
  return copy;
}

std::uint64_t parameter_hash(const torch::nn::Module& module) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const torch::Tensor& t) {
    const auto c = t.detach().contiguous();
    const auto* bytes = static_cast<const unsigned char*>(c.data_ptr());
    const auto n = static_cast<std::size_t>(c.numel()) * c.element_size();
    for (std::size_t i = 0; i < n; ++i) h = (h ^ bytes[i]) * 0x100000001b3ULL;
  };
  for (const auto& p : module.parameters()) feed(p);
  for (const auto& b : module.buffers()) feed(b);
  return h;
}

}  // namespace nowcast::model
