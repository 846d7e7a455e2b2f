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
#include <span>

namespace nowcast::orthoreg {

// Reshapes a 1x1x1 convolution kernel [out][in][1][1][1] into the matrix
// [out x in] (rows are output channels). Shares storage with the kernel.
torch::Tensor kernel_as_matrix(const torch::Tensor& kernel);

// W^T W - I_n with n = in_channels. Accepts a matrix or a 1x1x1 kernel.
torch::Tensor gram_deviation(const torch::Tensor& weight);

// Standard-normal start vector of length n. A zero draw is redrawn.
torch::Tensor draw_start_vector(std::int64_t n, std::uint64_t seed,
                                torch::Dtype dtype = torch::kFloat64);

struct SpectralEstimate {
  torch::Tensor sigma;      // scalar, differentiable w.r.t. the matrix
  bool degenerate = false;  // the matrix annihilated the iterate
};

// Power method on a symmetric matrix M. Each iteration normalizes v and
// applies u = M v, v = M u; the estimate is |v| / |u| after the last pair.
// The estimate never exceeds the spectral norm of M.
SpectralEstimate spectral_norm_power(const torch::Tensor& symmetric, int iters,
                                     std::uint64_t seed);

struct SripOptions {
  double lambda = 0.1;
  int iters = 1;
  std::uint64_t seed = 0;
};

// lambda / |kernels| * sum_W sigma(W^T W - I). Gradients flow through the
// whole power iteration, including the normalisation of v.
torch::Tensor srip_penalty(std::span<const torch::Tensor> kernels, const SripOptions& options);

// Unweighted mean of sigma over a kernel set, without gradient tracking.
double mean_spectral_deviation(std::span<const torch::Tensor> kernels, int iters,
                               std::uint64_t seed);

}  // namespace nowcast::orthoreg
