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

#include "nowcast/orthoreg.hpp"

#include <random>
#include <stdexcept>

namespace nowcast::orthoreg {
namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

torch::Tensor kernel_as_matrix(const torch::Tensor& kernel) {
  if (kernel.dim() != 5) {
    throw std::invalid_argument("expected a 5-D convolution kernel [out][in][kt][kh][kw]");
  }
  if (kernel.size(2) != 1 || kernel.size(3) != 1 || kernel.size(4) != 1) {
    throw std::invalid_argument("only 1x1x1 kernels can be viewed as matrices");
  }
  return kernel.reshape({kernel.size(0), kernel.size(1)});
}

torch::Tensor gram_deviation(const torch::Tensor& weight) {
  const auto w = weight.dim() == 2 ? weight : kernel_as_matrix(weight);
  const auto n = w.size(1);
  return w.t().matmul(w) - torch::eye(n, w.options());
}

torch::Tensor draw_start_vector(std::int64_t n, std::uint64_t seed, torch::Dtype dtype) {
  if (n < 1) throw std::invalid_argument("start vector length must be >= 1");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto v = torch::empty({n}, torch::kFloat64);
  auto acc = v.accessor<double, 1>();
  bool nonzero = false;
  while (!nonzero) {
    for (std::int64_t i = 0; i < n; ++i) {
      acc[i] = normal(rng);
      nonzero = nonzero || acc[i] != 0.0;
    }
  }
  return v.to(dtype);
}

SpectralEstimate spectral_norm_power(const torch::Tensor& symmetric, int iters,
                                     std::uint64_t seed) {
  if (symmetric.dim() != 2 || symmetric.size(0) != symmetric.size(1)) {
    throw std::invalid_argument("power method needs a square matrix");
  }
  if (iters < 1) throw std::invalid_argument("power method needs iters >= 1");
  const auto& m = symmetric;
  auto v = draw_start_vector(m.size(0), seed, m.scalar_type());
  torch::Tensor u;
  for (int k = 0; k < iters; ++k) {
    const auto v_norm = v.norm();
    if (v_norm.item<double>() == 0.0) return {m.new_zeros({}), true};
    v = v / v_norm;
    u = m.mv(v);
    v = m.mv(u);
  }
  const auto u_norm = u.norm();
  if (u_norm.item<double>() == 0.0) return {m.new_zeros({}), true};
  return {v.norm() / u_norm, false};
}

torch::Tensor srip_penalty(std::span<const torch::Tensor> kernels, const SripOptions& options) {
  if (kernels.empty()) throw std::invalid_argument("SRIP penalty needs a nonempty kernel set");
  if (!(options.lambda >= 0.0)) throw std::invalid_argument("SRIP lambda must be >= 0");
  if (options.lambda == 0.0) return kernels.front().new_zeros({});

  torch::Tensor total = kernels.front().new_zeros({});
  for (std::size_t i = 0; i < kernels.size(); ++i) {
    const auto est =
        spectral_norm_power(gram_deviation(kernels[i]), options.iters, mix_seed(options.seed, i));
    total = total + est.sigma;
  }
  return total * (options.lambda / static_cast<double>(kernels.size()));
}

double mean_spectral_deviation(std::span<const torch::Tensor> kernels, int iters,
                               std::uint64_t seed) {
  if (kernels.empty()) throw std::invalid_argument("empty kernel set");
  torch::NoGradGuard no_grad;
  double total = 0.0;
  for (std::size_t i = 0; i < kernels.size(); ++i) {
    const auto m = gram_deviation(kernels[i].to(torch::kFloat64));
    total += spectral_norm_power(m, iters, mix_seed(seed, i)).sigma.item<double>();
  }
  return total / static_cast<double>(kernels.size());
}

}  // namespace nowcast::orthoreg
