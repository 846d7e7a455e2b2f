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
#include <filesystem>
#include <string_view>

namespace nowcast::io {

// Raw float32 array file:
//   bytes 0..7   magic "NCARRF32"
//   u32          format version (currently 1)
//   u32          rank
//   i64[rank]    extents
//   f32[...]     row-major data
// Every multi-byte field is little-endian.
inline constexpr std::string_view kArrayMagic = "NCARRF32";
inline constexpr std::uint32_t kArrayVersion = 1;

void write_array(const std::filesystem::path& path, const torch::Tensor& values);

// Throws FormatError on a bad magic, unknown version, or truncated payload.
torch::Tensor read_array(const std::filesystem::path& path);

// Little-endian primitives shared by the checkpoint container.
void put_u32(std::string& out, std::uint32_t v);
void put_u64(std::string& out, std::uint64_t v);
void put_f32_data(std::string& out, const torch::Tensor& values);
std::uint32_t get_u32(std::string_view in, std::size_t& pos, const char* field);
std::uint64_t get_u64(std::string_view in, std::size_t& pos, const char* field);
torch::Tensor get_f32_data(std::string_view in, std::size_t& pos, at::IntArrayRef shape,
                           const std::string& field);

std::string read_file(const std::filesystem::path& path);

// Writes to a sibling temp file, then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

}  // namespace nowcast::io
