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

#include "nowcast/array_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "nowcast/errors.hpp"

namespace nowcast::io {

static_assert(std::endian::native == std::endian::little,
              "array I/O assumes a little-endian host");

void put_u32(std::string& out, std::uint32_t v) {
  char buf[4];
  std::memcpy(buf, &v, 4);
  out.append(buf, 4);
}

void put_u64(std::string& out, std::uint64_t v) {
  char buf[8];
  std::memcpy(buf, &v, 8);
  out.append(buf, 8);
}

void put_f32_data(std::string& out, const torch::Tensor& values) {
  auto t = values.detach().to(torch::kCPU, torch::kFloat32).contiguous();
  out.append(reinterpret_cast<const char*>(t.data_ptr<float>()),
             static_cast<std::size_t>(t.numel()) * sizeof(float));
}

std::uint32_t get_u32(std::string_view in, std::size_t& pos, const char* field) {
  if (pos + 4 > in.size()) throw FormatError(std::string("truncated field: ") + field);
  std::uint32_t v;
  std::memcpy(&v, in.data() + pos, 4);
  pos += 4;
  return v;
}

std::uint64_t get_u64(std::string_view in, std::size_t& pos, const char* field) {
  if (pos + 8 > in.size()) throw FormatError(std::string("truncated field: ") + field);
  std::uint64_t v;
  std::memcpy(&v, in.data() + pos, 8);
  pos += 8;
  return v;
}

torch::Tensor get_f32_data(std::string_view in, std::size_t& pos, at::IntArrayRef shape,
                           const std::string& field) {
  std::int64_t count = 1;
  for (auto d : shape) {
    if (d < 0) throw FormatError("negative extent in field: " + field);
    count *= d;
  }
  const auto bytes = static_cast<std::size_t>(count) * sizeof(float);
  if (pos + bytes > in.size()) throw FormatError("truncated data in field: " + field);
  auto t = torch::empty(shape, torch::kFloat32);
  std::memcpy(t.data_ptr<float>(), in.data() + pos, bytes);
  pos += bytes;
  return t;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open file: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write file: " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_array(const std::filesystem::path& path, const torch::Tensor& values) {
  std::string out(kArrayMagic);
  put_u32(out, kArrayVersion);
  put_u32(out, static_cast<std::uint32_t>(values.dim()));
  for (auto d : values.sizes()) put_u64(out, static_cast<std::uint64_t>(d));
  put_f32_data(out, values);
  write_file_atomic(path, out);
}

torch::Tensor read_array(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const std::string_view in(bytes);
  if (in.size() < kArrayMagic.size() || in.substr(0, kArrayMagic.size()) != kArrayMagic) {
    throw FormatError("bad magic in " + path.string());
  }
  std::size_t pos = kArrayMagic.size();
  const auto version = get_u32(in, pos, "version");
  if (version != kArrayVersion) {
    throw FormatError("unsupported version " + std::to_string(version) + " in " + path.string());
  }
  const auto rank = get_u32(in, pos, "rank");
  if (rank > 16) throw FormatError("implausible rank in " + path.string());
  std::vector<std::int64_t> shape(rank);
  for (auto& d : shape) d = static_cast<std::int64_t>(get_u64(in, pos, "shape"));
  auto t = get_f32_data(in, pos, shape, "data of " + path.string());
  if (pos != in.size()) throw FormatError("trailing bytes in " + path.string());
  return t;
}

}  // namespace nowcast::io
