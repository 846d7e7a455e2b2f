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

#include <doctest.h>

#include <torch/torch.h>

#include <cstring>
#include <fstream>

#include "nowcast/array_io.hpp"
#include "nowcast/datagen.hpp"
#include "nowcast/errors.hpp"
#include "test_util.hpp"

using namespace nowcast;
using namespace nowcast::datagen;

namespace {

Dims small_dims() {
  Dims d;
  d.height = 16;
  d.width = 16;
  d.t_out = 32;
  return d;
}

RegionProfile profile_named(const std::string& name) {
  for (const auto& p : default_profiles(7)) {
    if (p.name == name) return p;
  }
  throw std::logic_error("unknown profile " + name);
}

bool bit_identical(const torch::Tensor& a, const torch::Tensor& b) {
  return a.sizes() == b.sizes() && a.scalar_type() == b.scalar_type() &&
         std::memcmp(a.contiguous().data_ptr(), b.contiguous().data_ptr(),
                     static_cast<std::size_t>(a.numel()) * a.element_size()) == 0;
}

}  // namespace

TEST_CASE("generate_event is a pure function of (seed, profile, dims)") {
  const auto profile = profile_named("boxi0015");
  const auto a = generate_event(42, profile, small_dims());
  const auto b = generate_event(42, profile, small_dims());
  CHECK(bit_identical(a.x, b.x));
  CHECK(bit_identical(a.rate, b.rate));

  const auto c = generate_event(43, profile, small_dims());
  CHECK_FALSE(bit_identical(a.x, c.x));
}

TEST_CASE("generated tensors have the documented shapes and are finite") {
  const auto ev = generate_event(1, profile_named("boxi0034"), small_dims());
  CHECK(ev.x.sizes() == at::IntArrayRef({11, 4, 16, 16}));
  CHECK(ev.rate.sizes() == at::IntArrayRef({32, 16, 16}));
  CHECK(torch::isfinite(ev.x).all().item<bool>());
  CHECK(torch::isfinite(ev.rate).all().item<bool>());
  CHECK(ev.rate.min().item<float>() >= 0.0f);
}

TEST_CASE("rain fraction calibrates to the boxi0015 target over 200 events") {
  const StormGenerator gen(profile_named("boxi0015"), small_dims());
  double rain = 0.0, total = 0.0;
  for (int k = 0; k < 200; ++k) {
    const auto ev = gen.generate(1000 + static_cast<std::uint64_t>(k));
    rain += binarize_rain(ev.rate, kDefaultRainThreshold).sum().item<double>();
    total += static_cast<double>(ev.rate.numel());
  }
  CHECK(std::abs(rain / total - 0.190) <= 0.05);
}

TEST_CASE("dataset_rain_fraction matches the boxi0076 target") {
  DatagenOptions opts;
  opts.profiles = {profile_named("boxi0076")};
  opts.profiles[0].region_id = 0;
  opts.years = {2019, 2020};
  opts.events_per_key = 100;
  opts.dims = small_dims();
  opts.seed = 5;
  const auto ds = generate_dataset(opts);
  const auto fractions = dataset_rain_fraction(ds);
  REQUIRE(fractions.contains(0));
  CHECK(std::abs(fractions.at(0) - 0.108) <= 0.05);
}

TEST_CASE("zero intensity scale gives an all-zero rain field") {
  auto profile = profile_named("boxi0015");
  profile.intensity_scale = 0.0;
  const auto ev = generate_event(3, profile, small_dims());
  CHECK(ev.rate.abs().max().item<float>() == 0.0f);
}

TEST_CASE("nonpositive dims are rejected") {
  auto dims = small_dims();
  dims.height = 0;
  CHECK_THROWS_AS(generate_event(1, profile_named("boxi0015"), dims), std::invalid_argument);
  dims = small_dims();
  dims.t_out = -1;
  CHECK_THROWS_AS(StormGenerator(profile_named("boxi0015"), dims), std::invalid_argument);
}

TEST_CASE("binarize_rain uses a closed comparison") {
  CHECK(binarize_rain(torch::zeros({2, 3, 3}), 0.2).sum().item<float>() == 0.0f);

  const auto exact = binarize_rain(torch::full({1}, 0.2f), 0.2);
  CHECK(exact.item<float>() == 1.0f);

  const auto mixed = binarize_rain(torch::tensor({0.1f, 0.3f}), 0.2);
  CHECK(mixed[0].item<float>() == 0.0f);
  CHECK(mixed[1].item<float>() == 1.0f);

  CHECK_THROWS_AS(binarize_rain(torch::zeros({1}), 0.0), std::invalid_argument);
  CHECK_THROWS_AS(binarize_rain(torch::zeros({1}), -0.2), std::invalid_argument);
}

TEST_CASE("binarize_rain is idempotent on its own output") {
  torch::manual_seed(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto rates = torch::rand({4, 5, 5}) * 0.5;
    const auto mask = binarize_rain(rates, 0.2);
    CHECK(torch::equal(binarize_rain(mask, 0.2), mask));
  }
}

TEST_CASE("region_one_hot") {
  CHECK(region_one_hot(0, 7) == std::vector<float>{1, 0, 0, 0, 0, 0, 0});
  CHECK(region_one_hot(3, 4) == std::vector<float>{0, 0, 0, 1});
  CHECK_THROWS_AS(region_one_hot(5, 3), std::invalid_argument);
  CHECK_THROWS_AS(region_one_hot(-1, 3), std::invalid_argument);
}

TEST_CASE("dataset_rain_fraction on constant masks and missing regions") {
  Dataset ds;
  ds.manifest.num_regions = 3;
  ds.manifest.rain_threshold = 0.2;
  ds.samples.push_back({{0, 2019, 0}, "train", torch::zeros({11, 4, 2, 2}), torch::ones({3, 2, 2})});
  ds.samples.push_back({{1, 2019, 0}, "train", torch::zeros({11, 4, 2, 2}), torch::zeros({3, 2, 2})});
  const auto f = dataset_rain_fraction(ds);
  CHECK(f.at(0) == 1.0);
  CHECK(f.at(1) == 0.0);
  CHECK_FALSE(f.contains(2));
}

TEST_CASE("dataset write/read round trip is bit-exact") {
  testing::TempDir tmp("roundtrip");
  DatagenOptions opts;
  opts.profiles = default_profiles(2);
  opts.years = {2019, 2020};
  opts.events_per_key = 3;
  opts.dims = small_dims();
  opts.dims.t_out = 4;
  opts.seed = 9;
  const auto ds = generate_dataset(opts);
  const auto dir = tmp.path() / "ds";
  write_dataset(ds, dir);
  const auto back = read_dataset(dir);

  CHECK(back.manifest.dims == ds.manifest.dims);
  CHECK(back.manifest.years == ds.manifest.years);
  CHECK(back.manifest.seed == ds.manifest.seed);
  CHECK(back.manifest.regions.size() == 2);
  REQUIRE(back.samples.size() == ds.samples.size());
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    CHECK(back.samples[i].key == ds.samples[i].key);
    CHECK(back.samples[i].split == ds.samples[i].split);
    CHECK(bit_identical(back.samples[i].x, ds.samples[i].x));
    CHECK(bit_identical(back.samples[i].rate, ds.samples[i].rate));
  }
}

TEST_CASE("dataset reader rejects corrupt inputs") {
  testing::TempDir tmp("corrupt");
  DatagenOptions opts;
  opts.profiles = default_profiles(1);
  opts.years = {2019};
  opts.events_per_key = 2;
  opts.dims = small_dims();
  opts.dims.t_out = 4;
  const auto ds = generate_dataset(opts);
  const auto dir = tmp.path() / "ds";

  SUBCASE("truncated array file") {
    write_dataset(ds, dir);
    const auto file = dir / "samples" / "0_2019_0.x";
    std::filesystem::resize_file(file, std::filesystem::file_size(file) - 7);
    CHECK_THROWS_AS(read_dataset(dir), FormatError);
  }
  SUBCASE("manifest dims disagree with array shape") {
    auto bad = ds;
    bad.manifest.dims.t_out = 5;
    write_dataset(bad, dir);
    try {
      read_dataset(dir);
      FAIL("expected a format error");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("dims") != std::string::npos);
    }
  }
  SUBCASE("format version mismatch") {
    auto bad = ds;
    bad.manifest.format_version = "99";
    write_dataset(bad, dir);
    try {
      read_dataset(dir);
      FAIL("expected a format error");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("format_version") != std::string::npos);
    }
  }
  SUBCASE("bad array magic") {
    write_dataset(ds, dir);
    std::ofstream(dir / "samples" / "0_2019_1.rate", std::ios::binary) << "garbage!";
    CHECK_THROWS_AS(read_dataset(dir), FormatError);
  }
}

TEST_CASE("array header layout is little-endian magic, version, rank, extents") {
  testing::TempDir tmp("header");
  const auto path = tmp.path() / "a.bin";
  io::write_array(path, torch::arange(6, torch::kFloat32).reshape({2, 3}));
  const auto bytes = io::read_file(path);
  REQUIRE(bytes.size() == 8 + 4 + 4 + 2 * 8 + 6 * 4);
  CHECK(bytes.substr(0, 8) == "NCARRF32");
  CHECK(static_cast<unsigned char>(bytes[8]) == 1);   // version
  CHECK(static_cast<unsigned char>(bytes[12]) == 2);  // rank
  CHECK(static_cast<unsigned char>(bytes[16]) == 2);  // extent 0
  CHECK(static_cast<unsigned char>(bytes[24]) == 3);  // extent 1
  float last;
  std::memcpy(&last, bytes.data() + bytes.size() - 4, 4);
  CHECK(last == 5.0f);
}

TEST_CASE("generate_dataset assigns splits and counts per key") {
  DatagenOptions opts;
  opts.profiles = default_profiles(3);
  opts.years = {2019, 2020};
  opts.events_per_key = 5;
  opts.dims = small_dims();
  opts.dims.t_out = 2;
  opts.val_fraction = 0.2;
  const auto ds = generate_dataset(opts);
  CHECK(ds.samples.size() == 3 * 2 * 5);
  CHECK(ds.select("val").size() == 3 * 2 * 1);
  CHECK(ds.select("train", 1, 2020).size() == 4);

  opts.events_per_key = 0;
  CHECK_THROWS_AS(generate_dataset(opts), std::invalid_argument);
}
