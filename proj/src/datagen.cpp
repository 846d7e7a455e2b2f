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

#include "nowcast/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <unistd.h>

#include <json.hpp>

#include "nowcast/array_io.hpp"
#include "nowcast/errors.hpp"

namespace nowcast::datagen {
namespace {

using json = nlohmann::json;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t hash_string(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

constexpr int kCalibrationEvents = 48;
constexpr double kCellsPerDomain = 5.0;
constexpr double kChannelNoise = 0.05;

template <typename T>
T require(const json& j, const char* field) {
  if (!j.contains(field)) throw FormatError(std::string("manifest missing field: ") + field);
  try {
    return j.at(field).get<T>();
  } catch (const json::exception&) {
    throw FormatError(std::string("manifest field has wrong type: ") + field);
  }
}

}  // namespace

void Dims::validate() const {
  if (channels <= 0 || t_in <= 0 || t_out <= 0 || height <= 0 || width <= 0) {
    throw std::invalid_argument("dims must be positive");
  }
}

void RegionProfile::validate() const {
  if (!(rain_fraction_target > 0.0 && rain_fraction_target < 1.0)) {
    throw std::invalid_argument("rain_fraction_target must lie in (0, 1)");
  }
  if (!(intensity_scale >= 0.0) || !std::isfinite(intensity_scale)) {
    throw std::invalid_argument("intensity_scale must be finite and nonnegative");
  }
  if (region_id < 0) throw std::invalid_argument("region_id must be nonnegative");
}

std::vector<RegionProfile> default_profiles(int num_regions) {
  static const std::vector<RegionProfile> table = {
      {0, "boxi0015", 0.190, 0.6, 0.9, 1.0},
      {1, "boxi0034", 0.190, -0.5, 1.1, 1.2},
      {2, "boxi0076", 0.108, 0.3, -0.7, 0.8},
      {3, "roxi0004", 0.150, -0.8, -0.4, 1.1},
      {4, "roxi0005", 0.130, 0.9, 0.2, 0.9},
      {5, "roxi0006", 0.170, 0.1, 1.0, 1.3},
      {6, "roxi0007", 0.120, -0.4, 0.6, 1.0},
  };
  if (num_regions < 1) throw std::invalid_argument("num_regions must be >= 1");
  std::vector<RegionProfile> out;
  for (int r = 0; r < num_regions; ++r) {
    if (r < static_cast<int>(table.size())) {
      out.push_back(table[static_cast<std::size_t>(r)]);
    } else {
      const double phase = 0.9 * r;
      out.push_back({r, "region" + std::to_string(r), 0.10 + 0.01 * (r % 10), std::cos(phase),
                     std::sin(phase), 1.0});
    }
  }
  return out;
}

StormGenerator::StormGenerator(RegionProfile profile, Dims dims)
    : profile_(std::move(profile)), dims_(dims) {
  dims_.validate();
  profile_.validate();
  if (profile_.intensity_scale == 0.0) return;

  // Offset = (1 - target) quantile of the latent field over output frames.
  std::vector<double> values;
  values.reserve(static_cast<std::size_t>(kCalibrationEvents * dims_.t_out * dims_.height *
                                          dims_.width));
  const std::uint64_t base = hash_string(profile_.name) ^ splitmix64(profile_.region_id + 1);
  for (int k = 0; k < kCalibrationEvents; ++k) {
    const auto cells = draw_cells(splitmix64(base + 0x5bd1e995ULL * (k + 1)));
    for (std::int64_t t = 0; t < dims_.t_out; ++t) {
      const double frame = static_cast<double>(dims_.t_in + t);
      for (std::int64_t i = 0; i < dims_.height; ++i) {
        for (std::int64_t j = 0; j < dims_.width; ++j) {
          values.push_back(latent(cells, frame, static_cast<double>(i), static_cast<double>(j)));
        }
      }
    }
  }
  const auto n = values.size();
  auto idx = static_cast<std::size_t>(
      std::clamp((1.0 - profile_.rain_fraction_target) * static_cast<double>(n), 0.0,
                 static_cast<double>(n - 1)));
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(idx),
                   values.end());
  rate_offset_ = values[idx];
}

std::vector<StormGenerator::Cell> StormGenerator::draw_cells(std::uint64_t seed) const {
  std::mt19937_64 rng(splitmix64(seed));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const double frames = static_cast<double>(dims_.t_in + dims_.t_out);
  const double h = static_cast<double>(dims_.height);
  const double w = static_cast<double>(dims_.width);
  const double extent = std::min(h, w);
  const double sigma_max = 0.16 * extent;

  const double vy = profile_.velocity_y + 0.15 * normal(rng);
  const double vx = profile_.velocity_x + 0.15 * normal(rng);

  // Cells are placed uniformly at the middle frame in a box wide enough that
  // any cell reaching the domain during the event is represented.
  const double my = std::abs(vy) * frames / 2 + 3 * sigma_max;
  const double mx = std::abs(vx) * frames / 2 + 3 * sigma_max;
  const double area_ratio = (h + 2 * my) * (w + 2 * mx) / (h * w);
  std::poisson_distribution<int> count(kCellsPerDomain * area_ratio);
  const int n = count(rng);

  std::vector<Cell> cells;
  cells.reserve(static_cast<std::size_t>(n));
  for (int c = 0; c < n; ++c) {
    Cell cell{};
    const double ym = -my + unit(rng) * (h + 2 * my);
    const double xm = -mx + unit(rng) * (w + 2 * mx);
    cell.vy = vy + 0.05 * normal(rng);
    cell.vx = vx + 0.05 * normal(rng);
    cell.y0 = ym - cell.vy * frames / 2;
    cell.x0 = xm - cell.vx * frames / 2;
    cell.sigma = (0.06 + 0.10 * unit(rng)) * extent;
    cell.amplitude = 0.5 + unit(rng);
    cell.peak_frame = -frames / 2 + unit(rng) * 2 * frames;
    cell.lifetime = frames * (1.0 + 2.0 * unit(rng));
    cells.push_back(cell);
  }
  return cells;
}

double StormGenerator::latent(const std::vector<Cell>& cells, double frame, double y, double x) {
  double total = 0.0;
  for (const auto& c : cells) {
    const double cy = c.y0 + c.vy * frame;
    const double cx = c.x0 + c.vx * frame;
    const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
    const double life = (frame - c.peak_frame) / c.lifetime;
    total += c.amplitude * std::exp(-life * life) * std::exp(-d2 / (2 * c.sigma * c.sigma));
  }
  return total;
}

Event StormGenerator::generate(std::uint64_t seed) const {
  const auto cells = draw_cells(seed);
  std::mt19937_64 noise_rng(splitmix64(seed ^ 0xA5A5A5A5A5A5A5A5ULL));
  std::normal_distribution<double> noise(0.0, 1.0);

  const auto C = dims_.channels, T = dims_.t_in, H = dims_.height, W = dims_.width;
  const auto TO = dims_.t_out;
  Event ev;
  ev.x = torch::empty({C, T, H, W}, torch::kFloat32);
  ev.rate = torch::empty({TO, H, W}, torch::kFloat32);
  auto x = ev.x.accessor<float, 4>();
  auto rate = ev.rate.accessor<float, 3>();

  // Channel recipe, indexed modulo 11:
  //   0 latent, 1 latent^2, 2 sqrt(latent),
  //   3..5 latent shifted by (2,0), (0,2), (2,2) pixels,
  //   6..8 latent lagged by 1, 2, 3 frames,
  //   9..10 pure noise decoys.
  constexpr double kShift = 2.0;
  for (std::int64_t t = 0; t < T; ++t) {
    const double frame = static_cast<double>(t);
    for (std::int64_t i = 0; i < H; ++i) {
      for (std::int64_t j = 0; j < W; ++j) {
        const double y = static_cast<double>(i), xx = static_cast<double>(j);
        const double l = latent(cells, frame, y, xx);
        for (std::int64_t c = 0; c < C; ++c) {
          double v = 0.0;
          switch (c % 11) {
            case 0: v = l; break;
            case 1: v = l * l; break;
            case 2: v = std::sqrt(l); break;
            case 3: v = latent(cells, frame, y - kShift, xx); break;
            case 4: v = latent(cells, frame, y, xx - kShift); break;
            case 5: v = latent(cells, frame, y - kShift, xx - kShift); break;
            case 6: v = latent(cells, frame - 1, y, xx); break;
            case 7: v = latent(cells, frame - 2, y, xx); break;
            case 8: v = latent(cells, frame - 3, y, xx); break;
            default: v = noise(noise_rng); break;
          }
          x[c][t][i][j] = static_cast<float>(v + kChannelNoise * noise(noise_rng));
        }
      }
    }
  }

  const double scale = profile_.intensity_scale;
  const double base = scale > 0.0 ? rate_offset_ - kDefaultRainThreshold / scale : 0.0;
  for (std::int64_t t = 0; t < TO; ++t) {
    const double frame = static_cast<double>(T + t);
    for (std::int64_t i = 0; i < H; ++i) {
      for (std::int64_t j = 0; j < W; ++j) {
        const double l = latent(cells, frame, static_cast<double>(i), static_cast<double>(j));
        rate[t][i][j] = static_cast<float>(scale * std::max(0.0, l - base));
      }
    }
  }
  return ev;
}

Event generate_event(std::uint64_t seed, const RegionProfile& profile, const Dims& dims) {
  return StormGenerator(profile, dims).generate(seed);
}

torch::Tensor binarize_rain(const torch::Tensor& rate, double threshold) {
  if (!(threshold > 0.0)) throw std::invalid_argument("rain threshold must be > 0");
  return rate.ge(threshold).to(torch::kFloat32);
}

std::vector<float> region_one_hot(int region_id, int num_regions) {
  if (num_regions < 1 || region_id < 0 || region_id >= num_regions) {
    throw std::invalid_argument("region id " + std::to_string(region_id) + " out of range [0, " +
                                std::to_string(num_regions) + ")");
  }
  std::vector<float> v(static_cast<std::size_t>(num_regions), 0.0f);
  v[static_cast<std::size_t>(region_id)] = 1.0f;
  return v;
}

std::vector<const Sample*> Dataset::select(const std::string& split, int region, int year) const {
  std::vector<const Sample*> out;
  for (const auto& s : samples) {
    if (!split.empty() && s.split != split) continue;
    if (region >= 0 && s.key.region != region) continue;
    if (year >= 0 && s.key.year != year) continue;
    out.push_back(&s);
  }
  return out;
}

std::uint64_t sample_seed(std::uint64_t base, const SampleKey& key) {
  std::uint64_t h = splitmix64(base);
  h = splitmix64(h ^ static_cast<std::uint64_t>(key.region));
  h = splitmix64(h ^ static_cast<std::uint64_t>(key.year));
  return splitmix64(h ^ static_cast<std::uint64_t>(key.id));
}

Dataset generate_dataset(const DatagenOptions& options) {
  if (options.events_per_key < 1) throw std::invalid_argument("events_per_key must be >= 1");
  if (options.profiles.empty()) throw std::invalid_argument("at least one region profile required");
  if (options.years.empty()) throw std::invalid_argument("at least one year required");
  if (!(options.val_fraction >= 0.0 && options.val_fraction < 1.0)) {
    throw std::invalid_argument("val_fraction must lie in [0, 1)");
  }
  if (!(options.rain_threshold > 0.0)) throw std::invalid_argument("rain_threshold must be > 0");
  options.dims.validate();

  Dataset ds;
  auto& m = ds.manifest;
  m.num_regions = static_cast<int>(options.profiles.size());
  m.years = options.years;
  m.dims = options.dims;
  m.rain_threshold = options.rain_threshold;
  m.seed = options.seed;
  m.regions = options.profiles;
  for (std::size_t r = 0; r < m.regions.size(); ++r) {
    if (m.regions[r].region_id != static_cast<int>(r)) {
      throw std::invalid_argument("region ids must be 0..R-1 in order");
    }
  }

  const int n = options.events_per_key;
  int n_val = static_cast<int>(std::lround(options.val_fraction * n));
  if (options.val_fraction > 0.0 && n >= 2) n_val = std::clamp(n_val, 1, n - 1);
  for (const auto& profile : options.profiles) {
    const StormGenerator gen(profile, options.dims);
    for (int year : options.years) {
      for (int id = 0; id < n; ++id) {
        Sample s;
        s.key = {profile.region_id, year, id};
        s.split = id >= n - n_val ? "val" : "train";
        auto ev = gen.generate(sample_seed(options.seed, s.key));
        s.x = std::move(ev.x);
        s.rate = std::move(ev.rate);
        ds.samples.push_back(std::move(s));
      }
    }
  }
  return ds;
}

std::map<int, double> dataset_rain_fraction(const Dataset& dataset) {
  std::map<int, std::pair<double, double>> acc;
  for (const auto& s : dataset.samples) {
    auto& [rain, total] = acc[s.key.region];
    rain += dataset.mask(s).sum().item<double>();
    total += static_cast<double>(s.rate.numel());
  }
  std::map<int, double> out;
  for (const auto& [region, counts] : acc) {
    if (counts.second > 0) out[region] = counts.first / counts.second;
  }
  return out;
}

std::string sample_stem(const SampleKey& key) {
  return std::to_string(key.region) + "_" + std::to_string(key.year) + "_" +
         std::to_string(key.id);
}

void write_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const auto& m = dataset.manifest;
  json j;
  j["format_version"] = m.format_version;
  j["generator_version"] = m.generator_version;
  j["num_regions"] = m.num_regions;
  j["years"] = m.years;
  j["dims"] = {{"channels", m.dims.channels}, {"t_in", m.dims.t_in},
               {"t_out", m.dims.t_out},       {"height", m.dims.height},
               {"width", m.dims.width},       {"height_out", m.dims.height_out()},
               {"width_out", m.dims.width_out()}};
  j["rain_threshold"] = m.rain_threshold;
  j["seed"] = m.seed;
  j["regions"] = json::array();
  for (const auto& p : m.regions) {
    j["regions"].push_back({{"region_id", p.region_id},
                            {"name", p.name},
                            {"rain_fraction_target", p.rain_fraction_target},
                            {"velocity", {p.velocity_y, p.velocity_x}},
                            {"intensity_scale", p.intensity_scale}});
  }
  j["samples"] = json::array();
  for (const auto& s : dataset.samples) {
    j["samples"].push_back(
        {{"region", s.key.region}, {"year", s.key.year}, {"id", s.key.id}, {"split", s.split}});
  }

  fs::path tmp = dir;
  tmp += ".partial-" + std::to_string(::getpid());
  fs::remove_all(tmp);
  fs::create_directories(tmp / "samples");
  for (const auto& s : dataset.samples) {
    const auto stem = sample_stem(s.key);
    io::write_array(tmp / "samples" / (stem + ".x"), s.x);
    io::write_array(tmp / "samples" / (stem + ".rate"), s.rate);
  }
  io::write_file_atomic(tmp / "manifest.json", j.dump(2) + "\n");
  if (dir.has_parent_path()) fs::create_directories(dir.parent_path());
  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

Dataset read_dataset(const std::filesystem::path& dir) {
  json j;
  try {
    j = json::parse(io::read_file(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw FormatError(std::string("manifest.json is not valid JSON: ") + e.what());
  }
  Dataset ds;
  auto& m = ds.manifest;
  m.format_version = require<std::string>(j, "format_version");
  if (m.format_version != kDatasetFormatVersion) {
    throw FormatError("format_version mismatch: expected " + std::string(kDatasetFormatVersion) +
                      ", found " + m.format_version);
  }
  if (j.contains("generator_version")) m.generator_version = require<std::string>(j, "generator_version");
  m.num_regions = require<int>(j, "num_regions");
  m.years = require<std::vector<int>>(j, "years");
  m.rain_threshold = require<double>(j, "rain_threshold");
  if (!(m.rain_threshold > 0.0)) throw FormatError("rain_threshold must be > 0");
  m.seed = require<std::uint64_t>(j, "seed");
  const auto dims = require<json>(j, "dims");
  m.dims.channels = require<std::int64_t>(dims, "channels");
  m.dims.t_in = require<std::int64_t>(dims, "t_in");
  m.dims.t_out = require<std::int64_t>(dims, "t_out");
  m.dims.height = require<std::int64_t>(dims, "height");
  m.dims.width = require<std::int64_t>(dims, "width");
  if (require<std::int64_t>(dims, "height_out") != m.dims.height ||
      require<std::int64_t>(dims, "width_out") != m.dims.width) {
    throw FormatError("dims: output grid must match input grid");
  }
  try {
    m.dims.validate();
  } catch (const std::invalid_argument&) {
    throw FormatError("dims: extents must be positive");
  }
  for (const auto& rj : require<json>(j, "regions")) {
    RegionProfile p;
    p.region_id = require<int>(rj, "region_id");
    p.name = require<std::string>(rj, "name");
    p.rain_fraction_target = require<double>(rj, "rain_fraction_target");
    const auto vel = require<std::vector<double>>(rj, "velocity");
    if (vel.size() != 2) throw FormatError("regions.velocity must have two entries");
    p.velocity_y = vel[0];
    p.velocity_x = vel[1];
    p.intensity_scale = require<double>(rj, "intensity_scale");
    m.regions.push_back(std::move(p));
  }
  if (static_cast<int>(m.regions.size()) != m.num_regions) {
    throw FormatError("num_regions does not match the regions table");
  }

  const std::vector<std::int64_t> x_shape{m.dims.channels, m.dims.t_in, m.dims.height,
                                          m.dims.width};
  const std::vector<std::int64_t> rate_shape{m.dims.t_out, m.dims.height, m.dims.width};
  for (const auto& sj : require<json>(j, "samples")) {
    Sample s;
    s.key = {require<int>(sj, "region"), require<int>(sj, "year"), require<int>(sj, "id")};
    s.split = require<std::string>(sj, "split");
    if (s.key.region < 0 || s.key.region >= m.num_regions) {
      throw FormatError("samples.region out of range: " + std::to_string(s.key.region));
    }
    const auto stem = sample_stem(s.key);
    s.x = io::read_array(dir / "samples" / (stem + ".x"));
    s.rate = io::read_array(dir / "samples" / (stem + ".rate"));
    if (s.x.sizes() != at::IntArrayRef(x_shape)) {
      throw FormatError("dims: shape of " + stem + ".x does not match manifest");
    }
    if (s.rate.sizes() != at::IntArrayRef(rate_shape)) {
      throw FormatError("dims: shape of " + stem + ".rate does not match manifest");
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace nowcast::datagen
