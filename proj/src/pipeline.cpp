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

#include "nowcast/pipeline.hpp"

#include <iostream>
#include <sstream>

#include "nowcast/array_io.hpp"
#include "nowcast/checkpoint.hpp"
#include "nowcast/errors.hpp"
#include "nowcast/eval.hpp"

namespace nowcast::pipeline {
namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

void info(const std::string& msg) { std::cerr << "[nowcast] " << msg << '\n'; }
void warn(const std::string& msg) { std::cerr << "[nowcast] warning: " << msg << '\n'; }

template <typename T>
void read_key(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw std::invalid_argument(std::string("config key has the wrong type: ") + key);
  }
}

datagen::Dataset load_dataset(const PipelineConfig& cfg) {
  if (!fs::exists(cfg.data_dir / "manifest.json")) {
    throw DependencyError("dataset not found at " + cfg.data_dir.string() + " (run `datagen` first)");
  }
  return datagen::read_dataset(cfg.data_dir);
}

Checkpoint require_checkpoint(const PipelineConfig& cfg, const char* file, const char* stage) {
  const auto path = cfg.out_dir / file;
  if (!fs::exists(path)) {
    throw DependencyError(std::string("missing ") + path.string() + "; run the `" + stage +
                          "` stage first");
  }
  return load_checkpoint(path);
}

model::BackboneConfig backbone_for(const PipelineConfig& cfg, const datagen::Manifest& m) {
  auto bc = cfg.backbone;
  bc.in_channels = static_cast<int>(m.dims.channels);
  bc.t_in = static_cast<int>(m.dims.t_in);
  bc.out_frames = static_cast<int>(m.dims.t_out);
  return bc;
}

training::ProgressFn epoch_printer(const std::string& stage) {
  return [stage](const training::EpochLog& e) {
    std::ostringstream msg;
    msg << stage << " epoch " << e.epoch << " loss " << e.train_loss;
    if (e.val.csi) msg << " val_csi " << *e.val.csi;
    info(msg.str());
  };
}

std::vector<RegionKey> dataset_keys(const datagen::Manifest& m) {
  std::vector<RegionKey> keys;
  for (int r = 0; r < m.num_regions; ++r) {
    for (int y : m.years) keys.push_back({r, y});
  }
  return keys;
}

}  // namespace

void PipelineConfig::propagate() {
  train.seed = seed;
  train.srip.seed = seed;
  train.deterministic = deterministic;
}

void apply_config_json(PipelineConfig& cfg, const json& j) {
  if (!j.is_object()) throw std::invalid_argument("config file must hold a JSON object");
  std::string path;
  if (j.contains("data")) {
    read_key(j, "data", path);
    cfg.data_dir = path;
  }
  if (j.contains("out")) {
    read_key(j, "out", path);
    cfg.out_dir = path;
  }
  read_key(j, "seed", cfg.seed);
  read_key(j, "deterministic", cfg.deterministic);
  if (j.contains("datagen")) {
    const auto& d = j.at("datagen");
    read_key(d, "regions", cfg.regions);
    read_key(d, "years", cfg.years);
    read_key(d, "events", cfg.events);
    read_key(d, "height", cfg.dims.height);
    read_key(d, "width", cfg.dims.width);
    read_key(d, "t_in", cfg.dims.t_in);
    read_key(d, "t_out", cfg.dims.t_out);
    read_key(d, "channels", cfg.dims.channels);
    read_key(d, "val_fraction", cfg.val_fraction);
    read_key(d, "rain_threshold", cfg.rain_threshold);
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    read_key(m, "levels", cfg.backbone.levels);
    read_key(m, "base_channels", cfg.backbone.base_channels);
    read_key(m, "dropout_rate", cfg.backbone.dropout_rate);
    read_key(m, "rcn_hidden_per_region", cfg.backbone.rcn_hidden_per_region);
  }
  if (j.contains("train")) {
    try {
      cfg.train = training::train_config_from_json(j.at("train"), cfg.train);
    } catch (const json::exception& e) {
      throw std::invalid_argument(std::string("bad train config: ") + e.what());
    }
  }
  if (j.contains("predict")) read_key(j.at("predict"), "split", cfg.predict_split);
}

PipelineConfig load_config_file(const fs::path& path) {
  PipelineConfig cfg;
  json j;
  try {
    j = json::parse(io::read_file(path));
  } catch (const json::exception& e) {
    throw FormatError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  apply_config_json(cfg, j);
  return cfg;
}

std::size_t cmd_datagen(const PipelineConfig& cfg) {
  if (cfg.events < 1) throw std::invalid_argument("--events must be >= 1");
  datagen::DatagenOptions opts;
  opts.profiles = datagen::default_profiles(cfg.regions);
  opts.years = cfg.years;
  opts.events_per_key = cfg.events;
  opts.dims = cfg.dims;
  opts.seed = cfg.seed;
  opts.val_fraction = cfg.val_fraction;
  opts.rain_threshold = cfg.rain_threshold;
  const auto ds = datagen::generate_dataset(opts);
  datagen::write_dataset(ds, cfg.data_dir);
  info("wrote " + std::to_string(ds.samples.size()) + " samples to " + cfg.data_dir.string());
  return ds.samples.size();
}

void cmd_train(const PipelineConfig& cfg) {
  const auto ds = load_dataset(cfg);
  const auto train = training::labeled_set(ds, "train");
  const auto val = training::labeled_set(ds, "val");
  auto outcome = training::train_backbone(backbone_for(cfg, ds.manifest), ds.manifest.num_regions,
                                          cfg.train, train, val, epoch_printer("train"));
  fs::create_directories(cfg.out_dir);
  save_checkpoint(cfg.out_dir / kBackboneCheckpoint, outcome.checkpoint);
  io::write_file_atomic(cfg.out_dir / "train_log.csv", training::log_csv(outcome.log));
}

void cmd_distill(const PipelineConfig& cfg) {
  const auto teacher = require_checkpoint(cfg, kBackboneCheckpoint, "train");
  const auto ds = load_dataset(cfg);
  auto outcome = training::self_distill(teacher, cfg.train, training::unlabeled_set(ds, "train"),
                                        epoch_printer("distill"));
  save_checkpoint(cfg.out_dir / kDistilledCheckpoint, outcome.checkpoint);
  io::write_file_atomic(cfg.out_dir / "distill_log.csv", training::log_csv(outcome.log));
}

std::size_t cmd_finetune(const PipelineConfig& cfg) {
  const auto base = require_checkpoint(cfg, kDistilledCheckpoint, "distill");
  const auto ds = load_dataset(cfg);
  auto result = copy_checkpoint(base);
  result.stage = "finetuned";
  result.train_config = training::to_json(cfg.train);

  std::ostringstream log;
  log << "region,year,epoch,train_loss,val_CSI,val_F1,val_IoU,srip_term\n";
  for (const auto& key : dataset_keys(ds.manifest)) {
    const auto train = training::labeled_set(ds, "train", key.region, key.year);
    if (train.empty()) {
      warn("no training samples for " + to_string(key) + "; keeping identity adapters");
      result.adapters[key] = result.backbone->identity_adapters(key);
      continue;
    }
    const auto val = training::labeled_set(ds, "val", key.region, key.year);
    auto outcome = training::film_finetune(base, key, train, cfg.train, val.empty() ? nullptr : &val);
    std::istringstream rows(training::log_csv(outcome.log));
    std::string line;
    std::getline(rows, line);  // header
    while (std::getline(rows, line)) log << key.region << ',' << key.year << ',' << line << '\n';
    result.adapters[key] = std::move(outcome.adapters);
    info("finetuned adapters for " + to_string(key));
  }
  save_checkpoint(cfg.out_dir / kFinetunedCheckpoint, result);
  io::write_file_atomic(cfg.out_dir / "finetune_log.csv", log.str());
  return result.adapters.size();
}

void cmd_sweep(const PipelineConfig& cfg) {
  const auto ckpt = require_checkpoint(cfg, kFinetunedCheckpoint, "finetune");
  const auto ds = load_dataset(cfg);
  std::vector<eval::SweepInput> inputs;
  for (const auto& key : dataset_keys(ds.manifest)) {
    if (!ckpt.adapters.contains(key)) {
      warn("no adapters for " + to_string(key) + "; using identity adapters");
    }
    eval::SweepInput in;
    in.key = key;
    std::vector<torch::Tensor> xs;
    std::vector<RegionKey> keys;
    for (const auto* s : ds.select("val", key.region, key.year)) {
      xs.push_back(s->x);
      keys.push_back(key);
      in.truths.push_back(ds.mask(*s).unsqueeze(0));
    }
    if (!xs.empty()) {
      const auto prob = training::predict(ckpt.backbone, xs, keys, &ckpt.adapters);
      for (std::int64_t i = 0; i < prob.size(0); ++i) in.probs.push_back(prob[i]);
    }
    inputs.push_back(std::move(in));
  }
  const auto result = eval::threshold_sweep(inputs);
  for (const auto& w : result.warnings) warn(w);
  io::write_file_atomic(cfg.out_dir / "sweep.csv", eval::sweep_csv(result));
  io::write_file_atomic(cfg.out_dir / kSweepJson, eval::sweep_json(result));
}

std::size_t cmd_predict(const PipelineConfig& cfg) {
  const auto ckpt = require_checkpoint(cfg, kFinetunedCheckpoint, "finetune");
  const auto sweep_path = cfg.out_dir / kSweepJson;
  if (!fs::exists(sweep_path)) {
    throw DependencyError("missing " + sweep_path.string() + "; run the `sweep` stage first");
  }
  const auto sweep = eval::sweep_from_json(io::read_file(sweep_path));
  const auto ds = load_dataset(cfg);
  const auto dir = cfg.out_dir / "predictions";
  fs::create_directories(dir);
  std::size_t written = 0;
  for (const auto* s : ds.select(cfg.predict_split)) {
    const RegionKey key{s->key.region, s->key.year};
    double p = 0.5;
    if (const auto* g = sweep.find(key); g != nullptr && g->best_threshold) {
      p = *g->best_threshold;
    } else {
      warn("no swept threshold for " + to_string(key) + "; using 0.5");
    }
    if (!ckpt.adapters.contains(key)) {
      warn("no adapters for " + to_string(key) + "; using identity adapters");
    }
    const auto prob = training::predict(ckpt.backbone, {s->x}, {key}, &ckpt.adapters);
    const auto mask = eval::predict_with_threshold(prob[0][0], p);
    io::write_array(dir / (datagen::sample_stem(s->key) + ".mask"), mask);
    ++written;
  }
  info("wrote " + std::to_string(written) + " masks to " + dir.string());
  return written;
}

double cmd_report(const PipelineConfig& cfg) {
  const auto sweep_path = cfg.out_dir / kSweepJson;
  if (!fs::exists(sweep_path)) {
    throw DependencyError("missing " + sweep_path.string() + "; run the `sweep` stage first");
  }
  const auto sweep = eval::sweep_from_json(io::read_file(sweep_path));
  std::ostringstream csv;
  csv << "region,year,best_threshold,csi,f1,iou,accuracy,precision,recall\n";
  double sum = 0.0;
  int count = 0;
  for (const auto& g : sweep.groups) {
    eval::MetricsReport r;
    if (g.best_threshold) {
      for (const auto& pt : g.points) {
        if (pt.threshold == *g.best_threshold) r = pt.report;
      }
    }
    csv << g.key.region << ',' << g.key.year << ','
        << (g.best_threshold ? eval::format_score(*g.best_threshold) : "") << ','
        << eval::format_score(r.csi) << ',' << eval::format_score(r.f1) << ','
        << eval::format_score(r.iou) << ',' << eval::format_score(r.accuracy) << ','
        << eval::format_score(r.precision) << ',' << eval::format_score(r.recall) << '\n';
    if (r.csi) {
      sum += *r.csi;
      ++count;
    }
  }
  const double overall = count > 0 ? sum / count : 0.0;
  csv << "overall,," << ',' << eval::format_score(count > 0 ? eval::Score(overall) : std::nullopt)
      << ",,,,,\n";
  io::write_file_atomic(cfg.out_dir / "report.csv", csv.str());
  std::cout << csv.str();
  return overall;
}

}  // namespace nowcast::pipeline
