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

// Command-line driver for the region-conditioned nowcasting pipeline.
//
//   nowcast datagen  --regions 7 --years 2019,2020 --events 50 --seed 7 --data data/
//   nowcast train    --data data/ --out run/ --deterministic
//   nowcast distill  --data data/ --out run/
//   nowcast finetune --data data/ --out run/
//   nowcast sweep    --data data/ --out run/
//   nowcast predict  --data data/ --out run/
//   nowcast report   --out run/
//
// Exit codes: 0 success, 1 usage, 2 data/format, 3 numerical failure.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>

#include "nowcast/errors.hpp"
#include "nowcast/pipeline.hpp"

namespace {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

struct Overrides {
  std::optional<std::string> data, out;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;

  std::optional<int> regions, events, size, t_out;
  std::optional<std::vector<int>> years;
  std::optional<double> val_fraction;

  std::optional<int> levels, base_channels;
  std::optional<double> dropout;

  std::optional<int> epochs, patience, batch_size, distill_epochs, finetune_epochs;
  std::optional<double> lr, finetune_lr, srip_lambda;
  std::optional<int> srip_iters;
  bool no_mixup = false;

  std::optional<std::string> split;
};

void apply(const Overrides& o, nowcast::pipeline::PipelineConfig& cfg) {
  if (o.data) cfg.data_dir = *o.data;
  if (o.out) cfg.out_dir = *o.out;
  if (o.seed) cfg.seed = *o.seed;
  if (o.deterministic) cfg.deterministic = true;
  if (o.regions) cfg.regions = *o.regions;
  if (o.years) cfg.years = *o.years;
  if (o.events) cfg.events = *o.events;
  if (o.size) cfg.dims.height = cfg.dims.width = *o.size;
  if (o.t_out) cfg.dims.t_out = *o.t_out;
  if (o.val_fraction) cfg.val_fraction = *o.val_fraction;
  if (o.levels) cfg.backbone.levels = *o.levels;
  if (o.base_channels) cfg.backbone.base_channels = *o.base_channels;
  if (o.dropout) cfg.backbone.dropout_rate = *o.dropout;
  if (o.epochs) cfg.train.max_epochs = *o.epochs;
  if (o.patience) cfg.train.patience = *o.patience;
  if (o.batch_size) cfg.train.batch_size = *o.batch_size;
  if (o.distill_epochs) cfg.train.distill_epochs = *o.distill_epochs;
  if (o.finetune_epochs) cfg.train.finetune_epochs = *o.finetune_epochs;
  if (o.lr) cfg.train.learning_rate = *o.lr;
  if (o.finetune_lr) cfg.train.finetune_learning_rate = *o.finetune_lr;
  if (o.srip_lambda) cfg.train.srip.lambda = *o.srip_lambda;
  if (o.srip_iters) cfg.train.srip.iters = *o.srip_iters;
  if (o.no_mixup) cfg.train.mixup = false;
  if (o.split) cfg.predict_split = *o.split;
  if (cfg.train.patience > cfg.train.max_epochs) cfg.train.patience = cfg.train.max_epochs;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Region-conditioned orthogonal residual U-Net nowcasting pipeline"};
  app.require_subcommand(1, 1);
  app.fallthrough();

  Overrides o;
  std::string config_path;
  app.add_option("--config", config_path, "JSON config file (flags override its keys)")
      ->check(CLI::ExistingFile);
  app.add_option("--seed", o.seed, "Global seed, propagated to every stage");
  app.add_flag("--deterministic", o.deterministic, "Single-threaded, bit-reproducible mode");
  app.add_option("--out", o.out, "Run directory for checkpoints and reports");
  app.add_option("--data", o.data, "Dataset directory");

  auto* datagen = app.add_subcommand("datagen", "Generate a synthetic storm dataset");
  datagen->add_option("--regions", o.regions, "Number of regions")->check(CLI::PositiveNumber);
  datagen->add_option("--years", o.years, "Comma-separated years")->delimiter(',');
  datagen->add_option("--events", o.events, "Events per (region, year)")->check(CLI::PositiveNumber);
  datagen->add_option("--size", o.size, "Grid height and width in pixels")->check(CLI::PositiveNumber);
  datagen->add_option("--t-out", o.t_out, "Output lead-time frames")->check(CLI::PositiveNumber);
  datagen->add_option("--val-fraction", o.val_fraction, "Fraction of events held out")
      ->check(CLI::Range(0.0, 0.99));

  auto add_model_flags = [&o](CLI::App* cmd) {
    cmd->add_option("--levels", o.levels)->check(CLI::PositiveNumber);
    cmd->add_option("--base-channels", o.base_channels)->check(CLI::PositiveNumber);
    cmd->add_option("--dropout", o.dropout)->check(CLI::Range(0.0, 0.99));
  };
  auto add_train_flags = [&o](CLI::App* cmd) {
    cmd->add_option("--epochs", o.epochs)->check(CLI::NonNegativeNumber);
    cmd->add_option("--patience", o.patience)->check(CLI::NonNegativeNumber);
    cmd->add_option("--batch-size", o.batch_size)->check(CLI::PositiveNumber);
    cmd->add_option("--lr", o.lr)->check(CLI::PositiveNumber);
    cmd->add_option("--srip-lambda", o.srip_lambda)->check(CLI::NonNegativeNumber);
    cmd->add_option("--srip-iters", o.srip_iters)->check(CLI::PositiveNumber);
    cmd->add_flag("--no-mixup", o.no_mixup);
  };

  auto* train = app.add_subcommand("train", "Train the backbone (DiceBCE + SRIP+ + mixup)");
  add_model_flags(train);
  add_train_flags(train);
  auto* distill = app.add_subcommand("distill", "Self-distil the trained backbone");
  add_train_flags(distill);
  distill->add_option("--distill-epochs", o.distill_epochs)->check(CLI::NonNegativeNumber);
  auto* finetune = app.add_subcommand("finetune", "Fit FiLM adapters per (region, year)");
  finetune->add_option("--finetune-epochs", o.finetune_epochs)->check(CLI::NonNegativeNumber);
  finetune->add_option("--finetune-lr", o.finetune_lr)->check(CLI::PositiveNumber);
  finetune->add_option("--batch-size", o.batch_size)->check(CLI::PositiveNumber);
  auto* sweep = app.add_subcommand("sweep", "Sweep decision thresholds 0.1..0.9 per (region, year)");
  auto* predict = app.add_subcommand("predict", "Write rain masks using the swept thresholds");
  predict->add_option("--split", o.split, "Dataset split to predict")
      ->check(CLI::IsMember({"train", "val"}));
  auto* report = app.add_subcommand("report", "Summarise per-region CSI and the overall mean");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kUsage;
  }

  namespace pl = nowcast::pipeline;
  try {
    auto cfg = config_path.empty() ? pl::PipelineConfig{} : pl::load_config_file(config_path);
    apply(o, cfg);
    cfg.propagate();
    cfg.train.validate();
    cfg.backbone.validate();

    if (datagen->parsed()) {
      pl::cmd_datagen(cfg);
    } else if (train->parsed()) {
      pl::cmd_train(cfg);
    } else if (distill->parsed()) {
      pl::cmd_distill(cfg);
    } else if (finetune->parsed()) {
      pl::cmd_finetune(cfg);
    } else if (sweep->parsed()) {
      pl::cmd_sweep(cfg);
    } else if (predict->parsed()) {
      pl::cmd_predict(cfg);
    } else if (report->parsed()) {
      pl::cmd_report(cfg);
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const nowcast::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const nowcast::DependencyError& e) {
    std::cerr << "dependency error: " << e.what() << '\n';
    return kData;
  } catch (const nowcast::FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  }
  return kOk;
}
