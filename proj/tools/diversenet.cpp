// SPDX-License-Identifier: Apache-2.0
//
// Command-line launcher: generate-data, tile, train, evaluate, report.
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "diversenet/config.hpp"
#include "diversenet/data.hpp"
#include "diversenet/experiment.hpp"
#include "diversenet/report.hpp"

namespace {

using nlohmann::json;

/// Applies "--set path.to.key=value" onto the raw config JSON. Values parse
/// as JSON when possible, otherwise as strings.
void apply_override(json& cfg, const std::string& assignment, std::vector<std::string>& applied) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos)
    throw diversenet::ConfigError("--set expects key.path=value, got '" + assignment + "'");
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  json* node = &cfg;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot - start);
    if (key.empty()) throw diversenet::ConfigError("--set: empty key segment in '" + path + "'");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      break;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
  applied.push_back(assignment);
}

int cmd_generate_data(const diversenet::SynthParams& params, double labelled_fraction,
                      std::uint64_t split_seed, const std::string& out_dir) {
  auto manifest =
      diversenet::synth_segmentation_set(params, labelled_fraction, split_seed, out_dir);
  std::printf("wrote %zu patches to %s (classes=%lld bands=%lld)\n", manifest.patches.size(),
              out_dir.c_str(), static_cast<long long>(manifest.class_count),
              static_cast<long long>(manifest.band_count));
  std::printf("manifest: %s\n", (std::filesystem::path(out_dir) / "manifest.json").c_str());
  return 0;
}

int cmd_tile(const std::string& image_path, const std::string& label_path, std::int64_t classes,
             std::int64_t tile, std::int64_t stride, const std::string& split,
             double labelled_fraction, std::uint64_t split_seed, const std::string& out_dir) {
  diversenet::RasterPair raster;
  raster.image = diversenet::read_patch_file<float>(image_path);
  raster.label = diversenet::read_patch_file<std::int32_t>(label_path);
  auto patches = diversenet::tile_raster(raster, tile, stride);

  diversenet::SplitDataset ds;
  ds.class_count = classes;
  ds.band_count = raster.image.dim(2);
  const auto tag = diversenet::split_tag_from_string(split);
  std::vector<diversenet::Sample> samples;
  samples.reserve(patches.size());
  for (auto& p : patches) samples.push_back({std::move(p.image), std::move(p.label)});
  if (tag == diversenet::SplitTag::kTrainLabelled && labelled_fraction < 1.0) {
    auto [labelled, unlabelled] =
        diversenet::split_dataset(samples, labelled_fraction, split_seed);
    ds.train_labelled = std::move(labelled);
    ds.train_unlabelled = std::move(unlabelled);
  } else if (tag == diversenet::SplitTag::kTrainLabelled) {
    ds.train_labelled = std::move(samples);
  } else if (tag == diversenet::SplitTag::kTrainUnlabelled) {
    ds.train_unlabelled = std::move(samples);
  } else if (tag == diversenet::SplitTag::kVal) {
    ds.val = std::move(samples);
  } else {
    ds.test = std::move(samples);
  }

  json prov;
  prov["generator"] = "tile";
  prov["tile"] = tile;
  prov["stride"] = stride;
  prov["labelled_fraction"] = labelled_fraction;
  prov["split_seed"] = split_seed;
  prov["source_image"] = image_path;
  prov["source_label"] = label_path;
  auto manifest = diversenet::write_dataset(ds, out_dir, prov);
  std::printf("tiled %zu patches into %s\n", manifest.patches.size(), out_dir.c_str());
  return 0;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& sets,
              std::optional<std::string> out_dir, std::optional<std::string> resume,
              std::optional<std::int64_t> stop_after_epoch, bool verbose) {
  std::ifstream is(config_path);
  if (!is) throw diversenet::IoError("cannot read config file: " + config_path);
  json raw;
  try {
    is >> raw;
  } catch (const json::exception& e) {
    throw diversenet::ConfigError("config parse error in " + config_path + ": " + e.what());
  }
  std::vector<std::string> applied;
  for (const auto& s : sets) apply_override(raw, s, applied);
  if (out_dir) {
    raw["output_dir"] = *out_dir;
    applied.push_back("output_dir=" + *out_dir);
  }
  if (!applied.empty()) raw["provenance"]["overrides"] = applied;

  diversenet::ExperimentConfig cfg = diversenet::parse_config(raw);
  diversenet::RunControl ctl;
  ctl.resume = resume;
  ctl.stop_after_epoch = stop_after_epoch;
  ctl.verbose = verbose;
  diversenet::RunReport report = diversenet::run_experiment<float>(cfg, ctl);

  std::printf("run %s: %lld iterations, %.2f s / 100 iterations\n", report.method.c_str(),
              static_cast<long long>(report.iterations), report.wall_seconds_per_100_iter);
  if (report.final_test) {
    std::printf("%s", diversenet::format_metric_table({diversenet::to_json(report)}).c_str());
  } else {
    std::printf("stopped after epoch %lld; resume from %s\n",
                static_cast<long long>(stop_after_epoch.value_or(0)),
                (std::filesystem::path(cfg.output_dir) / report.last_checkpoint).c_str());
  }
  std::printf("report: %s\n", (std::filesystem::path(cfg.output_dir) / "report.json").c_str());
  return 0;
}

int cmd_evaluate(const std::string& checkpoint, const std::string& manifest,
                 const std::string& split, std::optional<std::string> out_path) {
  auto payload = diversenet::detail::load_checkpoint<float>(checkpoint);
  json raw = json::parse(payload.meta.config_json);
  raw["data"] = {{"manifest", manifest}};
  raw.erase("output_dir");
  diversenet::ExperimentConfig cfg = diversenet::parse_config(raw);
  diversenet::ExperimentRunner<float> runner(cfg);
  runner.load(checkpoint, /*check_hash=*/false);
  diversenet::MetricReport metrics = runner.evaluate(split);

  json out;
  out["checkpoint"] = checkpoint;
  out["manifest"] = manifest;
  out["split"] = split;
  out["metrics"] = diversenet::to_json(metrics);
  if (out_path) {
    std::ofstream os(*out_path);
    if (!os) throw diversenet::IoError("cannot write metrics: " + *out_path);
    os << out.dump(2) << '\n';
  }
  json row;
  row["arm"] = payload.meta.method + " @ " + split;
  row["final_test"] = diversenet::to_json(metrics);
  std::printf("%s", diversenet::format_metric_table({row}).c_str());
  return 0;
}

int cmd_report(const std::vector<std::string>& files, std::optional<std::string> out_path) {
  std::vector<json> reports;
  for (const auto& f : files) {
    std::ifstream is(f);
    if (!is) throw diversenet::IoError("cannot read report: " + f);
    json j;
    is >> j;
    reports.push_back(std::move(j));
  }
  const std::string table = diversenet::format_metric_table(reports);
  if (out_path) {
    std::ofstream os(*out_path);
    if (!os) throw diversenet::IoError("cannot write table: " + *out_path);
    os << table;
  }
  std::printf("%s", table.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"diversenet: multi-head and multi-model semi-supervised segmentation"};
  app.require_subcommand(1);

  // generate-data
  auto* gen = app.add_subcommand("generate-data", "Generate a synthetic dataset with a manifest");
  diversenet::SynthParams sp;
  double gen_fraction = 0.25;
  std::uint64_t gen_split_seed = 0;
  std::string gen_out = "data/synth";
  gen->add_option("--train", sp.train_count, "training patch count (pre-split)");
  gen->add_option("--val", sp.val_count, "validation patch count");
  gen->add_option("--test", sp.test_count, "test patch count");
  gen->add_option("--size", sp.size, "patch side length");
  gen->add_option("--classes", sp.classes, "class count");
  gen->add_option("--bands", sp.bands, "band count");
  gen->add_option("--noise", sp.noise, "Gaussian noise sd");
  gen->add_option("--seed", sp.seed, "generator seed");
  gen->add_option("--min-class-fraction", sp.min_class_fraction, "per-image class floor");
  gen->add_option("--labelled-fraction", gen_fraction, "fraction of train kept labelled");
  gen->add_option("--split-seed", gen_split_seed, "labelled/unlabelled split seed");
  gen->add_option("--out", gen_out, "output directory")->required();

  // tile
  auto* tile = app.add_subcommand("tile", "Tile a raster pair into fixed-size patches");
  std::string tile_image, tile_label, tile_split = "train-labelled", tile_out;
  std::int64_t tile_classes = 2, tile_size = 512, tile_stride = 512;
  double tile_fraction = 1.0;
  std::uint64_t tile_split_seed = 0;
  tile->add_option("--image", tile_image, "raster image (patch binary, [H,W,bands])")->required();
  tile->add_option("--label", tile_label, "raster labels (patch binary, [H,W])")->required();
  tile->add_option("--classes", tile_classes, "class count")->required();
  tile->add_option("--tile", tile_size, "tile side length");
  tile->add_option("--stride", tile_stride, "tile stride");
  tile->add_option("--split", tile_split, "split tag for the patches");
  tile->add_option("--labelled-fraction", tile_fraction,
                   "when tiling training data, fraction kept labelled");
  tile->add_option("--split-seed", tile_split_seed, "labelled/unlabelled split seed");
  tile->add_option("--out", tile_out, "output directory")->required();

  // train
  auto* train = app.add_subcommand("train", "Run one experiment from a config file");
  std::string train_config;
  std::vector<std::string> train_sets;
  std::string train_out_str, train_resume_str;
  std::int64_t train_stop = -1;
  bool train_verbose = false;
  train->add_option("--config", train_config, "experiment config (JSON)")->required();
  train->add_option("--set", train_sets, "override a config key, e.g. --set schedule.epochs=5");
  train->add_option("--out", train_out_str, "override output_dir");
  train->add_option("--resume", train_resume_str, "resume from a checkpoint");
  train->add_option("--stop-after-epoch", train_stop, "checkpoint and stop after this epoch");
  train->add_flag("--verbose", train_verbose, "print per-epoch progress");

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "Score a checkpoint against a manifest");
  std::string eval_ckpt, eval_manifest, eval_split = "test", eval_out_str;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--manifest", eval_manifest, "dataset manifest")->required();
  eval->add_option("--split", eval_split, "split to score (val|test|train-labelled|train-unlabelled)");
  eval->add_option("--out", eval_out_str, "write metrics JSON here");

  // report
  auto* rep = app.add_subcommand("report", "Render machine reports as a metric table");
  std::vector<std::string> rep_files;
  std::string rep_out_str;
  rep->add_option("files", rep_files, "report.json files")->required();
  rep->add_option("--out", rep_out_str, "write the table here");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed())
      return cmd_generate_data(sp, gen_fraction, gen_split_seed, gen_out);
    if (tile->parsed())
      return cmd_tile(tile_image, tile_label, tile_classes, tile_size, tile_stride, tile_split,
                      tile_fraction, tile_split_seed, tile_out);
    if (train->parsed())
      return cmd_train(train_config, train_sets,
                       train_out_str.empty() ? std::nullopt : std::optional(train_out_str),
                       train_resume_str.empty() ? std::nullopt : std::optional(train_resume_str),
                       train_stop < 0 ? std::nullopt : std::optional(train_stop), train_verbose);
    if (eval->parsed())
      return cmd_evaluate(eval_ckpt, eval_manifest, eval_split,
                          eval_out_str.empty() ? std::nullopt : std::optional(eval_out_str));
    if (rep->parsed())
      return cmd_report(rep_files, rep_out_str.empty() ? std::nullopt : std::optional(rep_out_str));
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
