// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration: JSON schema, strict validation with key paths,
// defaulting, and a canonical echo whose hash identifies the computation.
#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "diversenet/data.hpp"
#include "diversenet/errors.hpp"
#include "diversenet/rng.hpp"
#include "diversenet/segmodel.hpp"
#include "diversenet/trainers.hpp"

namespace diversenet {

enum class Method { kDiverseHeadDf, kDiverseHeadDt, kDiverseModel, kBase, kShs, kInputPerturb };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::kDiverseHeadDf: return "diversehead-df";
    case Method::kDiverseHeadDt: return "diversehead-dt";
    case Method::kDiverseModel: return "diversemodel";
    case Method::kBase: return "base";
    case Method::kShs: return "shs";
    case Method::kInputPerturb: return "input-perturb";
  }
  throw ArgError("unknown method");
}

inline Method method_from_string(const std::string& s) {
  if (s == "diversehead-df") return Method::kDiverseHeadDf;
  if (s == "diversehead-dt") return Method::kDiverseHeadDt;
  if (s == "diversemodel") return Method::kDiverseModel;
  if (s == "base") return Method::kBase;
  if (s == "shs") return Method::kShs;
  if (s == "input-perturb") return Method::kInputPerturb;
  throw ConfigError("config: unknown method '" + s + "'");
}

struct DataConfig {
  std::optional<std::string> manifest;  // exactly one of manifest / synth
  std::optional<SynthParams> synth;
  double labelled_fraction = 0.25;
  std::uint64_t split_seed = 0;
};

struct ExperimentConfig {
  Method method = Method::kBase;
  std::uint64_t seed = 0;
  std::string output_dir;
  ModelSpec model;                     // head-count methods
  std::string model_arch = "multihead";  // baselines may train a member arch
  std::vector<std::string> dm_models;  // diversemodel member architectures
  TrainSettings train;
  std::int64_t batch_size = 8;
  std::int64_t epochs = 10;
  std::int64_t warmup_epochs = 0;
  std::int64_t eval_every = 1;
  DataConfig data;

  nlohmann::json echo;  // validated config with every default materialized
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& obj, const std::set<std::string>& allowed,
                                const std::string& path) {
  for (const auto& [key, value] : obj.items())
    if (!allowed.count(key))
      throw ConfigError("config: unknown key '" + (path.empty() ? key : path + "." + key) + "'");
}

template <typename V>
V get_or(const nlohmann::json& obj, const std::string& key, const std::string& path, V fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config: bad value type at '" + (path.empty() ? key : path + "." + key) +
                      "'");
  }
}

}  // namespace detail

/// Parses, defaults, and validates a configuration object. Unknown keys are
/// rejected; every default lands in the echoed config.
inline ExperimentConfig parse_config(const nlohmann::json& j) {
  using detail::get_or;
  using detail::reject_unknown_keys;
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  reject_unknown_keys(j, {"method", "seed", "output_dir", "model", "dm_models", "loss",
                          "optimizer", "schedule", "data", "noise", "provenance"},
                      "");

  ExperimentConfig cfg;
  if (!j.contains("method")) throw ConfigError("config: missing required key 'method'");
  cfg.method = method_from_string(j.at("method").get<std::string>());
  const bool is_diversehead =
      cfg.method == Method::kDiverseHeadDf || cfg.method == Method::kDiverseHeadDt;
  const bool is_baseline = cfg.method == Method::kBase || cfg.method == Method::kShs ||
                           cfg.method == Method::kInputPerturb;

  cfg.seed = get_or<std::uint64_t>(j, "seed", "", 0);
  cfg.output_dir = get_or<std::string>(j, "output_dir", "", "runs/" + to_string(cfg.method));

  // --- data ---
  if (!j.contains("data")) throw ConfigError("config: missing required key 'data'");
  const auto& jd = j.at("data");
  reject_unknown_keys(jd, {"manifest", "synth", "labelled_fraction", "split_seed"}, "data");
  if (jd.contains("manifest") == jd.contains("synth"))
    throw ConfigError("config: data needs exactly one of 'manifest' or 'synth'");
  cfg.data.labelled_fraction = get_or<double>(jd, "labelled_fraction", "data", 0.25);
  if (!(cfg.data.labelled_fraction > 0.0 && cfg.data.labelled_fraction <= 1.0))
    throw ConfigError("config: data.labelled_fraction must lie in (0, 1]");
  cfg.data.split_seed = get_or<std::uint64_t>(jd, "split_seed", "data", 0);
  std::int64_t data_classes = 0;
  std::int64_t data_bands = 0;
  if (jd.contains("manifest")) {
    cfg.data.manifest = jd.at("manifest").get<std::string>();
  } else {
    const auto& js = jd.at("synth");
    reject_unknown_keys(js,
                        {"train_count", "val_count", "test_count", "size", "classes", "bands",
                         "noise", "seed", "min_class_fraction"},
                        "data.synth");
    SynthParams sp;
    sp.train_count = get_or<std::int64_t>(js, "train_count", "data.synth", sp.train_count);
    sp.val_count = get_or<std::int64_t>(js, "val_count", "data.synth", sp.val_count);
    sp.test_count = get_or<std::int64_t>(js, "test_count", "data.synth", sp.test_count);
    sp.size = get_or<std::int64_t>(js, "size", "data.synth", sp.size);
    sp.classes = get_or<std::int64_t>(js, "classes", "data.synth", sp.classes);
    sp.bands = get_or<std::int64_t>(js, "bands", "data.synth", sp.bands);
    sp.noise = get_or<double>(js, "noise", "data.synth", sp.noise);
    sp.seed = get_or<std::uint64_t>(js, "seed", "data.synth", sp.seed);
    sp.min_class_fraction =
        get_or<double>(js, "min_class_fraction", "data.synth", sp.min_class_fraction);
    validate(sp);
    cfg.data.synth = sp;
    data_classes = sp.classes;
    data_bands = sp.bands;
  }

  // --- model ---
  const auto jm = j.contains("model") ? j.at("model") : nlohmann::json::object();
  reject_unknown_keys(jm, {"heads", "classes", "bands", "trunk", "dropout_rate", "arch"},
                      "model");
  cfg.model_arch = get_or<std::string>(jm, "arch", "model", "multihead");
  if (cfg.model_arch != "multihead") {
    if (!is_baseline)
      throw ConfigError("config: model.arch other than 'multihead' is baseline-only");
    if (cfg.model_arch != "pyramid" && cfg.model_arch != "unet" && cfg.model_arch != "segnet")
      throw ConfigError("config: unknown model.arch '" + cfg.model_arch + "'");
  }
  cfg.model.head_count =
      get_or<std::int64_t>(jm, "heads", "model", is_diversehead ? 10 : 1);
  // 0 = resolve from the dataset once it is loaded (manifest-backed runs)
  cfg.model.class_count = get_or<std::int64_t>(jm, "classes", "model", data_classes);
  cfg.model.input_bands = get_or<std::int64_t>(jm, "bands", "model", data_bands);
  cfg.model.trunk = get_or<std::string>(jm, "trunk", "model", "desk");
  trunk_layout(cfg.model.trunk);
  cfg.model.dropout_rate = get_or<double>(
      jm, "dropout_rate", "model", cfg.method == Method::kDiverseHeadDt ? 0.5 : 0.0);
  if (cfg.model.class_count != 0 && cfg.model.class_count < 2)
    throw ConfigError("config: model.classes must be >= 2");
  if (cfg.model.input_bands != 0 && cfg.model.input_bands < 1)
    throw ConfigError("config: model.bands must be >= 1");
  if (data_classes && cfg.model.class_count != data_classes)
    throw ConfigError("config: model.classes disagrees with data.synth.classes");
  if (!(cfg.model.dropout_rate >= 0.0 && cfg.model.dropout_rate < 1.0))
    throw ConfigError("config: model.dropout_rate must lie in [0, 1)");
  if (cfg.method == Method::kDiverseHeadDf && cfg.model.dropout_rate != 0.0)
    throw ConfigError("config: diversehead-df forbids dropout (model.dropout_rate must be 0)");
  if (cfg.method == Method::kDiverseHeadDt && !(cfg.model.dropout_rate > 0.0))
    throw ConfigError("config: diversehead-dt requires a positive model.dropout_rate");
  if (is_diversehead && cfg.model.head_count < 2)
    throw ConfigError("config: diversehead methods require model.heads >= 2");
  if (is_baseline && cfg.model.head_count != 1)
    throw ConfigError("config: baseline methods require model.heads == 1");

  // --- diversemodel members ---
  if (j.contains("dm_models")) {
    if (cfg.method != Method::kDiverseModel)
      throw ConfigError("config: dm_models is only valid for method diversemodel");
    cfg.dm_models = j.at("dm_models").get<std::vector<std::string>>();
  } else if (cfg.method == Method::kDiverseModel) {
    cfg.dm_models = {"pyramid", "unet", "segnet"};
  }
  if (cfg.method == Method::kDiverseModel && cfg.dm_models.size() != 3)
    throw ConfigError("config: diversemodel requires exactly 3 dm_models entries");

  // --- loss ---
  const auto jl = j.contains("loss") ? j.at("loss") : nlohmann::json::object();
  reject_unknown_keys(jl, {"lambda", "phi", "phi_mode"}, "loss");
  cfg.train.loss.lambda = get_or<double>(jl, "lambda", "loss", 1.0);
  if (!(cfg.train.loss.lambda >= 0.0)) throw ConfigError("config: loss.lambda must be >= 0");
  cfg.train.vote.phi = get_or<double>(jl, "phi", "loss", 1.0);
  if (!(cfg.train.vote.phi >= 0.0)) throw ConfigError("config: loss.phi must be >= 0");
  const std::string phi_mode = get_or<std::string>(jl, "phi_mode", "loss", "fixed");
  if (phi_mode == "fixed") {
    cfg.train.vote.mode = VoteWeight::Mode::kFixed;
  } else if (phi_mode == "learnable-surrogate") {
    cfg.train.vote.mode = VoteWeight::Mode::kLearnableSurrogate;
  } else {
    throw ConfigError("config: loss.phi_mode must be 'fixed' or 'learnable-surrogate'");
  }

  // --- optimizer ---
  const auto jo = j.contains("optimizer") ? j.at("optimizer") : nlohmann::json::object();
  reject_unknown_keys(jo, {"base_lr", "power", "momentum", "weight_decay", "batch_size"},
                      "optimizer");
  cfg.train.base_lr = get_or<double>(jo, "base_lr", "optimizer", 0.01);
  cfg.train.power = get_or<double>(jo, "power", "optimizer", 0.9);
  cfg.train.momentum = get_or<double>(jo, "momentum", "optimizer", 0.9);
  cfg.train.weight_decay = get_or<double>(jo, "weight_decay", "optimizer", 1e-4);
  cfg.batch_size = get_or<std::int64_t>(jo, "batch_size", "optimizer", 8);
  if (cfg.batch_size < 1) throw ConfigError("config: optimizer.batch_size must be >= 1");
  if (!(cfg.train.base_lr > 0.0)) throw ConfigError("config: optimizer.base_lr must be > 0");
  if (!(cfg.train.power >= 0.0)) throw ConfigError("config: optimizer.power must be >= 0");

  // --- schedule ---
  const auto jsch = j.contains("schedule") ? j.at("schedule") : nlohmann::json::object();
  reject_unknown_keys(jsch, {"epochs", "warmup_epochs", "eval_every"}, "schedule");
  cfg.epochs = get_or<std::int64_t>(jsch, "epochs", "schedule", 10);
  cfg.warmup_epochs = get_or<std::int64_t>(jsch, "warmup_epochs", "schedule", 0);
  cfg.eval_every = get_or<std::int64_t>(jsch, "eval_every", "schedule", 1);
  if (cfg.epochs < 0) throw ConfigError("config: schedule.epochs must be >= 0");
  if (cfg.warmup_epochs < 0 || cfg.warmup_epochs > cfg.epochs)
    throw ConfigError("config: schedule.warmup_epochs must lie in [0, epochs]");
  if (cfg.eval_every < 1) throw ConfigError("config: schedule.eval_every must be >= 1");

  // --- input-perturbation noise ---
  const auto jn = j.contains("noise") ? j.at("noise") : nlohmann::json::object();
  reject_unknown_keys(jn, {"sd"}, "noise");
  cfg.train.noise.sd = get_or<double>(jn, "sd", "noise", 0.01);
  if (j.contains("noise") && cfg.method != Method::kInputPerturb)
    throw ConfigError("config: noise block is only valid for method input-perturb");
  if (cfg.method == Method::kInputPerturb && !(cfg.train.noise.sd > 0.0))
    throw ConfigError("config: input-perturb requires noise.sd > 0");

  // --- echo with defaults materialized ---
  nlohmann::json echo;
  echo["method"] = to_string(cfg.method);
  echo["seed"] = cfg.seed;
  echo["output_dir"] = cfg.output_dir;
  echo["model"] = {{"heads", cfg.model.head_count},
                   {"classes", cfg.model.class_count},
                   {"bands", cfg.model.input_bands},
                   {"trunk", cfg.model.trunk},
                   {"dropout_rate", cfg.model.dropout_rate},
                   {"arch", cfg.model_arch}};
  if (cfg.method == Method::kDiverseModel) echo["dm_models"] = cfg.dm_models;
  echo["loss"] = {{"lambda", cfg.train.loss.lambda},
                  {"phi", cfg.train.vote.phi},
                  {"phi_mode", phi_mode}};
  echo["optimizer"] = {{"base_lr", cfg.train.base_lr},
                       {"power", cfg.train.power},
                       {"momentum", cfg.train.momentum},
                       {"weight_decay", cfg.train.weight_decay},
                       {"batch_size", cfg.batch_size}};
  echo["schedule"] = {{"epochs", cfg.epochs},
                      {"warmup_epochs", cfg.warmup_epochs},
                      {"eval_every", cfg.eval_every}};
  nlohmann::json jdata;
  jdata["labelled_fraction"] = cfg.data.labelled_fraction;
  jdata["split_seed"] = cfg.data.split_seed;
  if (cfg.data.manifest) {
    jdata["manifest"] = *cfg.data.manifest;
  } else {
    const auto& sp = *cfg.data.synth;
    jdata["synth"] = {{"train_count", sp.train_count},
                      {"val_count", sp.val_count},
                      {"test_count", sp.test_count},
                      {"size", sp.size},
                      {"classes", sp.classes},
                      {"bands", sp.bands},
                      {"noise", sp.noise},
                      {"seed", sp.seed},
                      {"min_class_fraction", sp.min_class_fraction}};
  }
  echo["data"] = jdata;
  if (cfg.method == Method::kInputPerturb) echo["noise"] = {{"sd", cfg.train.noise.sd}};
  if (j.contains("provenance")) echo["provenance"] = j.at("provenance");
  cfg.echo = std::move(echo);
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read config file: " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
  return parse_config(j);
}

/// Hash of the computational identity: the echoed config minus output
/// location and free-form provenance. Two configs with equal hashes produce
/// bit-identical runs.
inline std::uint64_t config_hash(const ExperimentConfig& cfg) {
  nlohmann::json j = cfg.echo;
  j.erase("output_dir");
  j.erase("provenance");
  return hash_name(j.dump());
}

}  // namespace diversenet
