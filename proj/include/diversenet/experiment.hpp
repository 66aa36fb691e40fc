// SPDX-License-Identifier: Apache-2.0
//
// Experiment runner: builds data and trainer from a validated config, iterates
// epochs of cyclically paired batches, evaluates on a cadence, checkpoints
// best-by-mIoU and last, and emits the machine report plus a per-step loss
// log. Runs are resumable from the last checkpoint with exact continuation.
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "diversenet/config.hpp"
#include "diversenet/report.hpp"
#include "diversenet/serialize.hpp"
#include "diversenet/trainers.hpp"

namespace diversenet {

struct RunControl {
  std::optional<std::string> resume;             // checkpoint to continue from
  std::optional<std::int64_t> stop_after_epoch;  // checkpoint and exit early
  bool verbose = false;
};

struct EpochEval {
  std::int64_t epoch = 0;
  MetricReport val;
};

struct RunReport {
  nlohmann::json config_echo;
  std::uint64_t config_hash = 0;
  std::string method;
  std::vector<EpochEval> epoch_evals;
  std::optional<MetricReport> final_test;
  std::int64_t best_epoch = -1;
  double best_val_miou = std::numeric_limits<double>::quiet_NaN();
  std::string best_checkpoint;
  std::string last_checkpoint;
  std::string loss_log;
  std::int64_t iterations = 0;
  double wall_seconds_per_100_iter = 0.0;
  bool completed = false;
};

inline nlohmann::json to_json(const RunReport& r) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : r.epoch_evals)
    epochs.push_back({{"epoch", e.epoch}, {"val", to_json(e.val)}});
  nlohmann::json j;
  j["schema_version"] = 1;
  j["config"] = r.config_echo;
  j["config_hash"] = r.config_hash;
  j["method"] = r.method;
  j["arm"] = r.method;
  j["epochs"] = epochs;
  j["final_test"] = r.final_test ? to_json(*r.final_test) : nlohmann::json(nullptr);
  j["best"] = {{"epoch", r.best_epoch},
               {"val_miou", std::isnan(r.best_val_miou) ? nlohmann::json(nullptr)
                                                        : nlohmann::json(r.best_val_miou)},
               {"checkpoint", r.best_checkpoint}};
  j["last_checkpoint"] = r.last_checkpoint;
  j["loss_log"] = r.loss_log;
  j["iterations"] = r.iterations;
  j["wall_seconds_per_100_iter"] = r.wall_seconds_per_100_iter;
  j["completed"] = r.completed;
  return j;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace detail {

inline constexpr char kCkptMagic[8] = {'D', 'N', 'C', 'K', 'P', 'T', '0', '1'};
inline constexpr char kCkptFooter[8] = {'D', 'N', 'C', 'K', 'E', 'N', 'D', '1'};

struct CheckpointMeta {
  std::uint64_t config_hash = 0;
  std::string method;
  std::string config_json;  // echoed config, making the file self-describing
  std::int64_t iter = 0;
  std::int64_t epochs_completed = 0;
  std::int64_t best_epoch = -1;
  double best_val_miou = std::numeric_limits<double>::quiet_NaN();
  double phi = 1.0;
};

template <typename T>
struct CheckpointPayload {
  CheckpointMeta meta;
  std::vector<std::vector<Tensor<T>>> model_params;
  std::vector<std::vector<Tensor<T>>> velocities;
};

template <typename T>
void save_checkpoint(const std::string& path, const CheckpointMeta& meta,
                     const std::vector<std::vector<ParamRef<T>>>& model_params,
                     const std::vector<const std::vector<Tensor<T>>*>& velocities) {
  auto os = open_out(path);
  os.write(kCkptMagic, sizeof(kCkptMagic));
  write_pod<std::uint64_t>(os, meta.config_hash);
  write_string(os, meta.method);
  write_string(os, meta.config_json);
  write_pod<std::uint8_t>(os, DtypeCode<T>::value);
  write_pod<std::int64_t>(os, meta.iter);
  write_pod<std::int64_t>(os, meta.epochs_completed);
  write_pod<std::int64_t>(os, meta.best_epoch);
  write_pod<double>(os, meta.best_val_miou);
  write_pod<double>(os, meta.phi);
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(model_params.size()));
  for (const auto& group : model_params) {
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(group.size()));
    for (const auto& p : group) write_tensor(os, *p.value);
  }
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(velocities.size()));
  for (const auto* group : velocities) {
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(group->size()));
    for (const auto& t : *group) write_tensor(os, t);
  }
  os.write(kCkptFooter, sizeof(kCkptFooter));
  if (!os) throw CheckpointError("failed writing checkpoint: " + path);
}

/// Reads and fully validates a checkpoint before anything touches trainer
/// state, so a corrupt file surfaces an error with the state unchanged.
template <typename T>
CheckpointPayload<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint: " + path);
  try {
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || !std::equal(magic, magic + 8, kCkptMagic))
      throw CheckpointError("not a checkpoint file: " + path);
    CheckpointPayload<T> payload;
    payload.meta.config_hash = read_pod<std::uint64_t>(is);
    payload.meta.method = read_string(is);
    payload.meta.config_json = read_string(is);
    const auto dtype = read_pod<std::uint8_t>(is);
    if (dtype != DtypeCode<T>::value)
      throw CheckpointError("checkpoint scalar type mismatch in " + path);
    payload.meta.iter = read_pod<std::int64_t>(is);
    payload.meta.epochs_completed = read_pod<std::int64_t>(is);
    payload.meta.best_epoch = read_pod<std::int64_t>(is);
    payload.meta.best_val_miou = read_pod<double>(is);
    payload.meta.phi = read_pod<double>(is);
    const auto model_count = read_pod<std::uint32_t>(is);
    payload.model_params.resize(model_count);
    for (auto& group : payload.model_params) {
      const auto n = read_pod<std::uint32_t>(is);
      group.reserve(n);
      for (std::uint32_t i = 0; i < n; ++i) group.push_back(read_tensor<T>(is));
    }
    const auto opt_count = read_pod<std::uint32_t>(is);
    payload.velocities.resize(opt_count);
    for (auto& group : payload.velocities) {
      const auto n = read_pod<std::uint32_t>(is);
      group.reserve(n);
      for (std::uint32_t i = 0; i < n; ++i) group.push_back(read_tensor<T>(is));
    }
    char footer[8];
    is.read(footer, sizeof(footer));
    if (!is || !std::equal(footer, footer + 8, kCkptFooter))
      throw CheckpointError("truncated checkpoint: " + path);
    return payload;
  } catch (const IoError& e) {
    throw CheckpointError("corrupt checkpoint " + path + ": " + e.what());
  }
}

template <typename T>
void commit_group(const std::vector<Tensor<T>>& stored, std::vector<ParamRef<T>> params,
                  const std::string& what) {
  if (stored.size() != params.size())
    throw CheckpointError("checkpoint " + what + " count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!(stored[i].dims() == params[i].value->dims()))
      throw CheckpointError("checkpoint " + what + " shape mismatch at slot " +
                            std::to_string(i));
  }
  for (std::size_t i = 0; i < params.size(); ++i) *params[i].value = stored[i];
}

template <typename T>
void commit_velocity(const std::vector<Tensor<T>>& stored, std::vector<Tensor<T>>& velocity,
                     const std::string& what) {
  if (stored.size() != velocity.size())
    throw CheckpointError("checkpoint " + what + " count mismatch");
  for (std::size_t i = 0; i < velocity.size(); ++i) {
    if (!(stored[i].dims() == velocity[i].dims()))
      throw CheckpointError("checkpoint " + what + " shape mismatch at slot " +
                            std::to_string(i));
  }
  velocity = stored;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Runner

template <typename T = float>
class ExperimentRunner {
public:
  explicit ExperimentRunner(const ExperimentConfig& cfg) : cfg_(cfg) {
    build_dataset();
    build_trainer();
  }

  RunReport run(const RunControl& ctl = {}) {
    namespace fs = std::filesystem;
    fs::create_directories(cfg_.output_dir);
    RunReport report;
    report.config_echo = cfg_.echo;
    report.config_hash = config_hash(cfg_);
    report.method = to_string(cfg_.method);
    report.loss_log = "loss_log.jsonl";
    report.best_checkpoint = "best.ckpt";
    report.last_checkpoint = "last.ckpt";

    std::int64_t start_epoch = 1;
    if (ctl.resume) {
      auto payload = detail::load_checkpoint<T>(*ctl.resume);
      if (payload.meta.config_hash != report.config_hash)
        throw CheckpointError("checkpoint was produced by a different configuration");
      restore(payload);
      start_epoch = epochs_completed_ + 1;
      best_epoch_ = payload.meta.best_epoch;
      best_val_miou_ = payload.meta.best_val_miou;
    }

    const std::string log_path = join(cfg_.output_dir, report.loss_log);
    std::ofstream log(log_path, ctl.resume ? std::ios::app : std::ios::trunc);
    if (!log) throw IoError("cannot open loss log: " + log_path);

    if (cfg_.epochs == 0) {
      report.epoch_evals.push_back({0, evaluate_split(dataset_.val)});
      report.final_test = evaluate_split(dataset_.test);
      report.completed = true;
      write_report(report);
      return report;
    }

    std::int64_t ran_iters = 0;
    double train_seconds = 0.0;
    bool stopped_early = false;
    for (std::int64_t epoch = start_epoch; epoch <= cfg_.epochs; ++epoch) {
      const auto t0 = std::chrono::steady_clock::now();
      run_epoch(epoch, log, ran_iters);
      train_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      epochs_completed_ = epoch;

      if (epoch % cfg_.eval_every == 0 || epoch == cfg_.epochs) {
        MetricReport val = evaluate_split(dataset_.val);
        report.epoch_evals.push_back({epoch, val});
        const double miou = val.miou.value_or(0.0);
        if (std::isnan(best_val_miou_) || miou > best_val_miou_) {
          best_val_miou_ = miou;
          best_epoch_ = epoch;
          save(join(cfg_.output_dir, report.best_checkpoint));
        }
        if (ctl.verbose)
          std::fprintf(stderr, "[%s] epoch %lld val mIoU %.4f\n", report.method.c_str(),
                       static_cast<long long>(epoch), miou);
      }
      save(join(cfg_.output_dir, report.last_checkpoint));
      if (ctl.stop_after_epoch && epoch >= *ctl.stop_after_epoch && epoch < cfg_.epochs) {
        stopped_early = true;
        break;
      }
    }

    report.best_epoch = best_epoch_;
    report.best_val_miou = best_val_miou_;
    report.iterations = iter();
    report.wall_seconds_per_100_iter =
        ran_iters > 0 ? train_seconds / static_cast<double>(ran_iters) * 100.0 : 0.0;

    if (!stopped_early) {
      if (best_epoch_ >= 0) {
        auto payload =
            detail::load_checkpoint<T>(join(cfg_.output_dir, report.best_checkpoint));
        restore(payload);
      }
      report.final_test = evaluate_split(dataset_.test);
      report.completed = true;
    }
    write_report(report);
    return report;
  }

  const SplitDataset& dataset() const { return dataset_; }

  /// Loads a checkpoint into the trainer. `check_hash` is relaxed for
  /// standalone evaluation, where the data block may legitimately differ.
  void load(const std::string& ckpt_path, bool check_hash = true) {
    auto payload = detail::load_checkpoint<T>(ckpt_path);
    if (check_hash && payload.meta.config_hash != config_hash(cfg_))
      throw CheckpointError("checkpoint was produced by a different configuration");
    restore(payload);
  }

  MetricReport evaluate(const std::string& split_name) {
    if (split_name == "val") return evaluate_split(dataset_.val);
    if (split_name == "test") return evaluate_split(dataset_.test);
    if (split_name == "train-labelled") return evaluate_split(dataset_.train_labelled);
    if (split_name == "train-unlabelled") return evaluate_split(dataset_.train_unlabelled);
    throw ArgError("evaluate: unknown split '" + split_name + "'");
  }

private:
  static std::string join(const std::string& dir, const std::string& name) {
    return (std::filesystem::path(dir) / name).string();
  }

  void build_dataset() {
    if (cfg_.data.manifest) {
      DatasetManifest m = read_manifest(*cfg_.data.manifest);
      dataset_ = load_dataset(m);
    } else {
      dataset_ = synth_dataset(*cfg_.data.synth, cfg_.data.labelled_fraction,
                               cfg_.data.split_seed);
    }
    if (cfg_.model.class_count == 0) {
      cfg_.model.class_count = dataset_.class_count;
    } else if (dataset_.class_count != cfg_.model.class_count) {
      throw ConfigError("config: model.classes disagrees with the dataset");
    }
    if (cfg_.model.input_bands == 0) {
      cfg_.model.input_bands = dataset_.band_count;
    } else if (dataset_.band_count != cfg_.model.input_bands) {
      throw ConfigError("config: model.bands disagrees with the dataset");
    }
    if (dataset_.train_labelled.empty())
      throw ConfigError("dataset has no labelled training items");
    if (needs_unlabelled() && dataset_.train_unlabelled.empty())
      throw ConfigError("method " + to_string(cfg_.method) + " requires unlabelled data");
    if (dataset_.val.empty() || dataset_.test.empty())
      throw ConfigError("dataset needs non-empty val and test splits");
  }

  bool needs_unlabelled() const { return cfg_.method != Method::kBase; }

  void build_trainer() {
    switch (cfg_.method) {
      case Method::kDiverseHeadDf:
        dh_.emplace(cfg_.model, DiverseHeadMode::kDynamicFreeze, cfg_.train, cfg_.seed);
        break;
      case Method::kDiverseHeadDt:
        dh_.emplace(cfg_.model, DiverseHeadMode::kDropout, cfg_.train, cfg_.seed);
        break;
      case Method::kBase:
        bl_.emplace(cfg_.model, cfg_.model_arch, BaselineKind::kBase, cfg_.train, cfg_.seed);
        break;
      case Method::kShs:
        bl_.emplace(cfg_.model, cfg_.model_arch, BaselineKind::kShs, cfg_.train, cfg_.seed);
        break;
      case Method::kInputPerturb:
        bl_.emplace(cfg_.model, cfg_.model_arch, BaselineKind::kInputPerturb, cfg_.train,
                    cfg_.seed);
        break;
      case Method::kDiverseModel: {
        SeedFan fan(cfg_.seed);
        std::vector<std::unique_ptr<SegModel<T>>> models;
        for (std::size_t n = 0; n < cfg_.dm_models.size(); ++n)
          models.push_back(make_seg_model<T>(cfg_.dm_models[n], cfg_.model.input_bands,
                                             dataset_.class_count, fan.stream("init", n)));
        dm_.emplace(std::move(models), cfg_.train, cfg_.seed);
        break;
      }
    }
    const std::int64_t pair_count = pairing_count();
    const std::int64_t steps_per_epoch =
        (pair_count + cfg_.batch_size - 1) / cfg_.batch_size;
    optim_state().max_iter = std::max<std::int64_t>(1, cfg_.epochs * steps_per_epoch);
  }

  std::int64_t pairing_count() const {
    // The supervised-only arm walks the same schedule when unlabelled data
    // exists, so iteration counts stay comparable across arms.
    if (!dataset_.train_unlabelled.empty())
      return static_cast<std::int64_t>(dataset_.train_unlabelled.size());
    return static_cast<std::int64_t>(dataset_.train_labelled.size());
  }

  OptimState& optim_state() {
    if (dh_) return dh_->optim_state();
    if (bl_) return bl_->optim_state();
    return dm_->optim_state();
  }

  std::int64_t iter() { return optim_state().iter; }

  void run_epoch(std::int64_t epoch, std::ofstream& log, std::int64_t& ran_iters) {
    SeedFan fan(cfg_.seed);
    const auto epoch_u = static_cast<std::uint64_t>(epoch);
    const std::int64_t labelled_n = static_cast<std::int64_t>(dataset_.train_labelled.size());
    const bool has_unlabelled = !dataset_.train_unlabelled.empty();

    std::vector<std::size_t> order_l(dataset_.train_labelled.size());
    for (std::size_t i = 0; i < order_l.size(); ++i) order_l[i] = i;
    Rng rl = fan.rng("data-order/labelled", epoch_u);
    rl.shuffle(order_l);

    std::vector<std::size_t> order_u(dataset_.train_unlabelled.size());
    for (std::size_t i = 0; i < order_u.size(); ++i) order_u[i] = i;
    Rng ru = fan.rng("data-order/unlabelled", epoch_u);
    ru.shuffle(order_u);

    const PairingStream stream =
        cyclic_pairs(labelled_n, has_unlabelled
                                     ? static_cast<std::int64_t>(order_u.size())
                                     : labelled_n);

    std::vector<const Sample*> lab_chunk, unlab_chunk;
    for (std::size_t at = 0; at < stream.pairs.size();) {
      lab_chunk.clear();
      unlab_chunk.clear();
      for (std::int64_t b = 0; b < cfg_.batch_size && at < stream.pairs.size(); ++b, ++at) {
        const auto [s, k] = stream.pairs[at];
        lab_chunk.push_back(
            &dataset_.train_labelled[order_l[static_cast<std::size_t>(s) % order_l.size()]]);
        if (has_unlabelled)
          unlab_chunk.push_back(&dataset_.train_unlabelled[order_u[static_cast<std::size_t>(k)]]);
      }
      ImageBatch<T> lab_x = to_image_batch<T>(lab_chunk);
      ClassMap lab_y = to_label_batch(lab_chunk);
      const bool in_warmup = epoch <= cfg_.warmup_epochs;
      StepReport rep;
      if (in_warmup) {
        rep = dh_   ? dh_->warmup_step(lab_x, lab_y)
              : dm_ ? dm_->warmup_step(lab_x, lab_y)
                    : bl_->warmup_step(lab_x, lab_y);
      } else if (dh_) {
        rep = dh_->step(lab_x, lab_y, to_image_batch<T>(unlab_chunk));
      } else if (dm_) {
        rep = dm_->step(lab_x, lab_y, to_image_batch<T>(unlab_chunk));
      } else if (has_unlabelled) {
        ImageBatch<T> unlab_x = to_image_batch<T>(unlab_chunk);
        rep = bl_->step(lab_x, lab_y, &unlab_x);
      } else {
        rep = bl_->step(lab_x, lab_y, nullptr);
      }
      log << step_report_json(rep).dump() << '\n';
      ++ran_iters;
    }
    log.flush();
  }

  static nlohmann::json step_report_json(const StepReport& rep) {
    nlohmann::json j;
    j["iter"] = rep.iter;
    j["lr"] = rep.lr;
    j["sup"] = rep.sup;
    j["unsup"] = rep.unsup;
    j["total"] = rep.total;
    j["phi"] = rep.phi;
    j["freeze"] = rep.freeze_mask;
    j["dropout"] = rep.dropout_active;
    j["main"] = rep.main_head;
    if (rep.unlabelled_ignored) j["unlabelled_ignored"] = true;
    if (rep.warmup) j["warmup"] = true;
    if (!rep.dm_pair_terms.empty()) j["pairs"] = rep.dm_pair_terms;
    return j;
  }

  MetricReport evaluate_split(const std::vector<Sample>& split) {
    const std::int64_t eval_batch = 16;
    if (dm_) {
      return evaluate_samples<T>(split, dataset_.class_count, eval_batch,
                                 [&](const ImageBatch<T>& x) {
                                   return predict_ensemble(dm_->models(), x);
                                 });
    }
    if (bl_) {
      return evaluate_samples<T>(split, dataset_.class_count, eval_batch,
                                 [&](const ImageBatch<T>& x) {
                                   return predict_model(bl_->model(), x);
                                 });
    }
    return evaluate_samples<T>(split, dataset_.class_count, eval_batch,
                               [&](const ImageBatch<T>& x) {
                                 return predict_multihead(dh_->net(), x);
                               });
  }

  std::vector<std::vector<ParamRef<T>>> model_param_groups() {
    std::vector<std::vector<ParamRef<T>>> groups;
    if (dm_) {
      for (auto& m : dm_->models()) groups.push_back(m->params());
    } else if (bl_) {
      groups.push_back(bl_->model().params());
    } else {
      groups.push_back(dh_->net().params());
    }
    return groups;
  }

  std::vector<const std::vector<Tensor<T>>*> velocity_groups() {
    std::vector<const std::vector<Tensor<T>>*> groups;
    if (dm_) {
      for (auto& opt : dm_->optimizers()) groups.push_back(&opt.velocity());
    } else {
      groups.push_back(&(dh_ ? dh_->optimizer() : bl_->optimizer()).velocity());
    }
    return groups;
  }

  void save(const std::string& path) {
    detail::CheckpointMeta meta;
    meta.config_hash = config_hash(cfg_);
    meta.method = to_string(cfg_.method);
    meta.config_json = cfg_.echo.dump();
    meta.iter = iter();
    meta.epochs_completed = epochs_completed_;
    meta.best_epoch = best_epoch_;
    meta.best_val_miou = best_val_miou_;
    meta.phi = dh_ ? dh_->settings().vote.phi : cfg_.train.vote.phi;
    detail::save_checkpoint<T>(path, meta, model_param_groups(), velocity_groups());
  }

  void restore(const detail::CheckpointPayload<T>& payload) {
    auto params = model_param_groups();
    if (payload.model_params.size() != params.size())
      throw CheckpointError("checkpoint model count mismatch");
    for (std::size_t g = 0; g < params.size(); ++g)
      detail::commit_group(payload.model_params[g], params[g],
                           "model " + std::to_string(g) + " params");
    std::vector<std::vector<Tensor<T>>*> vels;
    if (dm_) {
      for (auto& opt : dm_->optimizers()) vels.push_back(&opt.velocity());
    } else {
      vels.push_back(&(dh_ ? dh_->optimizer() : bl_->optimizer()).velocity());
    }
    if (payload.velocities.size() != vels.size())
      throw CheckpointError("checkpoint optimizer count mismatch");
    for (std::size_t g = 0; g < vels.size(); ++g)
      detail::commit_velocity(payload.velocities[g], *vels[g],
                              "optimizer " + std::to_string(g) + " velocity");
    optim_state().iter = payload.meta.iter;
    epochs_completed_ = payload.meta.epochs_completed;
    if (dh_) dh_->settings().vote.phi = payload.meta.phi;
  }

  void write_report(const RunReport& report) {
    const std::string path = join(cfg_.output_dir, "report.json");
    std::ofstream os(path);
    if (!os) throw IoError("cannot write report: " + path);
    os << to_json(report).dump(2) << '\n';
  }

  ExperimentConfig cfg_;
  SplitDataset dataset_;
  std::optional<DiverseHeadTrainer<T>> dh_;
  std::optional<BaselineTrainer<T>> bl_;
  std::optional<DiverseModelTrainer<T>> dm_;
  std::int64_t epochs_completed_ = 0;
  std::int64_t best_epoch_ = -1;
  double best_val_miou_ = std::numeric_limits<double>::quiet_NaN();
};

template <typename T = float>
RunReport run_experiment(const ExperimentConfig& cfg, const RunControl& ctl = {}) {
  ExperimentRunner<T> runner(cfg);
  return runner.run(ctl);
}

}  // namespace diversenet
