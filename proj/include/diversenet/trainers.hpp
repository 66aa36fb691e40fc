// SPDX-License-Identifier: Apache-2.0
//
// Training loops: multi-head semi-supervised steps under dynamic freezing or
// dropout, cross-model supervision between three networks, and the
// supervised / self-training / input-perturbation baselines. All randomness
// is drawn from named per-iteration streams so runs replay bit-identically
// and resume exactly.
#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <utility>
#include <vector>

#include "diversenet/data.hpp"
#include "diversenet/dm_models.hpp"
#include "diversenet/errors.hpp"
#include "diversenet/losses.hpp"
#include "diversenet/metrics.hpp"
#include "diversenet/optim.hpp"
#include "diversenet/perturb.hpp"
#include "diversenet/rng.hpp"
#include "diversenet/segmodel.hpp"
#include "diversenet/voting.hpp"

namespace diversenet {

// ---------------------------------------------------------------------------
// Labelled/unlabelled pairing

/// Deterministic schedule pairing every unlabelled index k (0-based) with the
/// labelled index k mod M, so the small labelled set cycles until each
/// unlabelled item has been visited exactly once per epoch.
struct PairingStream {
  std::int64_t labelled_count = 0;
  std::int64_t unlabelled_count = 0;
  std::vector<std::pair<std::int64_t, std::int64_t>> pairs;  // (labelled, unlabelled)
};

inline PairingStream cyclic_pairs(std::int64_t labelled_count, std::int64_t unlabelled_count) {
  if (labelled_count < 1) throw ConfigError("cyclic_pairs: need at least one labelled item");
  if (unlabelled_count < 1) throw ConfigError("cyclic_pairs: need at least one unlabelled item");
  PairingStream stream;
  stream.labelled_count = labelled_count;
  stream.unlabelled_count = unlabelled_count;
  stream.pairs.reserve(static_cast<std::size_t>(unlabelled_count));
  for (std::int64_t k = 0; k < unlabelled_count; ++k)
    stream.pairs.emplace_back(k % labelled_count, k);
  return stream;
}

// ---------------------------------------------------------------------------
// Batch assembly

template <typename T>
ImageBatch<T> to_image_batch(const std::vector<const Sample*>& samples) {
  if (samples.empty()) throw ArgError("to_image_batch: empty batch");
  const auto& first = samples.front()->image;
  ImageBatch<T> batch{Tensor<T>({static_cast<std::int64_t>(samples.size()), first.dim(0),
                                 first.dim(1), first.dim(2)})};
  T* dst = batch.pixels.data();
  for (const auto* s : samples) {
    if (!(s->image.dims() == first.dims()))
      throw ShapeError("to_image_batch: mixed patch shapes in one batch");
    for (std::int64_t i = 0; i < s->image.numel(); ++i) *dst++ = static_cast<T>(s->image[i]);
  }
  return batch;
}

inline ClassMap to_label_batch(const std::vector<const Sample*>& samples) {
  if (samples.empty()) throw ArgError("to_label_batch: empty batch");
  const auto& first = samples.front()->label;
  ClassMap batch{Tensor<std::int32_t>(
      {static_cast<std::int64_t>(samples.size()), first.dim(0), first.dim(1)})};
  std::int32_t* dst = batch.labels.data();
  for (const auto* s : samples) {
    for (std::int64_t i = 0; i < s->label.numel(); ++i) *dst++ = s->label[i];
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Step reporting

struct StepReport {
  std::int64_t iter = 0;
  double lr = 0.0;
  double sup = 0.0;
  double unsup = 0.0;
  double total = 0.0;
  std::vector<std::int64_t> freeze_mask;  // dynamic-freezing steps
  bool dropout_active = false;            // dropout steps
  std::int64_t main_head = -1;            // head trained by the unsupervised loss
  double phi = 0.0;                       // vote weight used this step
  bool unlabelled_ignored = false;        // supervised-only baseline
  bool warmup = false;                    // supervised initialization step
  std::vector<double> dm_pair_terms;      // six cross-model losses, when applicable

  friend bool operator==(const StepReport&, const StepReport&) = default;
};

/// Trainer-level knobs shared by every method.
struct TrainSettings {
  LossWeights loss;
  VoteWeight vote;
  double base_lr = 0.01;
  double power = 0.9;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::optional<std::int64_t> freeze_count;  // default: floor(L/2)
  NoiseSpec noise;                           // input-perturbation baseline only
};

namespace detail {

/// Maps optimizer parameter slots to their owning head (-1 = trunk), so a
/// freeze mask can translate into per-slot skip flags.
template <typename T>
std::vector<std::int64_t> param_owners(MultiHeadNet<T>& net) {
  std::vector<std::int64_t> owners(net.trunk_params().size(), -1);
  for (std::int64_t j = 0; j < net.head_count(); ++j) {
    const std::size_t n = net.head_params(j).size();
    owners.insert(owners.end(), n, j);
  }
  return owners;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// DiverseHead trainer

enum class DiverseHeadMode { kDynamicFreeze, kDropout };

template <typename T>
class DiverseHeadTrainer {
public:
  DiverseHeadTrainer(const ModelSpec& spec, DiverseHeadMode mode, TrainSettings settings,
                     std::uint64_t master_seed)
      : mode_(mode), settings_(settings), fan_(master_seed),
        net_(make_spec(spec, fan_)), freeze_(net_.head_count()),
        opt_(net_.params(), settings.momentum, settings.weight_decay),
        owners_(detail::param_owners(net_)) {
    if (net_.head_count() < 2)
      throw ConfigError("diversehead: training requires at least 2 heads");
    if (mode == DiverseHeadMode::kDropout && !(spec.dropout_rate > 0.0))
      throw ConfigError("diversehead-dt: dropout rate must be positive");
    if (mode == DiverseHeadMode::kDynamicFreeze && spec.dropout_rate != 0.0)
      throw ConfigError("diversehead-df: dropout must stay disabled");
    optim_.base_lr = settings.base_lr;
    optim_.power = settings.power;
    optim_.momentum = settings.momentum;
    optim_.weight_decay = settings.weight_decay;
  }

  StepReport step(const ImageBatch<T>& labelled_images, const ClassMap& labelled_gt,
                  const ImageBatch<T>& unlabelled_images) {
    const double lr = poly_lr(optim_);
    const auto iter = static_cast<std::uint64_t>(optim_.iter);
    net_.zero_grad();

    StepReport rep;
    rep.iter = optim_.iter;
    rep.lr = lr;
    rep.phi = settings_.vote.phi;
    rep.dropout_active = mode_ == DiverseHeadMode::kDropout;

    FreezeMask mask;
    if (mode_ == DiverseHeadMode::kDynamicFreeze) {
      Rng freeze_rng = fan_.rng("freeze", iter);
      mask = settings_.freeze_count
                 ? select_freeze_set(net_.head_count(), *settings_.freeze_count, freeze_rng)
                 : select_freeze_set(net_.head_count(), freeze_rng);
    }
    rep.freeze_mask = mask.frozen;

    Rng dropout_rng = fan_.rng("dropout", iter);
    Rng main_rng = fan_.rng("main-head", iter);

    with_frozen_heads(freeze_, mask, [&] {
      const std::int64_t head_count = net_.head_count();
      // Supervised pass: every head, dropout off.
      auto preds_l = net_.forward(labelled_images, false, dropout_rng);
      std::vector<Tensor<T>> grads_l;
      grads_l.reserve(preds_l.size());
      double sup_sum = 0.0;
      for (auto& pred : preds_l) {
        auto ce = pixel_ce_with_grad(pred, labelled_gt, 1.0 / static_cast<double>(head_count));
        sup_sum += ce.loss;
        grads_l.push_back(std::move(ce.grad));
      }
      rep.sup = sup_sum / static_cast<double>(head_count);
      net_.backward(grads_l);

      // Unsupervised pass: voted pseudo label supervises one random head.
      auto preds_u = net_.forward(unlabelled_images, mode_ == DiverseHeadMode::kDropout,
                                  dropout_rng);
      auto [pseudo, mean_prob] = make_pseudo_label(preds_u, settings_.vote);
      const auto main = static_cast<std::int64_t>(
          main_rng.next_below(static_cast<std::uint64_t>(head_count)));
      rep.main_head = main;
      if (pseudo.contains_ignore())
        throw ArgError("diversehead step: pseudo labels must be dense");
      auto ce_u = pixel_ce_with_grad(preds_u[static_cast<std::size_t>(main)], pseudo,
                                     settings_.loss.lambda);
      rep.unsup = ce_u.loss;
      if (settings_.loss.lambda > 0.0) {
        std::vector<Tensor<T>> grads_u(preds_u.size());
        grads_u[static_cast<std::size_t>(main)] = std::move(ce_u.grad);
        net_.backward(grads_u);
      }

      if (settings_.vote.mode == VoteWeight::Mode::kLearnableSurrogate) {
        std::vector<ClassMap> individual;
        individual.reserve(preds_u.size());
        for (auto& p : preds_u) individual.push_back(argmax_map(p));
        const double g = phi_surrogate_grad(individual, mean_prob, pseudo, settings_.vote.phi);
        settings_.vote.phi = std::max(0.0, settings_.vote.phi - lr * g);
      }

      std::vector<bool> skip(owners_.size());
      for (std::size_t i = 0; i < owners_.size(); ++i)
        skip[i] = owners_[i] >= 0 && freeze_.is_frozen(owners_[i]);
      opt_.step(lr, &skip);
      return 0;
    });

    rep.total = total_loss(rep.sup, rep.unsup, settings_.loss);
    ++optim_.iter;
    return rep;
  }

  /// Supervised initialization step: all heads, no freezing, no dropout, no
  /// unsupervised term. Stands in for the pretrained-backbone initialization
  /// of the full-scale protocol before the semi-supervised loop starts. Each
  /// head trains at full strength; the shared trunk still receives the mean
  /// of the head gradients, matching the single-network dynamics.
  StepReport warmup_step(const ImageBatch<T>& labelled_images, const ClassMap& labelled_gt) {
    const double lr = poly_lr(optim_);
    net_.zero_grad();
    StepReport rep;
    rep.iter = optim_.iter;
    rep.lr = lr;
    rep.phi = settings_.vote.phi;
    rep.warmup = true;
    Rng dropout_rng = fan_.rng("dropout", static_cast<std::uint64_t>(optim_.iter));
    const std::int64_t head_count = net_.head_count();
    auto preds = net_.forward(labelled_images, false, dropout_rng);
    std::vector<Tensor<T>> grads;
    grads.reserve(preds.size());
    double sup_sum = 0.0;
    for (auto& pred : preds) {
      auto ce = pixel_ce_with_grad(pred, labelled_gt, 1.0);
      sup_sum += ce.loss;
      grads.push_back(std::move(ce.grad));
    }
    rep.sup = sup_sum / static_cast<double>(head_count);
    net_.backward(grads);
    const T trunk_scale = static_cast<T>(1.0 / static_cast<double>(head_count));
    for (auto p : net_.trunk_params())
      for (std::int64_t i = 0; i < p.grad->numel(); ++i) (*p.grad)[i] *= trunk_scale;
    opt_.step(lr);
    rep.total = rep.sup;
    ++optim_.iter;
    return rep;
  }

  MultiHeadNet<T>& net() { return net_; }
  OptimState& optim_state() { return optim_; }
  SgdOptimizer<T>& optimizer() { return opt_; }
  FreezeState& freeze_state() { return freeze_; }
  TrainSettings& settings() { return settings_; }
  const SeedFan& seed_fan() const { return fan_; }
  DiverseHeadMode mode() const { return mode_; }

private:
  static ModelSpec make_spec(ModelSpec spec, const SeedFan& fan) {
    spec.seed = fan.stream("init");
    return spec;
  }

  DiverseHeadMode mode_;
  TrainSettings settings_;
  SeedFan fan_;
  MultiHeadNet<T> net_;
  FreezeState freeze_;
  SgdOptimizer<T> opt_;
  std::vector<std::int64_t> owners_;
  OptimState optim_;
};

// ---------------------------------------------------------------------------
// Baselines

enum class BaselineKind { kBase, kShs, kInputPerturb };

/// Presents the single-head multi-head network (shared trunk plus one head)
/// through the generic model interface, so baseline training and evaluation
/// run identically over the trunk network and the cross-model members.
template <typename T>
class SingleHeadSegModel final : public SegModel<T> {
public:
  explicit SingleHeadSegModel(const ModelSpec& spec) : net_(spec) {
    if (spec.head_count != 1)
      throw ConfigError("single-head baseline model requires head_count == 1");
  }

  ProbMap<T> forward(const ImageBatch<T>& images) override {
    Rng unused(0);
    return net_.forward(images, false, unused)[0];
  }
  void backward(const Tensor<T>& dlogits) override {
    std::vector<Tensor<T>> grads;
    grads.push_back(dlogits);
    net_.backward(grads);
  }
  std::vector<ParamRef<T>> params() override { return net_.params(); }
  void zero_grad() override { net_.zero_grad(); }
  std::int64_t param_count() const override { return net_.footprint().total_params; }
  std::int64_t class_count() const override { return net_.class_count(); }
  std::int64_t input_bands() const override { return net_.spec().input_bands; }
  std::string arch() const override { return "multihead"; }

  MultiHeadNet<T>& net() { return net_; }

private:
  MultiHeadNet<T> net_;
};

template <typename T>
class BaselineTrainer {
public:
  /// `arch` selects the backbone: "multihead" wraps the single-head trunk
  /// network described by `spec`; the cross-model member names (pyramid,
  /// unet, segnet) train that architecture instead.
  BaselineTrainer(const ModelSpec& spec, const std::string& arch, BaselineKind kind,
                  TrainSettings settings, std::uint64_t master_seed)
      : kind_(kind), settings_(settings), fan_(master_seed) {
    if (arch == "multihead") {
      ModelSpec s = spec;
      s.seed = fan_.stream("init");
      model_ = std::make_unique<SingleHeadSegModel<T>>(s);
    } else {
      model_ = make_seg_model<T>(arch, spec.input_bands, spec.class_count, fan_.stream("init"));
    }
    opt_ = SgdOptimizer<T>(model_->params(), settings.momentum, settings.weight_decay);
    optim_.base_lr = settings.base_lr;
    optim_.power = settings.power;
    optim_.momentum = settings.momentum;
    optim_.weight_decay = settings.weight_decay;
  }

  /// `unlabelled_images` may be null for the supervised-only baseline; the
  /// self-training and input-perturbation kinds require it.
  StepReport step(const ImageBatch<T>& labelled_images, const ClassMap& labelled_gt,
                  const ImageBatch<T>* unlabelled_images) {
    const double lr = poly_lr(optim_);
    const auto iter = static_cast<std::uint64_t>(optim_.iter);
    model_->zero_grad();

    StepReport rep;
    rep.iter = optim_.iter;
    rep.lr = lr;

    ProbMap<T> pred_l = model_->forward(labelled_images);
    auto ce_l = pixel_ce_with_grad(pred_l, labelled_gt);
    rep.sup = ce_l.loss;
    model_->backward(ce_l.grad);

    switch (kind_) {
      case BaselineKind::kBase:
        rep.unlabelled_ignored = unlabelled_images != nullptr;
        break;
      case BaselineKind::kShs: {
        if (!unlabelled_images) throw ArgError("shs step: unlabelled batch required");
        ProbMap<T> pred_u = model_->forward(*unlabelled_images);
        ClassMap pseudo = argmax_map(pred_u);
        auto ce_u = pixel_ce_with_grad(pred_u, pseudo, settings_.loss.lambda);
        rep.unsup = ce_u.loss;
        if (settings_.loss.lambda > 0.0) model_->backward(ce_u.grad);
        break;
      }
      case BaselineKind::kInputPerturb: {
        if (!unlabelled_images) throw ArgError("input-perturb step: unlabelled batch required");
        ProbMap<T> pred_clean = model_->forward(*unlabelled_images);
        ClassMap target = argmax_map(pred_clean);
        Rng noise_rng = fan_.rng("noise", iter);
        ImageBatch<T> noisy = gaussian_perturb(*unlabelled_images, settings_.noise, noise_rng);
        ProbMap<T> pred_noisy = model_->forward(noisy);
        auto ce_u = pixel_ce_with_grad(pred_noisy, target, settings_.loss.lambda);
        rep.unsup = ce_u.loss;
        if (settings_.loss.lambda > 0.0) model_->backward(ce_u.grad);
        break;
      }
    }

    opt_.step(lr);
    rep.total = total_loss(rep.sup, rep.unsup, settings_.loss);
    ++optim_.iter;
    return rep;
  }

  StepReport warmup_step(const ImageBatch<T>& labelled_images, const ClassMap& labelled_gt) {
    const double lr = poly_lr(optim_);
    model_->zero_grad();
    StepReport rep;
    rep.iter = optim_.iter;
    rep.lr = lr;
    rep.warmup = true;
    ProbMap<T> pred = model_->forward(labelled_images);
    auto ce = pixel_ce_with_grad(pred, labelled_gt);
    rep.sup = ce.loss;
    model_->backward(ce.grad);
    opt_.step(lr);
    rep.total = rep.sup;
    ++optim_.iter;
    return rep;
  }

  SegModel<T>& model() { return *model_; }
  OptimState& optim_state() { return optim_; }
  SgdOptimizer<T>& optimizer() { return opt_; }
  BaselineKind kind() const { return kind_; }

private:
  BaselineKind kind_;
  TrainSettings settings_;
  SeedFan fan_;
  std::unique_ptr<SegModel<T>> model_;
  SgdOptimizer<T> opt_;
  OptimState optim_;
};

// ---------------------------------------------------------------------------
// DiverseModel trainer

template <typename T>
class DiverseModelTrainer {
public:
  DiverseModelTrainer(std::vector<std::unique_ptr<SegModel<T>>> models, TrainSettings settings,
                      std::uint64_t master_seed)
      : settings_(settings), fan_(master_seed), models_(std::move(models)) {
    if (models_.size() != 3)
      throw ConfigError("diversemodel: exactly 3 member networks required");
    for (const auto& m : models_)
      if (m->class_count() != models_.front()->class_count())
        throw ConfigError("diversemodel: member networks disagree on class count");
    for (auto& m : models_)
      opts_.emplace_back(m->params(), settings.momentum, settings.weight_decay);
    optim_.base_lr = settings.base_lr;
    optim_.power = settings.power;
    optim_.momentum = settings.momentum;
    optim_.weight_decay = settings.weight_decay;
  }

  StepReport step(const ImageBatch<T>& labelled_images, const ClassMap& labelled_gt,
                  const ImageBatch<T>& unlabelled_images) {
    const double lr = poly_lr(optim_);
    StepReport rep;
    rep.iter = optim_.iter;
    rep.lr = lr;

    for (auto& m : models_) m->zero_grad();

    // Supervised: plain cross-entropy on every member.
    std::vector<ProbMap<T>> preds_l;
    preds_l.reserve(3);
    for (auto& m : models_) preds_l.push_back(m->forward(labelled_images));
    double sup_sum = 0.0;
    for (std::size_t n = 0; n < 3; ++n) {
      auto ce = pixel_ce_with_grad(preds_l[n], labelled_gt, 1.0 / 3.0);
      sup_sum += ce.loss;
      models_[n]->backward(ce.grad);
    }
    rep.sup = sup_sum / 3.0;

    // Cross supervision: each member trains on the other two pseudo labels.
    std::vector<ProbMap<T>> preds_u;
    preds_u.reserve(3);
    for (auto& m : models_) preds_u.push_back(m->forward(unlabelled_images));
    std::vector<ClassMap> pseudos;
    pseudos.reserve(3);
    for (auto& p : preds_u) pseudos.push_back(argmax_map(p));

    // one fused pass per ordered pair yields both the logged term and the
    // gradient contribution
    const double scale = settings_.loss.lambda / 6.0;
    double unsup_sum = 0.0;
    rep.dm_pair_terms.reserve(6);
    for (std::size_t m = 0; m < 3; ++m) {
      Tensor<T> grad;
      for (std::size_t n = 0; n < 3; ++n) {
        if (m == n) continue;
        auto ce = pixel_ce_with_grad(preds_u[m], pseudos[n], scale);
        unsup_sum += ce.loss;
        rep.dm_pair_terms.push_back(ce.loss);
        if (grad.numel() == 0) {
          grad = std::move(ce.grad);
        } else {
          detail::add_into(grad, ce.grad);
        }
      }
      if (settings_.loss.lambda > 0.0) models_[m]->backward(grad);
    }
    rep.unsup = unsup_sum / 6.0;

    for (auto& opt : opts_) opt.step(lr);
    rep.total = total_loss(rep.sup, rep.unsup, settings_.loss);
    ++optim_.iter;
    return rep;
  }

  StepReport warmup_step(const ImageBatch<T>& labelled_images, const ClassMap& labelled_gt) {
    const double lr = poly_lr(optim_);
    StepReport rep;
    rep.iter = optim_.iter;
    rep.lr = lr;
    rep.warmup = true;
    for (auto& m : models_) m->zero_grad();
    double sup_sum = 0.0;
    for (std::size_t n = 0; n < models_.size(); ++n) {
      ProbMap<T> pred = models_[n]->forward(labelled_images);
      // members are independent networks; initialization trains each at
      // full strength
      auto ce = pixel_ce_with_grad(pred, labelled_gt, 1.0);
      sup_sum += ce.loss;
      models_[n]->backward(ce.grad);
    }
    rep.sup = sup_sum / 3.0;
    for (auto& opt : opts_) opt.step(lr);
    rep.total = rep.sup;
    ++optim_.iter;
    return rep;
  }

  std::vector<std::unique_ptr<SegModel<T>>>& models() { return models_; }
  OptimState& optim_state() { return optim_; }
  std::vector<SgdOptimizer<T>>& optimizers() { return opts_; }

private:
  TrainSettings settings_;
  SeedFan fan_;
  std::vector<std::unique_ptr<SegModel<T>>> models_;
  std::vector<SgdOptimizer<T>> opts_;
  OptimState optim_;
};

// ---------------------------------------------------------------------------
// Inference and evaluation

/// Multi-head inference: mean voting over softmaxed head outputs.
template <typename T>
ClassMap predict_multihead(MultiHeadNet<T>& net, const ImageBatch<T>& images) {
  Rng unused(0);
  auto preds = net.forward(images, false, unused);
  std::vector<ProbMap<T>> probs;
  probs.reserve(preds.size());
  for (auto& p : preds) probs.push_back(softmax_map(p));
  auto [mean_prob, label] = mean_vote(probs);
  return label;
}

/// Cross-model inference: mean voting over the member networks.
template <typename T>
ClassMap predict_ensemble(std::vector<std::unique_ptr<SegModel<T>>>& models,
                          const ImageBatch<T>& images) {
  std::vector<ProbMap<T>> probs;
  probs.reserve(models.size());
  for (auto& m : models) probs.push_back(softmax_map(m->forward(images)));
  auto [mean_prob, label] = mean_vote(probs);
  return label;
}

/// Single-model inference.
template <typename T>
ClassMap predict_model(SegModel<T>& model, const ImageBatch<T>& images) {
  ProbMap<T> pred = model.forward(images);
  return argmax_map(pred);
}

/// Accumulates a confusion matrix over a sample list with any predictor of
/// signature ClassMap(const ImageBatch<T>&).
template <typename T, typename Predictor>
MetricReport evaluate_samples(const std::vector<Sample>& samples, std::int64_t class_count,
                              std::int64_t batch, Predictor&& predict) {
  if (samples.empty()) throw ArgError("evaluate_samples: empty split");
  ConfusionMatrix cm(class_count);
  std::vector<const Sample*> chunk;
  for (std::size_t i = 0; i < samples.size();) {
    chunk.clear();
    for (std::int64_t b = 0; b < batch && i < samples.size(); ++b, ++i)
      chunk.push_back(&samples[i]);
    ImageBatch<T> images = to_image_batch<T>(chunk);
    ClassMap gt = to_label_batch(chunk);
    ClassMap pred = predict(images);
    cm.accumulate(pred, gt);
  }
  return derive_metrics(cm);
}

}  // namespace diversenet
