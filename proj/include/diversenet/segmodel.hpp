// SPDX-License-Identifier: Apache-2.0
//
// Multi-head segmentation network: a shared convolutional trunk feeding L
// identically shaped, independently initialized two-layer heads. Head outputs
// are bilinearly resized back to the input resolution. A compact "desk"
// trunk is shipped; wider production trunks sit behind the same interface.
#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "diversenet/errors.hpp"
#include "diversenet/nn.hpp"
#include "diversenet/rng.hpp"
#include "diversenet/types.hpp"

namespace diversenet {

struct ModelSpec {
  std::int64_t head_count = 10;
  std::int64_t class_count = 2;
  std::int64_t input_bands = 3;
  std::string trunk = "desk";
  double dropout_rate = 0.0;
  std::uint64_t seed = 0;
};

struct TrunkLayout {
  std::vector<std::int64_t> block_widths;  // 3x3 stride-2 blocks
  std::int64_t feature_width;              // 1x1 projection fed to the heads
};

/// The shipped trunk keeps most of its parameters in the deepest block so the
/// per-head cost stays a small fraction of the whole network.
inline TrunkLayout trunk_layout(const std::string& name) {
  if (name == "desk") return {{16, 32, 48, 224}, 16};
  if (name == "desk-small") return {{8, 12, 16, 32}, 8};
  throw ConfigError("unknown trunk '" + name + "' (expected desk or desk-small)");
}

struct ParameterFootprint {
  std::int64_t trunk_params = 0;
  std::int64_t per_head_params = 0;
  std::int64_t head_count = 0;
  std::int64_t total_params = 0;
};

template <typename T>
class MultiHeadNet {
public:
  MultiHeadNet() = default;

  explicit MultiHeadNet(const ModelSpec& spec) : spec_(spec) {
    if (spec.head_count < 1) throw ConfigError("model: head count must be >= 1");
    if (spec.class_count < 2) throw ConfigError("model: class count must be >= 2");
    if (spec.input_bands < 1) throw ConfigError("model: input bands must be >= 1");
    if (!(spec.dropout_rate >= 0.0 && spec.dropout_rate < 1.0))
      throw ConfigError("model: dropout rate must lie in [0,1)");

    const TrunkLayout layout = trunk_layout(spec.trunk);
    std::int64_t ch = spec.input_bands;
    for (auto width : layout.block_widths) {
      trunk_convs_.emplace_back(ch, width, 3, 2, 1);
      trunk_norms_.emplace_back(width);
      ch = width;
    }
    // The projection stays linear: signed, normalized features keep the
    // freshly initialized heads' decision boundaries spatially varied, which
    // the voted pseudo labels need before training has shaped the trunk.
    trunk_proj_ = Conv2d<T>(ch, layout.feature_width, 1, 1, 0, /*has_bias=*/false);
    feature_norm_ = InstanceNorm<T>(layout.feature_width);
    feature_width_ = layout.feature_width;
    trunk_relus_.resize(trunk_convs_.size());

    heads_.reserve(static_cast<std::size_t>(spec.head_count));
    for (std::int64_t j = 0; j < spec.head_count; ++j) {
      heads_.push_back(std::make_unique<Head>(feature_width_, spec.class_count));
    }

    init_params();
    check_head_diversity();
  }

  const ModelSpec& spec() const { return spec_; }
  std::int64_t head_count() const { return spec_.head_count; }
  std::int64_t class_count() const { return spec_.class_count; }
  std::int64_t feature_width() const { return feature_width_; }

  /// One logits map per head, all [B, H, W, C] at input resolution. With
  /// dropout enabled and a positive rate, each head's pre-final-layer feature
  /// channels are dropped independently; masks are drawn from `dropout_rng`
  /// in head order. Rate zero (or disabled) consumes no randomness and is a
  /// strict identity.
  std::vector<ProbMap<T>> forward(const ImageBatch<T>& images, bool dropout_enabled,
                                  Rng& dropout_rng) {
    if (images.bands() != spec_.input_bands)
      throw ShapeError("forward_heads: image bands " + std::to_string(images.bands()) +
                       " do not match model input bands " + std::to_string(spec_.input_bands));
    Tensor<T> features = images.pixels;
    for (std::size_t i = 0; i < trunk_convs_.size(); ++i)
      features = trunk_relus_[i].forward(trunk_convs_[i].forward(features));
    features = trunk_proj_.forward(features);

    const bool drop = dropout_enabled && spec_.dropout_rate > 0.0;
    std::vector<Tensor<T>> masks;
    if (drop) {
      masks.reserve(heads_.size());
      for (std::size_t j = 0; j < heads_.size(); ++j)
        masks.push_back(ChannelDropout<T>::make_mask(features.dim(0), feature_width_,
                                                     spec_.dropout_rate, dropout_rng));
    }

    std::vector<ProbMap<T>> out;
    out.reserve(heads_.size());
    for (std::size_t j = 0; j < heads_.size(); ++j) {
      const Tensor<T>* mask = drop ? &masks[j] : nullptr;
      out.push_back(ProbMap<T>{heads_[j]->forward(features, mask, spec_.dropout_rate,
                                                  images.height(), images.width()),
                               false});
    }
    return out;
  }

  /// Accumulates parameter gradients for the given per-head logit gradients
  /// (empty tensor = no gradient from that head) and propagates the summed
  /// head gradients through the trunk.
  void backward(const std::vector<Tensor<T>>& head_grads) {
    if (head_grads.size() != heads_.size())
      throw ArgError("backward: expected one gradient slot per head");
    Tensor<T> feature_grad;
    for (std::size_t j = 0; j < heads_.size(); ++j) {
      if (head_grads[j].numel() == 0) continue;
      Tensor<T> g = heads_[j]->backward(head_grads[j]);
      if (feature_grad.numel() == 0) {
        feature_grad = std::move(g);
      } else {
        T* acc = feature_grad.data();
        const T* src = g.data();
        for (std::int64_t i = 0; i < feature_grad.numel(); ++i) acc[i] += src[i];
      }
    }
    if (feature_grad.numel() == 0) return;
    feature_grad = trunk_proj_.backward(feature_grad);
    for (std::size_t i = trunk_convs_.size(); i-- > 0;)
      feature_grad = trunk_convs_[i].backward(trunk_relus_[i].backward(feature_grad),
                                              /*need_input_grad=*/i != 0);
  }

  void zero_grad() {
    for (auto& c : trunk_convs_) c.zero_grad();
    for (auto& n : trunk_norms_) n.zero_grad();
    trunk_proj_.zero_grad();
    feature_norm_.zero_grad();
    for (auto& h : heads_) h->zero_grad();
  }

  std::vector<ParamRef<T>> trunk_params() {
    std::vector<ParamRef<T>> out;
    for (std::size_t i = 0; i < trunk_convs_.size(); ++i) {
      for (auto p : trunk_convs_[i].params()) out.push_back(p);
      for (auto p : trunk_norms_[i].params()) out.push_back(p);
    }
    for (auto p : trunk_proj_.params()) out.push_back(p);
    for (auto p : feature_norm_.params()) out.push_back(p);
    return out;
  }

  std::vector<ParamRef<T>> head_params(std::int64_t j) { return heads_.at(j)->params(); }

  /// Trunk parameters first, then heads in index order.
  std::vector<ParamRef<T>> params() {
    std::vector<ParamRef<T>> out = trunk_params();
    for (auto& h : heads_)
      for (auto p : h->params()) out.push_back(p);
    return out;
  }

  ParameterFootprint footprint() const {
    ParameterFootprint f;
    for (const auto& c : trunk_convs_) f.trunk_params += c.param_count();
    for (const auto& n : trunk_norms_) f.trunk_params += n.param_count();
    f.trunk_params += trunk_proj_.param_count();
    f.trunk_params += feature_norm_.param_count();
    f.per_head_params = heads_.front()->param_count();
    f.head_count = spec_.head_count;
    f.total_params = f.trunk_params + f.head_count * f.per_head_params;
    return f;
  }

private:
  struct Head {
    // Bias-free: with normalized trunk features this keeps constant-output
    // shortcuts out of reach of the self-training loss.
    Head(std::int64_t features, std::int64_t classes)
        : conv1(features, features, 3, 1, 1, /*has_bias=*/false),
          conv2(features, classes, 1, 1, 0, /*has_bias=*/false) {}

    Tensor<T> forward(const Tensor<T>& features, const Tensor<T>* mask, double rate,
                      std::int64_t out_h, std::int64_t out_w) {
      Tensor<T> x = relu.forward(conv1.forward(features));
      x = dropout.forward(x, mask ? *mask : Tensor<T>{}, mask ? rate : 0.0);
      x = conv2.forward(x);
      up = BilinearResize<T>(out_h, out_w);
      return up.forward(x);
    }

    Tensor<T> backward(const Tensor<T>& gout) {
      Tensor<T> g = up.backward(gout);
      g = conv2.backward(g);
      g = dropout.backward(g);
      return conv1.backward(relu.backward(g));
    }

    std::vector<ParamRef<T>> params() {
      std::vector<ParamRef<T>> out;
      for (auto p : conv1.params()) out.push_back(p);
      for (auto p : conv2.params()) out.push_back(p);
      return out;
    }

    void zero_grad() {
      conv1.zero_grad();
      conv2.zero_grad();
    }

    std::int64_t param_count() const { return conv1.param_count() + conv2.param_count(); }

    Conv2d<T> conv1;
    Relu<T> relu;
    ChannelDropout<T> dropout;
    Conv2d<T> conv2;
    BilinearResize<T> up;
  };

  void init_params() {
    SeedFan fan(spec_.seed);
    for (std::size_t i = 0; i < trunk_convs_.size(); ++i) {
      Rng rng = fan.rng("init/trunk", i);
      trunk_convs_[i].init(rng);
    }
    Rng proj_rng = fan.rng("init/trunk", trunk_convs_.size());
    trunk_proj_.init(proj_rng);
    for (std::size_t j = 0; j < heads_.size(); ++j) {
      Rng r1 = fan.rng("init/head", 2 * j);
      Rng r2 = fan.rng("init/head", 2 * j + 1);
      heads_[j]->conv1.init(r1);
      heads_[j]->conv2.init(r2);
      // Near-zero classifier init: every head starts close to a uniform
      // softmax, so the first voted pseudo labels carry no class skew for
      // the unsupervised term to amplify.
      Tensor<T>& w = heads_[j]->conv2.weight();
      for (std::int64_t i = 0; i < w.numel(); ++i) w[i] *= static_cast<T>(0.05);
    }
  }

  void check_head_diversity() const {
    for (std::size_t a = 0; a < heads_.size(); ++a)
      for (std::size_t b = a + 1; b < heads_.size(); ++b) {
        if (heads_[a]->conv1.weight() == heads_[b]->conv1.weight() &&
            heads_[a]->conv2.weight() == heads_[b]->conv2.weight())
          throw ConfigError("model: heads " + std::to_string(a) + " and " + std::to_string(b) +
                            " were initialized identically");
      }
  }

  ModelSpec spec_;
  std::vector<Conv2d<T>> trunk_convs_;
  std::vector<InstanceNorm<T>> trunk_norms_;
  InstanceNorm<T> feature_norm_;
  std::vector<Relu<T>> trunk_relus_;
  Conv2d<T> trunk_proj_;
  std::int64_t feature_width_ = 0;
  std::vector<std::unique_ptr<Head>> heads_;
};

template <typename T>
MultiHeadNet<T> build_multihead_model(const ModelSpec& spec) {
  return MultiHeadNet<T>(spec);
}

template <typename T>
std::vector<ProbMap<T>> forward_heads(MultiHeadNet<T>& net, const ImageBatch<T>& images,
                                      bool dropout_enabled, Rng& dropout_rng) {
  return net.forward(images, dropout_enabled, dropout_rng);
}

template <typename T>
ParameterFootprint parameter_footprint(const MultiHeadNet<T>& net) {
  return net.footprint();
}

}  // namespace diversenet
