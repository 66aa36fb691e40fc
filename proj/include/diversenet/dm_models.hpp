// SPDX-License-Identifier: Apache-2.0
//
// Three small segmentation networks with deliberately different topologies
// (pyramid-pooling context, u-shaped skip connections, plain symmetric
// encoder-decoder) behind one interface. Cross-model training draws its
// pseudo-label diversity from these structural differences.
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

template <typename T>
class SegModel {
public:
  virtual ~SegModel() = default;
  virtual ProbMap<T> forward(const ImageBatch<T>& images) = 0;
  virtual void backward(const Tensor<T>& dlogits) = 0;
  virtual std::vector<ParamRef<T>> params() = 0;
  virtual void zero_grad() = 0;
  virtual std::int64_t param_count() const = 0;
  virtual std::int64_t class_count() const = 0;
  virtual std::int64_t input_bands() const = 0;
  virtual std::string arch() const = 0;
};

namespace detail {

template <typename T>
void add_into(Tensor<T>& acc, const Tensor<T>& src) {
  T* a = acc.data();
  const T* s = src.data();
  for (std::int64_t i = 0; i < acc.numel(); ++i) a[i] += s[i];
}

}  // namespace detail

/// Encoder plus a global-average-pooled context branch fused back in at the
/// coarsest level.
template <typename T>
class PyramidNet final : public SegModel<T> {
public:
  PyramidNet(std::int64_t bands, std::int64_t classes, std::uint64_t seed)
      : bands_(bands), classes_(classes),
        enc1_(bands, 16, 3, 2, 1), enc2_(16, 24, 3, 2, 1), enc3_(24, 32, 3, 2, 1),
        ctx_(32, 8, 1, 1, 0), fuse_(40, 32, 3, 1, 1), cls_(32, classes, 1, 1, 0) {
    SeedFan fan(seed);
    std::size_t i = 0;
    for (auto* c : convs()) {
      Rng rng = fan.rng("init/pyramid", i++);
      c->init(rng);
    }
  }

  ProbMap<T> forward(const ImageBatch<T>& images) override {
    const std::int64_t h = images.height(), w = images.width();
    Tensor<T> x = r1_.forward(enc1_.forward(images.pixels));
    x = r2_.forward(enc2_.forward(x));
    x = r3_.forward(enc3_.forward(x));
    Tensor<T> ctx = rc_.forward(ctx_.forward(gap_.forward(x)));
    broadcast_ = BroadcastSpatial<T>(x.dim(1), x.dim(2));
    Tensor<T> fused = rf_.forward(fuse_.forward(concat_channels(x, broadcast_.forward(ctx))));
    up_ = BilinearResize<T>(h, w);
    return {up_.forward(cls_.forward(fused)), false};
  }

  void backward(const Tensor<T>& dlogits) override {
    Tensor<T> g = cls_.backward(up_.backward(dlogits));
    g = fuse_.backward(rf_.backward(g));
    auto [g_main, g_ctx] = split_channels(g, 32);
    Tensor<T> g_gap = gap_.backward(ctx_.backward(rc_.backward(broadcast_.backward(g_ctx))));
    detail::add_into(g_main, g_gap);
    g = enc3_.backward(r3_.backward(g_main));
    g = enc2_.backward(r2_.backward(g));
    enc1_.backward(r1_.backward(g), /*need_input_grad=*/false);
  }

  std::vector<ParamRef<T>> params() override {
    std::vector<ParamRef<T>> out;
    for (auto* c : convs())
      for (auto p : c->params()) out.push_back(p);
    return out;
  }

  void zero_grad() override {
    for (auto* c : convs()) c->zero_grad();
  }

  std::int64_t param_count() const override {
    std::int64_t n = 0;
    for (const auto* c : const_convs()) n += c->param_count();
    return n;
  }

  std::int64_t class_count() const override { return classes_; }
  std::int64_t input_bands() const override { return bands_; }
  std::string arch() const override { return "pyramid"; }

private:
  std::vector<Conv2d<T>*> convs() { return {&enc1_, &enc2_, &enc3_, &ctx_, &fuse_, &cls_}; }
  std::vector<const Conv2d<T>*> const_convs() const {
    return {&enc1_, &enc2_, &enc3_, &ctx_, &fuse_, &cls_};
  }

  std::int64_t bands_, classes_;
  Conv2d<T> enc1_, enc2_, enc3_, ctx_, fuse_, cls_;
  Relu<T> r1_, r2_, r3_, rc_, rf_;
  GlobalAvgPool<T> gap_;
  BroadcastSpatial<T> broadcast_;
  BilinearResize<T> up_;
};

/// U-shaped encoder-decoder with skip connections at two scales.
template <typename T>
class UNetSmall final : public SegModel<T> {
public:
  UNetSmall(std::int64_t bands, std::int64_t classes, std::uint64_t seed)
      : bands_(bands), classes_(classes),
        enc1_(bands, 16, 3, 2, 1), enc2_(16, 24, 3, 2, 1), enc3_(24, 32, 3, 2, 1),
        dec2_(56, 24, 1, 1, 0), dec1_(40, 16, 1, 1, 0), cls_(16, classes, 1, 1, 0) {
    SeedFan fan(seed);
    std::size_t i = 0;
    for (auto* c : convs()) {
      Rng rng = fan.rng("init/unet", i++);
      c->init(rng);
    }
  }

  ProbMap<T> forward(const ImageBatch<T>& images) override {
    const std::int64_t h = images.height(), w = images.width();
    Tensor<T> s1 = r1_.forward(enc1_.forward(images.pixels));
    Tensor<T> s2 = r2_.forward(enc2_.forward(s1));
    Tensor<T> s3 = r3_.forward(enc3_.forward(s2));
    up2_ = BilinearResize<T>(s2.dim(1), s2.dim(2));
    Tensor<T> d2 = rd2_.forward(dec2_.forward(concat_channels(up2_.forward(s3), s2)));
    up1_ = BilinearResize<T>(s1.dim(1), s1.dim(2));
    Tensor<T> d1 = rd1_.forward(dec1_.forward(concat_channels(up1_.forward(d2), s1)));
    up_out_ = BilinearResize<T>(h, w);
    return {up_out_.forward(cls_.forward(d1)), false};
  }

  void backward(const Tensor<T>& dlogits) override {
    Tensor<T> g = cls_.backward(up_out_.backward(dlogits));
    g = dec1_.backward(rd1_.backward(g));
    auto [g_d2_up, g_s1_skip] = split_channels(g, 24);
    Tensor<T> g_d2 = up1_.backward(g_d2_up);
    g_d2 = dec2_.backward(rd2_.backward(g_d2));
    auto [g_s3_up, g_s2_skip] = split_channels(g_d2, 32);
    Tensor<T> g_s2 = enc3_.backward(r3_.backward(up2_.backward(g_s3_up)));
    detail::add_into(g_s2, g_s2_skip);
    Tensor<T> g_s1 = enc2_.backward(r2_.backward(g_s2));
    detail::add_into(g_s1, g_s1_skip);
    enc1_.backward(r1_.backward(g_s1), /*need_input_grad=*/false);
  }

  std::vector<ParamRef<T>> params() override {
    std::vector<ParamRef<T>> out;
    for (auto* c : convs())
      for (auto p : c->params()) out.push_back(p);
    return out;
  }

  void zero_grad() override {
    for (auto* c : convs()) c->zero_grad();
  }

  std::int64_t param_count() const override {
    std::int64_t n = 0;
    for (const auto* c : const_convs()) n += c->param_count();
    return n;
  }

  std::int64_t class_count() const override { return classes_; }
  std::int64_t input_bands() const override { return bands_; }
  std::string arch() const override { return "unet"; }

private:
  std::vector<Conv2d<T>*> convs() { return {&enc1_, &enc2_, &enc3_, &dec2_, &dec1_, &cls_}; }
  std::vector<const Conv2d<T>*> const_convs() const {
    return {&enc1_, &enc2_, &enc3_, &dec2_, &dec1_, &cls_};
  }

  std::int64_t bands_, classes_;
  Conv2d<T> enc1_, enc2_, enc3_, dec2_, dec1_, cls_;
  Relu<T> r1_, r2_, r3_, rd2_, rd1_;
  BilinearResize<T> up2_, up1_, up_out_;
};

/// Plain symmetric encoder-decoder without skips.
template <typename T>
class SegNetSmall final : public SegModel<T> {
public:
  SegNetSmall(std::int64_t bands, std::int64_t classes, std::uint64_t seed)
      : bands_(bands), classes_(classes),
        enc1_(bands, 16, 3, 2, 1), enc2_(16, 32, 3, 2, 1), dec2_(32, 16, 3, 1, 1),
        dec1_(16, 16, 1, 1, 0), cls_(16, classes, 1, 1, 0) {
    SeedFan fan(seed);
    std::size_t i = 0;
    for (auto* c : convs()) {
      Rng rng = fan.rng("init/segnet", i++);
      c->init(rng);
    }
  }

  ProbMap<T> forward(const ImageBatch<T>& images) override {
    const std::int64_t h = images.height(), w = images.width();
    Tensor<T> x = r1_.forward(enc1_.forward(images.pixels));
    x = r2_.forward(enc2_.forward(x));
    x = rd2_.forward(dec2_.forward(x));
    up1_ = BilinearResize<T>(x.dim(1) * 2, x.dim(2) * 2);
    x = rd1_.forward(dec1_.forward(up1_.forward(x)));
    up_out_ = BilinearResize<T>(h, w);
    return {up_out_.forward(cls_.forward(x)), false};
  }

  void backward(const Tensor<T>& dlogits) override {
    Tensor<T> g = cls_.backward(up_out_.backward(dlogits));
    g = up1_.backward(dec1_.backward(rd1_.backward(g)));
    g = dec2_.backward(rd2_.backward(g));
    g = enc2_.backward(r2_.backward(g));
    enc1_.backward(r1_.backward(g), /*need_input_grad=*/false);
  }

  std::vector<ParamRef<T>> params() override {
    std::vector<ParamRef<T>> out;
    for (auto* c : convs())
      for (auto p : c->params()) out.push_back(p);
    return out;
  }

  void zero_grad() override {
    for (auto* c : convs()) c->zero_grad();
  }

  std::int64_t param_count() const override {
    std::int64_t n = 0;
    for (const auto* c : const_convs()) n += c->param_count();
    return n;
  }

  std::int64_t class_count() const override { return classes_; }
  std::int64_t input_bands() const override { return bands_; }
  std::string arch() const override { return "segnet"; }

private:
  std::vector<Conv2d<T>*> convs() { return {&enc1_, &enc2_, &dec2_, &dec1_, &cls_}; }
  std::vector<const Conv2d<T>*> const_convs() const {
    return {&enc1_, &enc2_, &dec2_, &dec1_, &cls_};
  }

  std::int64_t bands_, classes_;
  Conv2d<T> enc1_, enc2_, dec2_, dec1_, cls_;
  Relu<T> r1_, r2_, rd2_, rd1_;
  BilinearResize<T> up1_, up_out_;
};

template <typename T>
std::unique_ptr<SegModel<T>> make_seg_model(const std::string& arch, std::int64_t bands,
                                            std::int64_t classes, std::uint64_t seed) {
  if (classes < 2) throw ConfigError("seg model: class count must be >= 2");
  if (arch == "pyramid") return std::make_unique<PyramidNet<T>>(bands, classes, seed);
  if (arch == "unet") return std::make_unique<UNetSmall<T>>(bands, classes, seed);
  if (arch == "segnet") return std::make_unique<SegNetSmall<T>>(bands, classes, seed);
  throw ConfigError("unknown segmentation architecture '" + arch + "'");
}

}  // namespace diversenet
