// SPDX-License-Identifier: Apache-2.0
//
// Cross-entropy loss stack for multi-head and multi-model training. Heads and
// networks emit logits; the fused log-softmax here keeps the evaluation
// stable. Reduction order is fixed: mean over counted pixels first, then over
// heads or networks.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "diversenet/errors.hpp"
#include "diversenet/fastmath.hpp"
#include "diversenet/tensor.hpp"
#include "diversenet/types.hpp"

namespace diversenet {

struct LossWeights {
  double lambda = 1.0;
};

namespace detail {

template <typename T>
void check_ce_shapes(const ProbMap<T>& pred, const ClassMap& target) {
  if (pred.batch() != target.batch() || pred.height() != target.height() ||
      pred.width() != target.width())
    throw ShapeError("pixel_ce: prediction " + shape_str(pred.scores.dims()) +
                     " does not match target " + shape_str(target.labels.dims()));
}

}  // namespace detail

/// Mean over non-ignored pixels of -log p(target). Accepts logits (fused
/// log-softmax) or already-normalized probabilities.
template <typename T>
double pixel_ce(const ProbMap<T>& pred, const ClassMap& target) {
  detail::check_ce_shapes(pred, target);
  const std::int64_t pixels = target.labels.numel();
  const std::int64_t c_n = pred.classes();
  const T* scores = pred.scores.data();
  double loss_sum = 0.0;
  std::int64_t counted = 0;
  for (std::int64_t p = 0; p < pixels; ++p) {
    const std::int32_t t = target.labels[p];
    if (t == kIgnoreLabel) continue;
    if (t < 0 || t >= c_n) throw ArgError("pixel_ce: target class out of range");
    const T* row = scores + p * c_n;
    if (pred.normalized) {
      loss_sum += -std::log(static_cast<double>(row[t]));
    } else {
      double mx = static_cast<double>(row[0]);
      for (std::int64_t c = 1; c < c_n; ++c) mx = std::max(mx, static_cast<double>(row[c]));
      double sum = 0.0;
      for (std::int64_t c = 0; c < c_n; ++c) sum += std::exp(static_cast<double>(row[c]) - mx);
      loss_sum += std::log(sum) - (static_cast<double>(row[t]) - mx);
    }
    ++counted;
  }
  if (counted == 0) throw DegenerateError("pixel_ce: every pixel is ignored");
  return loss_sum / static_cast<double>(counted);
}

/// Loss together with its logit gradient from one fused softmax pass. The
/// gradient is (softmax - onehot) / N on counted pixels, zero elsewhere,
/// premultiplied by `grad_scale`; the loss is unscaled. Per-pixel work runs
/// in the scalar type T and parallelizes over pixels; the loss reduction
/// stays in a fixed order.
template <typename T>
struct CeWithGrad {
  double loss = 0.0;
  Tensor<T> grad;
};

template <typename T>
CeWithGrad<T> pixel_ce_with_grad(const ProbMap<T>& pred, const ClassMap& target,
                                 double grad_scale = 1.0) {
  if (pred.normalized) throw ArgError("pixel_ce_with_grad: gradient path requires logits");
  detail::check_ce_shapes(pred, target);
  const std::int64_t pixels = target.labels.numel();
  const std::int64_t c_n = pred.classes();
  const std::int32_t* labels = target.labels.data();
  std::int64_t counted = 0;
  for (std::int64_t p = 0; p < pixels; ++p)
    if (labels[p] != kIgnoreLabel) ++counted;
  if (counted == 0) throw DegenerateError("pixel_ce_with_grad: every pixel is ignored");

  CeWithGrad<T> out;
  out.grad = Tensor<T>(pred.scores.dims(), T{0});
  std::vector<double> pixel_loss(static_cast<std::size_t>(pixels), 0.0);
  const T* scores = pred.scores.data();
  T* g = out.grad.data();
  const T inv = static_cast<T>(grad_scale / static_cast<double>(counted));
#pragma omp parallel for schedule(static)
  for (std::int64_t p = 0; p < pixels; ++p) {
    const std::int32_t t = labels[p];
    if (t == kIgnoreLabel) continue;
    const T* row = scores + p * c_n;
    T* grow = g + p * c_n;
    T mx = row[0];
    for (std::int64_t c = 1; c < c_n; ++c) mx = std::max(mx, row[c]);
    T sum = T{0};
    for (std::int64_t c = 0; c < c_n; ++c) {
      grow[c] = detail::softmax_exp(row[c] - mx);
      sum += grow[c];
    }
    pixel_loss[static_cast<std::size_t>(p)] =
        static_cast<double>(std::log(sum)) - static_cast<double>(row[t] - mx);
    const T norm = T{1} / sum;
    for (std::int64_t c = 0; c < c_n; ++c)
      grow[c] = (grow[c] * norm - (c == t ? T{1} : T{0})) * inv;
  }
  double loss_sum = 0.0;
  for (std::int64_t p = 0; p < pixels; ++p) loss_sum += pixel_loss[static_cast<std::size_t>(p)];
  out.loss = loss_sum / static_cast<double>(counted);
  return out;
}

/// Gradient-only convenience wrapper.
template <typename T>
Tensor<T> pixel_ce_grad(const ProbMap<T>& pred, const ClassMap& target, double scale = 1.0) {
  return pixel_ce_with_grad(pred, target, scale).grad;
}

/// Mean over heads of the per-head supervised cross-entropy.
template <typename T>
double supervised_multihead_loss(const std::vector<ProbMap<T>>& head_preds, const ClassMap& gt) {
  if (head_preds.empty()) throw ArgError("supervised_multihead_loss: no head predictions");
  double sum = 0.0;
  for (const auto& pred : head_preds) sum += pixel_ce(pred, gt);
  return sum / static_cast<double>(head_preds.size());
}

/// Cross-entropy of the randomly selected main head against the voted pseudo
/// label. The pseudo label is a constant: no gradient reaches the votes.
template <typename T>
double unsupervised_head_loss(const ProbMap<T>& main_pred, const ClassMap& pseudo) {
  if (pseudo.contains_ignore())
    throw ArgError("unsupervised_head_loss: pseudo labels must be dense");
  return pixel_ce(main_pred, pseudo);
}

inline double total_loss(double sup, double unsup, const LossWeights& w) {
  return sup + w.lambda * unsup;
}

/// Mean over exactly three networks of the supervised cross-entropy.
template <typename T>
double dm_supervised_loss(const std::vector<ProbMap<T>>& preds, const ClassMap& gt) {
  if (preds.size() != 3) throw ArgError("dm_supervised_loss: expected exactly 3 predictions");
  double sum = 0.0;
  for (const auto& pred : preds) sum += pixel_ce(pred, gt);
  return sum / 3.0;
}

/// One cross-supervision term per ordered network pair (m trains on n's
/// pseudo label).
struct CrossPairLoss {
  int pred_index;
  int pseudo_index;
  double value;
};

struct DmUnsupLoss {
  double value = 0.0;
  std::array<CrossPairLoss, 6> pairs{};
};

/// Average of the six ordered cross-pseudo losses between three networks.
template <typename T>
DmUnsupLoss dm_unsupervised_loss_detail(const std::vector<ProbMap<T>>& preds,
                                        const std::vector<ClassMap>& pseudos) {
  if (preds.size() != 3 || pseudos.size() != 3)
    throw ArgError("dm_unsupervised_loss: expected exactly 3 predictions and 3 pseudo labels");
  for (const auto& ps : pseudos)
    if (ps.contains_ignore()) throw ArgError("dm_unsupervised_loss: pseudo labels must be dense");
  DmUnsupLoss out;
  int slot = 0;
  double sum = 0.0;
  for (int m = 0; m < 3; ++m)
    for (int n = 0; n < 3; ++n) {
      if (m == n) continue;
      const double term = pixel_ce(preds[static_cast<std::size_t>(m)],
                                   pseudos[static_cast<std::size_t>(n)]);
      out.pairs[static_cast<std::size_t>(slot++)] = {m, n, term};
      sum += term;
    }
  out.value = sum / 6.0;
  return out;
}

template <typename T>
double dm_unsupervised_loss(const std::vector<ProbMap<T>>& preds,
                            const std::vector<ClassMap>& pseudos) {
  return dm_unsupervised_loss_detail(preds, pseudos).value;
}

}  // namespace diversenet
