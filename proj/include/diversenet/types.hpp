// SPDX-License-Identifier: Apache-2.0
//
// Domain carriers shared across the library.
#pragma once

#include <cmath>
#include <cstdint>

#include "diversenet/tensor.hpp"

namespace diversenet {

/// Label value marking pixels excluded from supervision and scoring.
/// Permitted in ground truth only; pseudo labels are always dense.
inline constexpr std::int32_t kIgnoreLabel = -1;

/// Batch of input images, [B, H, W, bands].
template <typename T>
struct ImageBatch {
  Tensor<T> pixels;

  std::int64_t batch() const { return pixels.dim(0); }
  std::int64_t height() const { return pixels.dim(1); }
  std::int64_t width() const { return pixels.dim(2); }
  std::int64_t bands() const { return pixels.dim(3); }
};

/// Per-pixel class scores from one head or network, [B, H, W, C].
/// `normalized` distinguishes softmax probabilities from raw logits.
template <typename T>
struct ProbMap {
  Tensor<T> scores;
  bool normalized = false;

  std::int64_t batch() const { return scores.dim(0); }
  std::int64_t height() const { return scores.dim(1); }
  std::int64_t width() const { return scores.dim(2); }
  std::int64_t classes() const { return scores.dim(3); }
};

/// Per-pixel integer labels, [B, H, W]. Values in [0, C) or kIgnoreLabel.
struct ClassMap {
  Tensor<std::int32_t> labels;

  std::int64_t batch() const { return labels.dim(0); }
  std::int64_t height() const { return labels.dim(1); }
  std::int64_t width() const { return labels.dim(2); }

  bool contains_ignore() const {
    for (std::int64_t i = 0; i < labels.numel(); ++i)
      if (labels[i] == kIgnoreLabel) return true;
    return false;
  }
};

template <typename T>
bool all_finite(const Tensor<T>& t) {
  for (std::int64_t i = 0; i < t.numel(); ++i)
    if (!std::isfinite(static_cast<double>(t[i]))) return false;
  return true;
}

}  // namespace diversenet
