// SPDX-License-Identifier: Apache-2.0
//
// Perturbation mechanisms that diversify head decisions: per-iteration random
// freezing of head parameters, and additive Gaussian input noise for the
// input-perturbation baseline. (Per-head channel dropout lives with the
// model; its masks are drawn by the trainer.)
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "diversenet/errors.hpp"
#include "diversenet/rng.hpp"
#include "diversenet/types.hpp"

namespace diversenet {

/// Head indices excluded from the parameter update this iteration.
struct FreezeMask {
  std::vector<std::int64_t> frozen;  // sorted, distinct

  bool contains(std::int64_t j) const {
    return std::binary_search(frozen.begin(), frozen.end(), j);
  }
  bool empty() const { return frozen.empty(); }
};

/// floor(L/2) distinct head indices, uniform without replacement, so every
/// head has the same marginal chance of freezing.
inline FreezeMask select_freeze_set(std::int64_t head_count, Rng& rng) {
  if (head_count < 2) throw ConfigError("select_freeze_set: need at least 2 heads");
  auto picks = rng.sample_without_replacement(static_cast<std::size_t>(head_count),
                                              static_cast<std::size_t>(head_count / 2));
  FreezeMask mask;
  mask.frozen.assign(picks.begin(), picks.end());
  std::sort(mask.frozen.begin(), mask.frozen.end());
  return mask;
}

/// Explicit-count override (0..L heads, including all of them).
inline FreezeMask select_freeze_set(std::int64_t head_count, std::int64_t freeze_count, Rng& rng) {
  if (head_count < 1) throw ConfigError("select_freeze_set: need at least 1 head");
  if (freeze_count < 0 || freeze_count > head_count)
    throw ConfigError("select_freeze_set: freeze count out of range");
  auto picks = rng.sample_without_replacement(static_cast<std::size_t>(head_count),
                                              static_cast<std::size_t>(freeze_count));
  FreezeMask mask;
  mask.frozen.assign(picks.begin(), picks.end());
  std::sort(mask.frozen.begin(), mask.frozen.end());
  return mask;
}

/// Tracks which heads are currently frozen. Frozen heads still run forward
/// and still pass gradient to the trunk; the optimizer consults this state
/// and skips their parameter updates.
class FreezeState {
public:
  explicit FreezeState(std::int64_t head_count = 0) : frozen_(head_count, false) {}

  std::int64_t head_count() const { return static_cast<std::int64_t>(frozen_.size()); }

  void freeze(const FreezeMask& mask) {
    for (auto j : mask.frozen) {
      if (j < 0 || j >= head_count())
        throw ArgError("FreezeState::freeze: head index out of range");
      frozen_[static_cast<std::size_t>(j)] = true;
    }
  }

  void unfreeze_all() { std::fill(frozen_.begin(), frozen_.end(), false); }

  bool is_frozen(std::int64_t j) const { return frozen_.at(static_cast<std::size_t>(j)); }

  bool any_frozen() const {
    return std::any_of(frozen_.begin(), frozen_.end(), [](bool f) { return f; });
  }

private:
  std::vector<bool> frozen_;
};

/// Runs `body` with the masked heads frozen and guarantees every head is
/// unfrozen afterwards, whether the body returns or throws.
template <typename Body>
auto with_frozen_heads(FreezeState& state, const FreezeMask& mask, Body&& body) {
  struct Unfreeze {
    FreezeState* s;
    ~Unfreeze() { s->unfreeze_all(); }
  };
  state.freeze(mask);
  Unfreeze guard{&state};
  return std::forward<Body>(body)();
}

/// Standard deviation of additive Gaussian input noise, in normalized pixel
/// units. Must be positive; a baseline that wants no noise disables the
/// perturbation instead of passing zero.
struct NoiseSpec {
  double sd = 0.01;
};

template <typename T>
ImageBatch<T> gaussian_perturb(const ImageBatch<T>& images, const NoiseSpec& noise, Rng& rng) {
  if (!(noise.sd > 0.0) || !std::isfinite(noise.sd))
    throw ConfigError("gaussian_perturb: sd must be positive and finite");
  ImageBatch<T> out{Tensor<T>(images.pixels.dims())};
  const T* src = images.pixels.data();
  T* dst = out.pixels.data();
  const std::int64_t n = images.pixels.numel();
  for (std::int64_t i = 0; i < n; ++i)
    dst[i] = src[i] + static_cast<T>(noise.sd * rng.next_normal());
  return out;
}

}  // namespace diversenet
