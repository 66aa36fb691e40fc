// SPDX-License-Identifier: Apache-2.0
//
// Pseudo-label creation by dual voting: the mean of all head score maps casts
// one weighted ballot, each head's own argmax casts a unit ballot, and the
// per-pixel winner becomes the training target for the unlabelled batch.
#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "diversenet/errors.hpp"
#include "diversenet/fastmath.hpp"
#include "diversenet/tensor.hpp"
#include "diversenet/types.hpp"

namespace diversenet {

/// Weight of the mean-vote ballot. In fixed mode phi is constant over
/// training; the learnable surrogate updates it through an auxiliary loss
/// (see phi_surrogate_grad).
struct VoteWeight {
  double phi = 1.0;
  enum class Mode { kFixed, kLearnableSurrogate } mode = Mode::kFixed;
};

/// Per-pixel argmax over the class dimension; ties resolve to the lowest
/// class index.
template <typename T>
ClassMap argmax_map(const ProbMap<T>& probs) {
  const std::int64_t pixels = probs.batch() * probs.height() * probs.width();
  const std::int64_t c_n = probs.classes();
  ClassMap out{Tensor<std::int32_t>({probs.batch(), probs.height(), probs.width()})};
  const T* s = probs.scores.data();
  for (std::int64_t p = 0; p < pixels; ++p) {
    const T* row = s + p * c_n;
    std::int32_t best = 0;
    for (std::int64_t c = 1; c < c_n; ++c)
      if (row[c] > row[best]) best = static_cast<std::int32_t>(c);
    out.labels[p] = best;
  }
  return out;
}

/// Numerically stable per-pixel softmax over the class dimension.
template <typename T>
ProbMap<T> softmax_map(const ProbMap<T>& logits) {
  if (logits.normalized) return logits;
  ProbMap<T> out{Tensor<T>(logits.scores.dims()), true};
  const std::int64_t pixels = logits.batch() * logits.height() * logits.width();
  const std::int64_t c_n = logits.classes();
  const T* src = logits.scores.data();
  T* dst = out.scores.data();
#pragma omp parallel for schedule(static)
  for (std::int64_t p = 0; p < pixels; ++p) {
    const T* row = src + p * c_n;
    T* orow = dst + p * c_n;
    T mx = row[0];
    for (std::int64_t c = 1; c < c_n; ++c) mx = std::max(mx, row[c]);
    T sum = T{0};
    for (std::int64_t c = 0; c < c_n; ++c) {
      orow[c] = detail::softmax_exp(row[c] - mx);
      sum += orow[c];
    }
    const T inv = T{1} / sum;
    for (std::int64_t c = 0; c < c_n; ++c) orow[c] *= inv;
  }
  return out;
}

/// Arithmetic mean of the head score maps and its argmax label. Because
/// argmax is invariant to positive scaling, the label equals the argmax of
/// the per-pixel sum as well.
template <typename T>
std::pair<ProbMap<T>, ClassMap> mean_vote(const std::vector<ProbMap<T>>& head_probs) {
  if (head_probs.empty()) throw ArgError("mean_vote: need at least one score map");
  for (const auto& m : head_probs)
    require_same_shape(m.scores, head_probs.front().scores, "mean_vote");

  ProbMap<T> mean{Tensor<T>(head_probs.front().scores.dims(), T{0}),
                  head_probs.front().normalized};
  const std::int64_t n = mean.scores.numel();
  for (const auto& m : head_probs) {
    const T* src = m.scores.data();
    T* dst = mean.scores.data();
    for (std::int64_t i = 0; i < n; ++i) dst[i] += src[i];
  }
  const T inv = static_cast<T>(1.0 / static_cast<double>(head_probs.size()));
  T* dst = mean.scores.data();
  for (std::int64_t i = 0; i < n; ++i) dst[i] *= inv;
  ClassMap label = argmax_map(mean);
  return {std::move(mean), std::move(label)};
}

/// Per-pixel, per-class vote accumulator: unit votes from the individual
/// labels plus a phi-weighted vote from the mean label. The per-pixel sum is
/// always L + phi.
inline Tensor<double> vote_tally(const std::vector<ClassMap>& individual_labels,
                                 const ClassMap& mean_label, double phi,
                                 std::int64_t class_count) {
  Tensor<double> tally({mean_label.batch(), mean_label.height(), mean_label.width(), class_count},
                       0.0);
  const std::int64_t pixels = mean_label.labels.numel();
  for (const auto& lm : individual_labels) {
    for (std::int64_t p = 0; p < pixels; ++p)
      tally[p * class_count + lm.labels[p]] += 1.0;
  }
  for (std::int64_t p = 0; p < pixels; ++p)
    tally[p * class_count + mean_label.labels[p]] += phi;
  return tally;
}

/// Weighted majority vote. Ties in the top tally resolve in favor of the
/// mean-vote class when it is among the leaders, otherwise to the lowest
/// class index.
inline ClassMap max_vote(const std::vector<ClassMap>& individual_labels,
                         const ClassMap& mean_label, const VoteWeight& weight,
                         std::int64_t class_count = 0) {
  if (individual_labels.empty()) throw ArgError("max_vote: need at least one label map");
  if (!(weight.phi >= 0.0) || !std::isfinite(weight.phi))
    throw ArgError("max_vote: phi must be finite and nonnegative");
  std::int32_t max_label = 0;
  for (const auto& lm : individual_labels) {
    require_same_shape(lm.labels, mean_label.labels, "max_vote");
    if (lm.contains_ignore()) throw ArgError("max_vote: individual labels contain ignore pixels");
    for (std::int64_t i = 0; i < lm.labels.numel(); ++i)
      max_label = std::max(max_label, lm.labels[i]);
  }
  if (mean_label.contains_ignore()) throw ArgError("max_vote: mean label contains ignore pixels");
  for (std::int64_t i = 0; i < mean_label.labels.numel(); ++i)
    max_label = std::max(max_label, mean_label.labels[i]);
  const std::int64_t c_n = class_count > 0 ? class_count : max_label + 1;
  if (max_label >= c_n) throw ArgError("max_vote: label exceeds class count");

  Tensor<double> tally = vote_tally(individual_labels, mean_label, weight.phi, c_n);
  ClassMap out{Tensor<std::int32_t>(mean_label.labels.dims())};
  const std::int64_t pixels = mean_label.labels.numel();
  for (std::int64_t p = 0; p < pixels; ++p) {
    const double* row = tally.data() + p * c_n;
    std::int32_t best = 0;
    for (std::int64_t c = 1; c < c_n; ++c)
      if (row[c] > row[best]) best = static_cast<std::int32_t>(c);
    const std::int32_t mean_c = mean_label.labels[p];
    out.labels[p] = (row[mean_c] == row[best]) ? mean_c : best;
  }
  return out;
}

/// Full voting module: per-head argmax labels, mean voting, then weighted max
/// voting. Inputs that are still logits are softmaxed first. The returned
/// label map is a constant with respect to the network outputs; no gradient
/// flows through it.
///
/// The hot path below fuses the whole pipeline into one per-pixel pass with
/// the same operation order as the component functions, so the result is
/// identical to composing softmax_map / argmax_map / mean_vote / max_vote.
template <typename T>
std::pair<ClassMap, ProbMap<T>> make_pseudo_label(const std::vector<ProbMap<T>>& head_probs,
                                                  const VoteWeight& weight) {
  if (head_probs.size() < 2) throw ArgError("make_pseudo_label: need at least two head maps");
  if (!(weight.phi >= 0.0) || !std::isfinite(weight.phi))
    throw ArgError("make_pseudo_label: phi must be finite and nonnegative");
  for (const auto& m : head_probs)
    require_same_shape(m.scores, head_probs.front().scores, "make_pseudo_label");

  constexpr std::int64_t kMaxFusedClasses = 16;
  const std::int64_t c_n = head_probs.front().classes();
  if (c_n > kMaxFusedClasses) {
    std::vector<ProbMap<T>> probs;
    probs.reserve(head_probs.size());
    for (const auto& h : head_probs) probs.push_back(softmax_map(h));
    std::vector<ClassMap> individual;
    individual.reserve(probs.size());
    for (const auto& p : probs) individual.push_back(argmax_map(p));
    auto [mean_prob, mean_label] = mean_vote(probs);
    ClassMap final_label = max_vote(individual, mean_label, weight, c_n);
    return {std::move(final_label), std::move(mean_prob)};
  }

  const auto heads = static_cast<std::int64_t>(head_probs.size());
  const std::int64_t pixels =
      head_probs.front().batch() * head_probs.front().height() * head_probs.front().width();
  ProbMap<T> mean_prob{Tensor<T>(head_probs.front().scores.dims()), true};
  ClassMap final_label{Tensor<std::int32_t>({head_probs.front().batch(),
                                             head_probs.front().height(),
                                             head_probs.front().width()})};
  std::vector<const T*> scores(head_probs.size());
  std::vector<bool> normalized(head_probs.size());
  for (std::size_t j = 0; j < head_probs.size(); ++j) {
    scores[j] = head_probs[j].scores.data();
    normalized[j] = head_probs[j].normalized;
  }
  T* mean_out = mean_prob.scores.data();
  std::int32_t* final_out = final_label.labels.data();
  const T inv_heads = static_cast<T>(1.0 / static_cast<double>(heads));

#pragma omp parallel for schedule(static)
  for (std::int64_t p = 0; p < pixels; ++p) {
    T acc[kMaxFusedClasses] = {};
    double tally[kMaxFusedClasses] = {};
    T prob[kMaxFusedClasses];
    for (std::int64_t j = 0; j < heads; ++j) {
      const T* row = scores[static_cast<std::size_t>(j)] + p * c_n;
      if (normalized[static_cast<std::size_t>(j)]) {
        for (std::int64_t c = 0; c < c_n; ++c) prob[c] = row[c];
      } else {
        T mx = row[0];
        for (std::int64_t c = 1; c < c_n; ++c) mx = std::max(mx, row[c]);
        T sum = T{0};
        for (std::int64_t c = 0; c < c_n; ++c) {
          prob[c] = detail::softmax_exp(row[c] - mx);
          sum += prob[c];
        }
        const T norm = T{1} / sum;
        for (std::int64_t c = 0; c < c_n; ++c) prob[c] *= norm;
      }
      std::int64_t head_best = 0;
      for (std::int64_t c = 1; c < c_n; ++c)
        if (prob[c] > prob[head_best]) head_best = c;
      tally[head_best] += 1.0;
      for (std::int64_t c = 0; c < c_n; ++c) acc[c] += prob[c];
    }
    T* mean_row = mean_out + p * c_n;
    std::int64_t mean_best = 0;
    for (std::int64_t c = 0; c < c_n; ++c) {
      mean_row[c] = acc[c] * inv_heads;
      if (c > 0 && mean_row[c] > mean_row[mean_best]) mean_best = c;
    }
    tally[mean_best] += weight.phi;
    std::int64_t best = 0;
    for (std::int64_t c = 1; c < c_n; ++c)
      if (tally[c] > tally[best]) best = c;
    final_out[p] = static_cast<std::int32_t>(tally[mean_best] == tally[best] ? mean_best : best);
  }
  return {std::move(final_label), std::move(mean_prob)};
}

/// Gradient of the auxiliary cross-entropy between the phi-weighted vote
/// mixture (hard individual ballots plus phi times the mean probabilities,
/// normalized by L + phi) and the final pseudo label, taken with respect to
/// phi. Used only in learnable-surrogate mode.
template <typename T>
double phi_surrogate_grad(const std::vector<ClassMap>& individual_labels,
                          const ProbMap<T>& mean_prob, const ClassMap& final_label, double phi) {
  const std::int64_t pixels = final_label.labels.numel();
  const std::int64_t c_n = mean_prob.classes();
  const auto head_count = static_cast<double>(individual_labels.size());
  double grad_sum = 0.0;
  for (std::int64_t p = 0; p < pixels; ++p) {
    const std::int32_t f = final_label.labels[p];
    double hard_votes = 0.0;
    for (const auto& lm : individual_labels)
      if (lm.labels[p] == f) hard_votes += 1.0;
    const double mean_mass = static_cast<double>(mean_prob.scores[p * c_n + f]);
    const double mix = hard_votes + phi * mean_mass;
    if (mix <= 0.0) continue;
    // d/dphi of -log((hard + phi*mean) / (L + phi))
    grad_sum += 1.0 / (head_count + phi) - mean_mass / mix;
  }
  return grad_sum / static_cast<double>(pixels);
}

}  // namespace diversenet
