// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <algorithm>

#include "diversenet/metrics.hpp"
#include "diversenet/rng.hpp"
#include "oracles.hpp"

using namespace diversenet;

namespace {

ClassMap random_map(std::int64_t h, std::int64_t w, std::int64_t classes, Rng& rng,
                    double ignore_prob = 0.0) {
  ClassMap m{Tensor<std::int32_t>({1, h, w})};
  for (std::int64_t i = 0; i < m.labels.numel(); ++i) {
    if (ignore_prob > 0.0 && rng.next_bernoulli(ignore_prob)) {
      m.labels[i] = kIgnoreLabel;
    } else {
      m.labels[i] = static_cast<std::int32_t>(rng.next_below(classes));
    }
  }
  return m;
}

}  // namespace

TEST_CASE("perfect prediction gives a diagonal matrix and unit metrics") {
  Rng rng(1);
  ClassMap gt = random_map(8, 8, 3, rng);
  ConfusionMatrix cm(3);
  cm.accumulate(gt, gt);
  for (std::int64_t g = 0; g < 3; ++g)
    for (std::int64_t p = 0; p < 3; ++p)
      if (g != p) CHECK(cm.at(g, p) == 0);
  MetricReport r = derive_metrics(cm);
  CHECK(r.oa == 1.0);
  CHECK(r.miou.value() == 1.0);
  CHECK(r.macro_f1.value() == 1.0);
}

TEST_CASE("hand-counted confusion example") {
  // gt = [0,0,1,1], pred = [0,1,1,1]
  ClassMap gt{Tensor<std::int32_t>({1, 2, 2}, {0, 0, 1, 1})};
  ClassMap pred{Tensor<std::int32_t>({1, 2, 2}, {0, 1, 1, 1})};
  ConfusionMatrix cm(2);
  cm.accumulate(pred, gt);
  CHECK(cm.at(0, 0) == 1);
  CHECK(cm.at(0, 1) == 1);
  CHECK(cm.at(1, 0) == 0);
  CHECK(cm.at(1, 1) == 2);

  MetricReport r = derive_metrics(cm);
  CHECK_THAT(r.per_class[0].ua.value(), Catch::Matchers::WithinAbs(1.0, 1e-12));
  CHECK_THAT(r.per_class[0].pa.value(), Catch::Matchers::WithinAbs(0.5, 1e-12));
  CHECK_THAT(r.per_class[0].iou.value(), Catch::Matchers::WithinAbs(0.5, 1e-12));
  CHECK_THAT(r.per_class[0].f1.value(), Catch::Matchers::WithinAbs(2.0 / 3.0, 1e-12));
  CHECK_THAT(r.per_class[1].ua.value(), Catch::Matchers::WithinAbs(2.0 / 3.0, 1e-12));
  CHECK_THAT(r.per_class[1].pa.value(), Catch::Matchers::WithinAbs(1.0, 1e-12));
  CHECK_THAT(r.per_class[1].iou.value(), Catch::Matchers::WithinAbs(2.0 / 3.0, 1e-12));
  CHECK_THAT(r.per_class[1].f1.value(), Catch::Matchers::WithinAbs(0.8, 1e-12));
  CHECK_THAT(r.oa, Catch::Matchers::WithinAbs(0.75, 1e-12));
  CHECK_THAT(r.miou.value(), Catch::Matchers::WithinAbs((0.5 + 2.0 / 3.0) / 2.0, 1e-9));
}

TEST_CASE("accumulation is additive over batches") {
  Rng rng(2);
  ClassMap gt = random_map(6, 6, 4, rng);
  ClassMap pred = random_map(6, 6, 4, rng);
  ConfusionMatrix whole(4);
  whole.accumulate(pred, gt);

  // split rows into two halves, accumulate separately, then merge
  auto top = [&](const ClassMap& m) {
    ClassMap h{Tensor<std::int32_t>({1, 3, 6})};
    std::copy(m.labels.data(), m.labels.data() + 18, h.labels.data());
    return h;
  };
  auto bottom = [&](const ClassMap& m) {
    ClassMap h{Tensor<std::int32_t>({1, 3, 6})};
    std::copy(m.labels.data() + 18, m.labels.data() + 36, h.labels.data());
    return h;
  };
  ConfusionMatrix part(4);
  part.accumulate(top(pred), top(gt));
  ConfusionMatrix part2(4);
  part2.accumulate(bottom(pred), bottom(gt));
  part.merge(part2);
  for (std::int64_t g = 0; g < 4; ++g)
    for (std::int64_t p = 0; p < 4; ++p) CHECK(part.at(g, p) == whole.at(g, p));
}

TEST_CASE("metrics match the naive double-loop oracle on random pairs") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::int64_t classes = 2 + static_cast<std::int64_t>(rng.next_below(5));
    const std::int64_t h = 1 + static_cast<std::int64_t>(rng.next_below(32));
    const std::int64_t w = 1 + static_cast<std::int64_t>(rng.next_below(32));
    ClassMap gt = random_map(h, w, classes, rng, trial % 3 == 0 ? 0.2 : 0.0);
    ClassMap pred = random_map(h, w, classes, rng);
    bool any_counted = false;
    for (std::int64_t i = 0; i < gt.labels.numel(); ++i)
      if (gt.labels[i] != kIgnoreLabel) any_counted = true;
    if (!any_counted) continue;

    ConfusionMatrix cm(classes);
    cm.accumulate(pred, gt);
    auto ref = oracle::naive_metrics(pred, gt, classes);
    for (std::int64_t g = 0; g < classes; ++g)
      for (std::int64_t p = 0; p < classes; ++p)
        REQUIRE(cm.at(g, p) ==
                ref.counts[static_cast<std::size_t>(g)][static_cast<std::size_t>(p)]);

    MetricReport r = derive_metrics(cm);
    REQUIRE_THAT(r.oa, Catch::Matchers::WithinAbs(ref.oa, 1e-12));
    auto match = [&](const std::optional<double>& a, const std::optional<double>& b) {
      REQUIRE(a.has_value() == b.has_value());
      if (a) REQUIRE_THAT(*a, Catch::Matchers::WithinAbs(*b, 1e-12));
    };
    match(r.miou, ref.miou);
    match(r.macro_ua, ref.macro_ua);
    match(r.macro_pa, ref.macro_pa);
    match(r.macro_f1, ref.macro_f1);
    for (std::int64_t c = 0; c < classes; ++c) {
      match(r.per_class[static_cast<std::size_t>(c)].ua, ref.ua[static_cast<std::size_t>(c)]);
      match(r.per_class[static_cast<std::size_t>(c)].pa, ref.pa[static_cast<std::size_t>(c)]);
      match(r.per_class[static_cast<std::size_t>(c)].iou, ref.iou[static_cast<std::size_t>(c)]);
      match(r.per_class[static_cast<std::size_t>(c)].f1, ref.f1[static_cast<std::size_t>(c)]);
    }
  }
}

TEST_CASE("absent class is flagged undefined and excluded from macro means") {
  // class 2 never appears in gt or pred
  ClassMap gt{Tensor<std::int32_t>({1, 1, 4}, {0, 0, 1, 1})};
  ClassMap pred{Tensor<std::int32_t>({1, 1, 4}, {0, 1, 1, 1})};
  ConfusionMatrix cm(3);
  cm.accumulate(pred, gt);
  MetricReport r = derive_metrics(cm);
  CHECK_FALSE(r.per_class[2].ua.has_value());
  CHECK_FALSE(r.per_class[2].pa.has_value());
  CHECK_FALSE(r.per_class[2].iou.has_value());
  CHECK_FALSE(r.per_class[2].f1.has_value());
  CHECK_THAT(r.miou.value(), Catch::Matchers::WithinAbs((0.5 + 2.0 / 3.0) / 2.0, 1e-9));
}

TEST_CASE("class relabeling permutes per-class metrics, oa and miou unchanged") {
  Rng rng(4);
  const std::int64_t classes = 4;
  ClassMap gt = random_map(16, 16, classes, rng);
  ClassMap pred = random_map(16, 16, classes, rng);
  ConfusionMatrix cm(classes);
  cm.accumulate(pred, gt);
  MetricReport r = derive_metrics(cm);

  const std::int32_t perm[4] = {2, 0, 3, 1};
  auto relabel = [&](const ClassMap& m) {
    ClassMap out{Tensor<std::int32_t>(m.labels.dims())};
    for (std::int64_t i = 0; i < m.labels.numel(); ++i) out.labels[i] = perm[m.labels[i]];
    return out;
  };
  ConfusionMatrix cm2(classes);
  cm2.accumulate(relabel(pred), relabel(gt));
  MetricReport r2 = derive_metrics(cm2);
  CHECK_THAT(r2.oa, Catch::Matchers::WithinAbs(r.oa, 1e-12));
  CHECK_THAT(r2.miou.value(), Catch::Matchers::WithinAbs(r.miou.value(), 1e-12));
  for (std::int64_t c = 0; c < classes; ++c) {
    const auto& a = r.per_class[static_cast<std::size_t>(c)];
    const auto& b = r2.per_class[static_cast<std::size_t>(perm[c])];
    REQUIRE(a.iou.has_value() == b.iou.has_value());
    if (a.iou) CHECK_THAT(*a.iou, Catch::Matchers::WithinAbs(*b.iou, 1e-12));
  }
}

TEST_CASE("f1 is consistent with the iou transform") {
  Rng rng(5);
  ClassMap gt = random_map(12, 12, 3, rng);
  ClassMap pred = random_map(12, 12, 3, rng);
  ConfusionMatrix cm(3);
  cm.accumulate(pred, gt);
  MetricReport r = derive_metrics(cm);
  for (const auto& c : r.per_class) {
    if (!c.iou) continue;
    CHECK_THAT(*c.f1, Catch::Matchers::WithinAbs(2.0 * *c.iou / (1.0 + *c.iou), 1e-12));
    if (c.ua && c.pa && (*c.ua + *c.pa) > 0)
      CHECK_THAT(*c.f1,
                 Catch::Matchers::WithinAbs(2.0 * *c.pa * *c.ua / (*c.pa + *c.ua), 1e-12));
  }
}

TEST_CASE("error paths") {
  ConfusionMatrix cm(2);
  CHECK_THROWS_AS(derive_metrics(cm), DegenerateError);
  ClassMap gt{Tensor<std::int32_t>({1, 1, 2}, {0, 1})};
  ClassMap bad{Tensor<std::int32_t>({1, 1, 2}, {0, 5})};
  CHECK_THROWS_AS(cm.accumulate(bad, gt), ArgError);
  ClassMap ignore_pred{Tensor<std::int32_t>({1, 1, 2}, {0, kIgnoreLabel})};
  CHECK_THROWS_AS(cm.accumulate(ignore_pred, gt), ArgError);
  CHECK_THROWS_AS(ConfusionMatrix(1), ArgError);
}
