// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "diversenet/trainers.hpp"

using namespace diversenet;

namespace {

ModelSpec tiny_spec(std::int64_t heads, std::int64_t classes = 3) {
  ModelSpec s;
  s.head_count = heads;
  s.class_count = classes;
  s.input_bands = 3;
  s.trunk = "desk-small";
  return s;
}

TrainSettings quick_settings(double lambda = 1.0) {
  TrainSettings t;
  t.loss.lambda = lambda;
  t.base_lr = 0.05;
  return t;
}

struct TinyBatch {
  ImageBatch<float> lab_x{Tensor<float>({2, 16, 16, 3})};
  ClassMap lab_y{Tensor<std::int32_t>({2, 16, 16})};
  ImageBatch<float> unlab_x{Tensor<float>({2, 16, 16, 3})};
};

TinyBatch make_batch(std::uint64_t seed, std::int64_t classes = 3) {
  TinyBatch b;
  Rng rng(seed);
  for (std::int64_t i = 0; i < b.lab_x.pixels.numel(); ++i)
    b.lab_x.pixels[i] = static_cast<float>(rng.next_normal());
  for (std::int64_t i = 0; i < b.lab_y.labels.numel(); ++i)
    b.lab_y.labels[i] = static_cast<std::int32_t>(rng.next_below(classes));
  for (std::int64_t i = 0; i < b.unlab_x.pixels.numel(); ++i)
    b.unlab_x.pixels[i] = static_cast<float>(rng.next_normal());
  return b;
}

std::vector<Tensor<float>> snapshot(std::vector<ParamRef<float>> params) {
  std::vector<Tensor<float>> out;
  out.reserve(params.size());
  for (auto& p : params) out.push_back(*p.value);
  return out;
}

}  // namespace

TEST_CASE("cyclic pairs walk the labelled set in cycles") {
  PairingStream s = cyclic_pairs(3, 7);
  REQUIRE(s.pairs.size() == 7);
  std::vector<std::int64_t> labelled;
  for (auto [lab, unlab] : s.pairs) labelled.push_back(lab);
  CHECK(labelled == std::vector<std::int64_t>{0, 1, 2, 0, 1, 2, 0});
  for (std::size_t k = 0; k < s.pairs.size(); ++k)
    CHECK(s.pairs[k].second == static_cast<std::int64_t>(k));

  // M == N: identity pairing
  PairingStream eq = cyclic_pairs(5, 5);
  for (auto [lab, unlab] : eq.pairs) CHECK(lab == unlab);

  // pigeonhole: each labelled index appears floor or ceil of N/M times
  PairingStream p = cyclic_pairs(4, 10);
  std::vector<int> count(4, 0);
  for (auto [lab, unlab] : p.pairs) ++count[static_cast<std::size_t>(lab)];
  for (auto c : count) CHECK((c == 2 || c == 3));

  CHECK_THROWS_AS(cyclic_pairs(0, 5), ConfigError);
}

TEST_CASE("polynomial schedule hits its anchor values and decreases") {
  OptimState st;
  st.base_lr = 0.01;
  st.power = 0.9;
  st.max_iter = 1000;
  st.iter = 0;
  CHECK(poly_lr(st) == 0.01);
  st.iter = 500;
  CHECK_THAT(poly_lr(st), Catch::Matchers::WithinAbs(0.0053589, 1e-7));
  st.iter = 1000;
  CHECK(poly_lr(st) == 0.0);

  double prev = 1e9;
  for (std::int64_t i = 0; i <= 1000; i += 100) {
    st.iter = i;
    const double lr = poly_lr(st);
    CHECK(lr < prev);
    prev = lr;
  }
  st.iter = 1001;
  CHECK_THROWS_AS(poly_lr(st), ConfigError);
  st.iter = 0;
  st.max_iter = 0;
  CHECK_THROWS_AS(poly_lr(st), ConfigError);
}

TEST_CASE("dynamic freezing leaves frozen heads bitwise untouched") {
  DiverseHeadTrainer<float> trainer(tiny_spec(4), DiverseHeadMode::kDynamicFreeze,
                                    quick_settings(), 11);
  trainer.optim_state().max_iter = 100;
  for (int step = 0; step < 10; ++step) {
    TinyBatch b = make_batch(100 + static_cast<std::uint64_t>(step));
    std::vector<std::vector<Tensor<float>>> before;
    for (std::int64_t j = 0; j < 4; ++j)
      before.push_back(snapshot(trainer.net().head_params(j)));

    StepReport rep = trainer.step(b.lab_x, b.lab_y, b.unlab_x);
    REQUIRE(rep.freeze_mask.size() == 2);
    REQUIRE(rep.main_head >= 0);
    REQUIRE(rep.main_head < 4);
    CHECK_FALSE(trainer.freeze_state().any_frozen());

    bool any_unfrozen_changed = false;
    for (std::int64_t j = 0; j < 4; ++j) {
      auto after = snapshot(trainer.net().head_params(j));
      const bool frozen =
          std::find(rep.freeze_mask.begin(), rep.freeze_mask.end(), j) != rep.freeze_mask.end();
      bool changed = false;
      for (std::size_t i = 0; i < after.size(); ++i)
        if (!(after[i] == before[static_cast<std::size_t>(j)][i])) changed = true;
      if (frozen) {
        REQUIRE_FALSE(changed);
      } else if (changed) {
        any_unfrozen_changed = true;
      }
    }
    CHECK(any_unfrozen_changed);
  }
}

TEST_CASE("an all-heads freeze override still lets the trunk learn") {
  TrainSettings settings = quick_settings();
  settings.freeze_count = 4;
  DiverseHeadTrainer<float> trainer(tiny_spec(4), DiverseHeadMode::kDynamicFreeze, settings, 3);
  trainer.optim_state().max_iter = 10;
  TinyBatch b = make_batch(7);

  std::vector<std::vector<Tensor<float>>> heads_before;
  for (std::int64_t j = 0; j < 4; ++j)
    heads_before.push_back(snapshot(trainer.net().head_params(j)));
  auto trunk_before = snapshot(trainer.net().trunk_params());
  StepReport rep = trainer.step(b.lab_x, b.lab_y, b.unlab_x);
  REQUIRE(rep.freeze_mask.size() == 4);

  for (std::int64_t j = 0; j < 4; ++j) {
    auto after = snapshot(trainer.net().head_params(j));
    for (std::size_t i = 0; i < after.size(); ++i)
      REQUIRE(after[i] == heads_before[static_cast<std::size_t>(j)][i]);
  }
  auto trunk_after = snapshot(trainer.net().trunk_params());
  bool trunk_changed = false;
  for (std::size_t i = 0; i < trunk_after.size(); ++i)
    if (!(trunk_after[i] == trunk_before[i])) trunk_changed = true;
  CHECK(trunk_changed);
}

TEST_CASE("lambda zero reduces dynamic freezing to supervised training with skips") {
  const std::uint64_t master = 21;
  DiverseHeadTrainer<float> trainer(tiny_spec(3), DiverseHeadMode::kDynamicFreeze,
                                    quick_settings(0.0), master);
  trainer.optim_state().max_iter = 50;

  // independent replica of the supervised-only path, sharing only seeds
  SeedFan fan(master);
  ModelSpec spec = tiny_spec(3);
  spec.seed = fan.stream("init");
  MultiHeadNet<float> replica(spec);
  SgdOptimizer<float> opt(replica.params(), 0.9, 1e-4);
  FreezeState freeze(3);
  std::vector<std::int64_t> owners(replica.trunk_params().size(), -1);
  for (std::int64_t j = 0; j < 3; ++j)
    owners.insert(owners.end(), replica.head_params(j).size(), j);
  OptimState ostate;
  ostate.base_lr = 0.05;
  ostate.max_iter = 50;

  for (int step = 0; step < 5; ++step) {
    TinyBatch b = make_batch(300 + static_cast<std::uint64_t>(step));
    trainer.step(b.lab_x, b.lab_y, b.unlab_x);

    const double lr = poly_lr(ostate);
    replica.zero_grad();
    Rng freeze_rng = fan.rng("freeze", static_cast<std::uint64_t>(ostate.iter));
    FreezeMask mask = select_freeze_set(3, freeze_rng);
    Rng unused(0);
    auto preds = replica.forward(b.lab_x, false, unused);
    std::vector<Tensor<float>> grads;
    for (auto& p : preds) grads.push_back(pixel_ce_grad(p, b.lab_y, 1.0 / 3.0));
    replica.backward(grads);
    freeze.freeze(mask);
    std::vector<bool> skip(owners.size());
    for (std::size_t i = 0; i < owners.size(); ++i)
      skip[i] = owners[i] >= 0 && freeze.is_frozen(owners[i]);
    opt.step(lr, &skip);
    freeze.unfreeze_all();
    ++ostate.iter;

    auto a = trainer.net().params();
    auto r = replica.params();
    for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(*a[i].value == *r[i].value);
  }
}

TEST_CASE("identical seeds give bitwise identical step reports") {
  DiverseHeadTrainer<float> a(tiny_spec(3), DiverseHeadMode::kDynamicFreeze, quick_settings(), 5);
  DiverseHeadTrainer<float> b(tiny_spec(3), DiverseHeadMode::kDynamicFreeze, quick_settings(), 5);
  a.optim_state().max_iter = 200;
  b.optim_state().max_iter = 200;
  for (int step = 0; step < 100; ++step) {
    TinyBatch batch = make_batch(1000 + static_cast<std::uint64_t>(step));
    StepReport ra = a.step(batch.lab_x, batch.lab_y, batch.unlab_x);
    StepReport rb = b.step(batch.lab_x, batch.lab_y, batch.unlab_x);
    REQUIRE(ra == rb);
  }
  auto pa = a.net().params();
  auto pb = b.net().params();
  for (std::size_t i = 0; i < pa.size(); ++i) REQUIRE(*pa[i].value == *pb[i].value);
}

TEST_CASE("dropout mode perturbs the unlabelled pass only") {
  ModelSpec spec = tiny_spec(3);
  spec.dropout_rate = 0.5;
  DiverseHeadTrainer<float> trainer(spec, DiverseHeadMode::kDropout, quick_settings(), 9);
  trainer.optim_state().max_iter = 10;
  TinyBatch b = make_batch(17);
  StepReport rep = trainer.step(b.lab_x, b.lab_y, b.unlab_x);
  CHECK(rep.dropout_active);
  CHECK(rep.freeze_mask.empty());
  CHECK(rep.unsup >= 0.0);

  // df forbids dropout; dt requires it
  CHECK_THROWS_AS(DiverseHeadTrainer<float>(spec, DiverseHeadMode::kDynamicFreeze,
                                            quick_settings(), 9),
                  ConfigError);
  CHECK_THROWS_AS(DiverseHeadTrainer<float>(tiny_spec(3), DiverseHeadMode::kDropout,
                                            quick_settings(), 9),
                  ConfigError);
  CHECK_THROWS_AS(DiverseHeadTrainer<float>(tiny_spec(1), DiverseHeadMode::kDynamicFreeze,
                                            quick_settings(), 9),
                  ConfigError);
}

TEST_CASE("supervised baseline ignores unlabelled data and notes it") {
  BaselineTrainer<float> with(tiny_spec(1), "multihead", BaselineKind::kBase, quick_settings(), 13);
  BaselineTrainer<float> without(tiny_spec(1), "multihead", BaselineKind::kBase, quick_settings(), 13);
  with.optim_state().max_iter = 10;
  without.optim_state().max_iter = 10;
  for (int step = 0; step < 3; ++step) {
    TinyBatch b = make_batch(50 + static_cast<std::uint64_t>(step));
    StepReport r1 = with.step(b.lab_x, b.lab_y, &b.unlab_x);
    StepReport r2 = without.step(b.lab_x, b.lab_y, nullptr);
    CHECK(r1.unlabelled_ignored);
    CHECK_FALSE(r2.unlabelled_ignored);
    CHECK(r1.sup == r2.sup);
    CHECK(r1.unsup == 0.0);
  }
  auto pa = with.model().params();
  auto pb = without.model().params();
  for (std::size_t i = 0; i < pa.size(); ++i) REQUIRE(*pa[i].value == *pb[i].value);

  CHECK_THROWS_AS(
      BaselineTrainer<float>(tiny_spec(2), "multihead", BaselineKind::kBase, quick_settings(), 1),
      ConfigError);
  CHECK_THROWS_AS(
      BaselineTrainer<float>(tiny_spec(1), "resnet", BaselineKind::kBase, quick_settings(), 1),
      ConfigError);
}

TEST_CASE("self-training loss vanishes for a near-delta-confident model") {
  BaselineTrainer<float> trainer(tiny_spec(1), "segnet", BaselineKind::kShs, quick_settings(), 15);
  trainer.optim_state().max_iter = 10;
  // bias the classifier hard toward class 0: its own argmax becomes trivial
  auto params = trainer.model().params();
  Tensor<float>& cls_bias = *params.back().value;
  cls_bias[0] = 60.0f;

  TinyBatch b = make_batch(23);
  StepReport rep = trainer.step(b.lab_x, b.lab_y, &b.unlab_x);
  CHECK(rep.unsup < 1e-6);
  CHECK_THROWS_AS(trainer.step(b.lab_x, b.lab_y, nullptr), ArgError);
}

TEST_CASE("input perturbation trains toward clean-prediction consistency") {
  TrainSettings settings = quick_settings();
  settings.noise.sd = 0.01;
  BaselineTrainer<float> trainer(tiny_spec(1), "multihead", BaselineKind::kInputPerturb, settings, 19);
  trainer.optim_state().max_iter = 10;
  TinyBatch b = make_batch(29);
  StepReport rep = trainer.step(b.lab_x, b.lab_y, &b.unlab_x);
  CHECK(rep.unsup >= 0.0);
  CHECK(rep.total == rep.sup + rep.unsup);
  CHECK_THROWS_AS(trainer.step(b.lab_x, b.lab_y, nullptr), ArgError);
}

TEST_CASE("three identical members produce six equal cross terms at step zero") {
  std::vector<std::unique_ptr<SegModel<float>>> models;
  for (int n = 0; n < 3; ++n) models.push_back(make_seg_model<float>("pyramid", 3, 3, 77));
  DiverseModelTrainer<float> trainer(std::move(models), quick_settings(), 31);
  trainer.optim_state().max_iter = 10;
  TinyBatch b = make_batch(37);
  StepReport rep = trainer.step(b.lab_x, b.lab_y, b.unlab_x);
  REQUIRE(rep.dm_pair_terms.size() == 6);
  for (std::size_t i = 1; i < 6; ++i)
    CHECK_THAT(rep.dm_pair_terms[i], Catch::Matchers::WithinAbs(rep.dm_pair_terms[0], 1e-6));

  double mean = 0;
  for (auto v : rep.dm_pair_terms) mean += v;
  mean /= 6.0;
  CHECK_THAT(rep.unsup, Catch::Matchers::WithinAbs(mean, 1e-9));
}

TEST_CASE("cross-model training decouples at lambda zero") {
  const std::uint64_t master = 41;
  std::vector<std::unique_ptr<SegModel<float>>> models;
  models.push_back(make_seg_model<float>("pyramid", 3, 3, 101));
  models.push_back(make_seg_model<float>("unet", 3, 3, 102));
  models.push_back(make_seg_model<float>("segnet", 3, 3, 103));
  DiverseModelTrainer<float> trainer(std::move(models), quick_settings(0.0), master);
  trainer.optim_state().max_iter = 20;

  auto replica = make_seg_model<float>("unet", 3, 3, 102);
  SgdOptimizer<float> opt(replica->params(), 0.9, 1e-4);
  OptimState ostate;
  ostate.base_lr = 0.05;
  ostate.max_iter = 20;

  for (int step = 0; step < 4; ++step) {
    TinyBatch b = make_batch(900 + static_cast<std::uint64_t>(step));
    trainer.step(b.lab_x, b.lab_y, b.unlab_x);

    replica->zero_grad();
    auto pred = replica->forward(b.lab_x);
    replica->backward(pixel_ce_grad(pred, b.lab_y, 1.0 / 3.0));
    opt.step(poly_lr(ostate));
    ++ostate.iter;

    auto a = trainer.models()[1]->params();
    auto r = replica->params();
    for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(*a[i].value == *r[i].value);
  }
}

TEST_CASE("diversemodel trainer validates its member list") {
  std::vector<std::unique_ptr<SegModel<float>>> two;
  two.push_back(make_seg_model<float>("pyramid", 3, 3, 1));
  two.push_back(make_seg_model<float>("unet", 3, 3, 2));
  CHECK_THROWS_AS(DiverseModelTrainer<float>(std::move(two), quick_settings(), 1), ConfigError);

  std::vector<std::unique_ptr<SegModel<float>>> mixed;
  mixed.push_back(make_seg_model<float>("pyramid", 3, 3, 1));
  mixed.push_back(make_seg_model<float>("unet", 3, 4, 2));
  mixed.push_back(make_seg_model<float>("segnet", 3, 3, 3));
  CHECK_THROWS_AS(DiverseModelTrainer<float>(std::move(mixed), quick_settings(), 1), ConfigError);

  CHECK_THROWS_AS(make_seg_model<float>("resnet", 3, 3, 1), ConfigError);
}

TEST_CASE("dm member forward shapes and gradient flow") {
  for (const char* arch : {"pyramid", "unet", "segnet"}) {
    auto model = make_seg_model<float>(arch, 3, 4, 55);
    TinyBatch b = make_batch(61, 4);
    ProbMap<float> out = model->forward(b.lab_x);
    REQUIRE(out.scores.dims() == Shape{2, 16, 16, 4});
    model->zero_grad();
    model->backward(pixel_ce_grad(out, b.lab_y));
    bool any_nonzero = false;
    for (auto p : model->params())
      for (std::int64_t i = 0; i < p.grad->numel(); ++i)
        if ((*p.grad)[i] != 0.0f) any_nonzero = true;
    CHECK(any_nonzero);
    CHECK(model->param_count() > 0);
  }
}
