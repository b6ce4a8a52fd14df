/* Copyright 2026 The dpmnet Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License. */

#include <gtest/gtest.h>

#include <atomic>
#include <sstream>

#include "dpmnet/trainer.hpp"

using namespace dpmnet;

namespace {

Dataset desk(std::size_t n, std::uint64_t seed) {
  SceneSpec s;
  s.classes = desk_classes();
  s.seed = seed;
  return generate(s, n);
}

TrainState fresh(const Dataset& ds, std::uint64_t seed) {
  TrainState st;
  st.model = init_model(default_featnet_spec(), PyramidSpec{}, infer_class_setup(ds, 2, 4), seed);
  return st;
}

TrainConfig small_config() {
  TrainConfig c;
  c.pretrain_negatives = 40;
  c.pretrain_epochs = 2;
  c.epochs_phase1 = 1;
  c.epochs_phase2 = 1;
  return c;
}

std::string serialize(const Model& m) {
  std::ostringstream os;
  for (const auto& c : m.featnet.convs) {
    for (double v : c.weight.data()) os << v << ' ';
    for (double v : c.bias.data()) os << v << ' ';
  }
  for (const auto& cls : m.classes) {
    for (const auto& v : cls.views) {
      for (double x : v.root.data()) os << x << ' ';
      for (std::size_t p = 0; p < v.parts.size(); ++p) {
        for (double x : v.part_filters[p].data()) os << x << ' ';
        for (double x : v.parts[p].deformation.data()) os << x << ' ';
      }
    }
  }
  return os.str();
}

bool same_params(const Model& a, const Model& b) {
  if (a.featnet.convs.size() != b.featnet.convs.size()) return false;
  for (std::size_t c = 0; c < a.featnet.convs.size(); ++c) {
    if (!(a.featnet.convs[c].weight == b.featnet.convs[c].weight) ||
        !(a.featnet.convs[c].bias == b.featnet.convs[c].bias)) {
      return false;
    }
  }
  for (std::size_t k = 0; k < a.classes.size(); ++k) {
    for (std::size_t v = 0; v < a.classes[k].views.size(); ++v) {
      const ViewModel &x = a.classes[k].views[v], &y = b.classes[k].views[v];
      if (!(x.root == y.root)) return false;
      for (std::size_t p = 0; p < x.parts.size(); ++p) {
        if (!(x.part_filters[p] == y.part_filters[p]) || !(x.parts[p].deformation == y.parts[p].deformation)) {
          return false;
        }
      }
    }
  }
  return true;
}

}  // namespace

TEST(Setup, ViewsInferredFromAspectClusters) {
  const Dataset ds = desk(60, 1);
  const auto setup = infer_class_setup(ds, 2, 4);
  ASSERT_EQ(setup.size(), 2u);
  EXPECT_EQ(setup[0].name, "kite");
  ASSERT_EQ(setup[0].views.size(), 2u);
  EXPECT_EQ(setup[0].views[0].root_height, 4);
  EXPECT_EQ(setup[0].views[0].root_width, 4);
  EXPECT_EQ(setup[0].views[1].root_height, 3);
  EXPECT_EQ(setup[0].views[1].root_width, 6);
  EXPECT_EQ(setup[1].views[0].root_height, 6);
  EXPECT_EQ(setup[1].views[0].root_width, 3);
  EXPECT_EQ(setup[1].views[1].root_height, 4);
}

TEST(Sgd, DeformationStaysNonNegative) {
  const Dataset ds = desk(4, 2);
  TrainState st = fresh(ds, 3);
  ModelGradients g;
  for (const auto& cls : st.model.classes) {
    std::vector<ViewGradients> views;
    for (const auto& v : cls.views) {
      ViewGradients vg{Tensor(v.root.shape()), {}, {}};
      for (std::size_t p = 0; p < v.parts.size(); ++p) {
        vg.parts.emplace_back(v.part_filters[p].shape());
        vg.deformation.push_back(Tensor(Shape{4}, 1e3));  // drives w_D far below zero
      }
      views.push_back(vg);
    }
    g.classes.push_back(views);
  }
  for (int k = 0; k < 50; ++k) sgd_step(st.model, g, 1.0, false);
  for (const auto& cls : st.model.classes)
    for (const auto& v : cls.views)
      for (const auto& p : v.parts)
        for (double w : p.deformation.data()) EXPECT_EQ(w, 0.0);
}

TEST(Fit, ZeroLearningRateLeavesParametersUntouched) {
  const Dataset ds = desk(6, 4);
  TrainState st = fresh(ds, 5);
  const Model before = st.model;
  TrainConfig cfg = small_config();
  cfg.pretrain_lr = cfg.lr_phase1 = cfg.lr_phase2 = 0.0;
  fit(st, ds, cfg);
  EXPECT_TRUE(same_params(before, st.model));
  EXPECT_EQ(st.epoch, 2);
  EXPECT_EQ(st.step, 12u);
  EXPECT_EQ(st.history.size(), 2u);
}

TEST(Fit, FrozenFeatureNetworkIsNotUpdated) {
  const Dataset ds = desk(6, 4);
  TrainState st = fresh(ds, 5);
  const auto convs = st.model.featnet.convs;
  TrainConfig cfg = small_config();
  cfg.train_featnet = false;
  fit(st, ds, cfg);
  EXPECT_EQ(st.model.featnet.convs[0].weight, convs[0].weight);
  EXPECT_EQ(st.model.featnet.convs[1].bias, convs[1].bias);
  EXPECT_NE(st.model.classes[0].views[0].root, fresh(ds, 5).model.classes[0].views[0].root);
}

TEST(Fit, OneUpdatePerImage) {
  const Dataset ds = desk(5, 6);
  TrainState st = fresh(ds, 1);
  TrainConfig cfg = small_config();
  cfg.skip_pretrain = true;
  fit(st, ds, cfg);
  EXPECT_EQ(st.step, 10u);
  int applied = 0;
  for (const auto& h : st.history) applied += 5 - h.rejected;
  EXPECT_EQ(applied, 10);
}

TEST(Fit, ReproducibleAndResumable) {
  const Dataset ds = desk(6, 7);
  TrainConfig cfg = small_config();
  TrainState a = fresh(ds, 2), b = fresh(ds, 2);
  fit(a, ds, cfg);
  fit(b, ds, cfg);
  EXPECT_EQ(serialize(a.model), serialize(b.model));

  // stop after the first joint epoch, then continue
  TrainState c = fresh(ds, 2);
  TrainConfig first = cfg;
  first.epochs_phase2 = 0;
  fit(c, ds, first);
  ASSERT_EQ(c.epoch, 1);
  fit(c, ds, cfg);
  EXPECT_EQ(c.epoch, 2);
  EXPECT_EQ(serialize(a.model), serialize(c.model));
}

TEST(Fit, WorkerCountDoesNotChangeResult) {
  const Dataset ds = desk(6, 8);
  TrainConfig cfg = small_config();
  cfg.train_featnet = false;
  TrainState a = fresh(ds, 3), b = fresh(ds, 3);
  FitHooks one, four;
  four.workers = 4;
  fit(a, ds, cfg, one);
  fit(b, ds, cfg, four);
  EXPECT_EQ(serialize(a.model), serialize(b.model));
  EXPECT_EQ(detect_dataset(a.model, ds, {}, 1).size(), detect_dataset(b.model, ds, {}, 3).size());
}

TEST(Fit, HooksSeeEveryEpoch) {
  const Dataset ds = desk(4, 9), val = desk(3, 10);
  TrainState st = fresh(ds, 4);
  std::vector<int> epochs, checkpoints;
  FitHooks h;
  h.validation = &val;
  h.on_epoch = [&](const EpochMetrics& m) { epochs.push_back(m.epoch); };
  h.checkpoint = [&](const TrainState& s) { checkpoints.push_back(s.epoch); };
  fit(st, ds, small_config(), h);
  EXPECT_EQ(epochs, (std::vector<int>{1, 2}));
  EXPECT_EQ(checkpoints, (std::vector<int>{0, 1, 2}));
  EXPECT_FALSE(std::isnan(st.history[0].val_map));
  std::ostringstream os;
  write_metrics_header(os);
  write_metrics_row(os, st.history[0]);
  const std::string text = os.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\t'), 14);
}

TEST(Pretrain, WindowsRespectOverlapRules) {
  const Dataset ds = desk(8, 11);
  TrainState st = fresh(ds, 1);
  const auto maps = cache_features(st.model, ds, 1);
  TrainConfig cfg = small_config();
  const PretrainSet set = pretrain_windows(st.model, ds, maps, cfg);
  EXPECT_GE(set.positives.size(), 12u);
  EXPECT_EQ(set.negatives.size(), 80u);
  for (const Window& w : set.negatives) {
    const auto& view = st.model.classes[static_cast<std::size_t>(w.cls)].views[static_cast<std::size_t>(w.view)];
    const Box b = window_box(maps[w.image][w.level], view, w.row, w.col, 64, 64);
    for (const auto& o : ds.annotations[w.image].objects) EXPECT_LE(iou(b, o.box), 0.3);
  }
  for (const Window& w : set.positives) EXPECT_GT(w.y, 0);
}

TEST(Pretrain, RaisesPositiveScores) {
  const Dataset ds = desk(20, 12);
  TrainState st = fresh(ds, 1);
  const auto maps = cache_features(st.model, ds, 1);
  TrainConfig cfg = small_config();
  cfg.pretrain_epochs = 10;
  auto mean_gap = [&](const Model& m) {
    const PretrainSet s = pretrain_windows(m, ds, maps, cfg);
    double pos = 0.0, neg = 0.0;
    for (const Window& w : s.positives)
      pos += window_score(maps[w.image][w.level].features, m.classes[static_cast<std::size_t>(w.cls)].views[static_cast<std::size_t>(w.view)], w.row, w.col);
    for (const Window& w : s.negatives)
      neg += window_score(maps[w.image][w.level].features, m.classes[static_cast<std::size_t>(w.cls)].views[static_cast<std::size_t>(w.view)], w.row, w.col);
    return pos / static_cast<double>(s.positives.size()) - neg / static_cast<double>(s.negatives.size());
  };
  const double before = mean_gap(st.model);
  pretrain(st.model, ds, cfg, &maps);
  EXPECT_GT(mean_gap(st.model), before + 1.0);
}

TEST(TrainImage, NonFiniteStepIsRejected) {
  const Dataset ds = desk(1, 13);
  TrainState st = fresh(ds, 1);
  st.model.classes[0].views[0].root[0] = std::nan("");
  const Model before = st.model;
  const StepResult r = train_image(st.model, to_tensor(ds.samples[0].raster), ground_truth(ds, 0), small_config(), 1e-3);
  EXPECT_FALSE(r.applied);
  EXPECT_EQ(st.model.featnet.convs[0].weight, before.featnet.convs[0].weight);
  EXPECT_EQ(st.model.classes[1].views[0].root, before.classes[1].views[0].root);
}

TEST(Parallel, VisitsEveryIndexOnceAndRethrows) {
  std::vector<std::atomic<int>> hits(100);
  parallel_for(100, 4, [&](std::size_t i) { hits[i]++; });
  for (auto& h : hits) EXPECT_EQ(h.load(), 1);
  EXPECT_THROW(parallel_for(10, 3, [](std::size_t i) { if (i == 7) throw Error("boom"); }), Error);
}

TEST(Config, ValidationRejectsNegativeRates) {
  TrainConfig c;
  c.lr_phase2 = -1e-3;
  EXPECT_THROW(c.validate(), Error);
  c = TrainConfig{};
  c.epochs_phase1 = -1;
  EXPECT_THROW(c.validate(), Error);
  EXPECT_DOUBLE_EQ(TrainConfig{}.lr_for(14), 1e-3);
  EXPECT_DOUBLE_EQ(TrainConfig{}.lr_for(15), 1e-4);
}
