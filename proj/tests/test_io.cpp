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

#include <filesystem>
#include <sstream>

#include "dpmnet/config.hpp"
#include "dpmnet/model_io.hpp"

using namespace dpmnet;

namespace {

Dataset desk(std::size_t n, std::uint64_t seed) {
  SceneSpec s;
  s.classes = desk_classes();
  s.seed = seed;
  return generate(s, n);
}

Model trained_model() {
  const Dataset ds = desk(4, 1);
  TrainState st;
  st.model = init_model(default_featnet_spec(), PyramidSpec{}, infer_class_setup(ds, 2, 4), 9);
  TrainConfig cfg;
  cfg.pretrain_negatives = 20;
  cfg.pretrain_epochs = 1;
  cfg.epochs_phase1 = 1;
  cfg.epochs_phase2 = 0;
  fit(st, ds, cfg);
  return st.model;
}

std::string bytes_of(const Model& m, const TrainState* st = nullptr) {
  std::ostringstream os(std::ios::binary);
  write_model(os, m, st);
  return os.str();
}

}  // namespace

TEST(ModelFile, RoundTripIsBitwise) {
  const Model m = trained_model();
  const std::string a = bytes_of(m);
  std::istringstream is(a, std::ios::binary);
  bool has_state = true;
  const Model back = read_model(is, nullptr, &has_state);
  EXPECT_FALSE(has_state);
  EXPECT_EQ(bytes_of(back), a);
  EXPECT_EQ(back.featnet_spec, m.featnet_spec);
  EXPECT_EQ(back.classes[1].name, m.classes[1].name);
  EXPECT_EQ(back.classes[0].views[1].parts[4].deformation, m.classes[0].views[1].parts[4].deformation);
}

TEST(ModelFile, DetectionsIdenticalAfterReload) {
  const Model m = trained_model();
  const std::string path = std::string(DPMNET_TEST_TMP) + "/io_model.bin";
  std::filesystem::create_directories(DPMNET_TEST_TMP);
  save_model(path, m);
  const Model back = load_model(path);
  const Dataset ds = desk(3, 2);
  const auto a = detect_dataset(m, ds), b = detect_dataset(back, ds);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a[k].score, b[k].score);
    EXPECT_EQ(a[k].box, b[k].box);
  }
}

TEST(ModelFile, CheckpointCarriesTrainingState) {
  TrainState st;
  st.model = trained_model();
  st.pretrained = true;
  st.epoch = 7;
  st.step = 1234;
  EpochMetrics em;
  em.epoch = 7;
  em.mean_loss = 0.25;
  st.history.push_back(em);
  const std::string path = std::string(DPMNET_TEST_TMP) + "/io_ckpt.bin";
  std::filesystem::create_directories(DPMNET_TEST_TMP);
  save_checkpoint(path, st);
  const TrainState back = load_checkpoint(path);
  EXPECT_TRUE(back.pretrained);
  EXPECT_EQ(back.epoch, 7);
  EXPECT_EQ(back.step, 1234u);
  ASSERT_EQ(back.history.size(), 1u);
  EXPECT_EQ(back.history[0].mean_loss, 0.25);
  EXPECT_TRUE(std::isnan(back.history[0].val_map));
  EXPECT_EQ(bytes_of(back.model), bytes_of(st.model));
}

TEST(ModelFile, RejectsWrongMagicVersionAndTruncation) {
  const std::string good = bytes_of(trained_model());
  std::string bad_magic = good;
  bad_magic[0] = 'X';
  std::istringstream a(bad_magic);
  EXPECT_THROW(read_model(a), Error);

  std::string future = good;
  future[8] = 2;  // version field follows the 8-byte magic
  std::istringstream b(future);
  EXPECT_THROW(read_model(b), VersionError);

  std::istringstream c(good.substr(0, good.size() / 2));
  EXPECT_THROW(read_model(c), Error);

  // a plain model file is not a checkpoint
  const std::string path = std::string(DPMNET_TEST_TMP) + "/io_plain.bin";
  std::filesystem::create_directories(DPMNET_TEST_TMP);
  save_model(path, trained_model());
  EXPECT_THROW(load_checkpoint(path), Error);
}

TEST(Config, PrecedenceAndEcho) {
  TrainConfig cfg;
  ConfigTable t;
  bind_train(t, cfg);
  std::istringstream file("# comment\nphase1.lr = 0.5\n\nseed=9\ntrain.featnet = false\n");
  t.apply(parse_config(file, "test.cfg"));
  t.set("phase1.lr", "0.25");  // command line wins over the file
  EXPECT_DOUBLE_EQ(cfg.lr_phase1, 0.25);
  EXPECT_EQ(cfg.seed, 9u);
  EXPECT_FALSE(cfg.train_featnet);
  EXPECT_DOUBLE_EQ(cfg.lr_phase2, 1e-4);
  std::ostringstream os;
  t.echo(os);
  EXPECT_NE(os.str().find("phase1.lr=0.25\n"), std::string::npos);
  EXPECT_NE(os.str().find("train.featnet=false\n"), std::string::npos);
}

TEST(Config, Errors) {
  TrainConfig cfg;
  ConfigTable t;
  bind_train(t, cfg);
  EXPECT_THROW(t.set("phase3.lr", "1"), ConfigError);
  EXPECT_THROW(t.set("phase1.epochs", "1.5"), ConfigError);
  EXPECT_THROW(t.set("train.featnet", "maybe"), ConfigError);
  std::istringstream bad("just a line\n");
  EXPECT_THROW(parse_config(bad, "x"), ConfigError);
  EXPECT_THROW(scene_preset("city"), ConfigError);
}

TEST(Raster, PnmRoundTripAndBoxDrawing) {
  Raster r(5, 4, 1, 100);
  r.at(1, 2) = 7;
  const std::string path = std::string(DPMNET_TEST_TMP) + "/io_raster.pgm";
  std::filesystem::create_directories(DPMNET_TEST_TMP);
  write_pnm(path, r);
  EXPECT_EQ(read_pnm(path), r);

  Raster c = to_rgb(r);
  draw_box(c, 1, 1, 3, 2, {255, 0, 0});
  EXPECT_EQ(c.at(1, 1, 0), 255);
  EXPECT_EQ(c.at(3, 2, 0), 255);
  EXPECT_EQ(c.at(2, 1, 1), 0);
  EXPECT_EQ(c.at(0, 0, 0), 100);
  EXPECT_EQ(c.at(4, 3, 0), 100);

  // partly outside: clipped, nothing wraps onto the next row
  Raster d = to_rgb(r);
  draw_box(d, 3, -2, 9, 1, {0, 0, 255});
  EXPECT_EQ(d.at(4, 1, 2), 255);
  EXPECT_EQ(d.at(3, 0, 2), 255);
  EXPECT_EQ(d.at(0, 1, 2), 100);
  EXPECT_EQ(d.at(0, 2, 2), 100);
}
