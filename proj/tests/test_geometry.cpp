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

#include <random>

#include "dpmnet/featnet.hpp"
#include "dpmnet/geometry.hpp"

using namespace dpmnet;

namespace {

// Pixels that influence feature cell (0, col): perturb every input column of
// a constant image and see whether the cell moves. Uses a positive network
// so no perturbation is masked by a dead ReLU or a pooling tie.
std::vector<int> dependent_columns(const FeatNetSpec& spec, int col, int width) {
  FeatNetParams p = init_featnet(spec, 1);
  for (ConvParams& cp : p.convs) {
    for (double& w : cp.weight.data()) w = 0.1;
    cp.bias.fill(0.1);
  }
  Tensor base(Shape{1, static_cast<std::size_t>(width), static_cast<std::size_t>(width)}, 1.0);
  const Tensor f0 = extract_features(base, spec, p);
  std::vector<int> cols;
  for (int x = 0; x < width; ++x) {
    Tensor img = base;
    for (int y = 0; y < width; ++y) img.at(0, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) += 1.0;
    const Tensor f = extract_features(img, spec, p);
    if (f.at(0, 0, static_cast<std::size_t>(col)) != f0.at(0, 0, static_cast<std::size_t>(col))) cols.push_back(x);
  }
  return cols;
}

}  // namespace

TEST(Geometry, DefaultNetworkMatchesDependencyTrace) {
  const FeatNetSpec spec = default_featnet_spec();
  const ReceptiveField rf = featnet_geometry(spec);
  EXPECT_EQ(rf.stride, 4);
  EXPECT_EQ(rf.fov, 12);
  for (int col : {0, 1, 3}) {
    const auto cols = dependent_columns(spec, col, 48);
    ASSERT_FALSE(cols.empty());
    EXPECT_EQ(cols.front(), col * rf.stride + rf.fov_start);
    EXPECT_EQ(static_cast<int>(cols.size()), rf.fov);
    EXPECT_EQ(cols.back() - cols.front() + 1, rf.fov);
  }
}

TEST(Geometry, StrideOfFirstLayerOverride) {
  FeatNetSpec spec = default_featnet_spec();
  spec.first_layer_stride = 2;
  const ReceptiveField rf = featnet_geometry(spec);
  EXPECT_EQ(rf.stride, 8);
  EXPECT_EQ(rf.fov, 19);
  const auto cols = dependent_columns(spec, 1, 64);
  EXPECT_EQ(cols.front(), rf.stride);
  EXPECT_EQ(static_cast<int>(cols.size()), rf.fov);
}

TEST(Geometry, RejectsBadLayers) {
  std::vector<LayerGeom> none;
  EXPECT_THROW(compute_geometry(none), Error);
  std::vector<LayerGeom> bad{{LayerKind::conv, 0, 1}};
  EXPECT_THROW(compute_geometry(bad), Error);
  EXPECT_THROW(parse_layer_kind("dropout"), Error);
}

TEST(Pyramid, LevelSizesFollowLoopDefinition) {
  for (auto [H, W] : {std::pair{64, 64}, std::pair{64, 100}, std::pair{97, 50}}) {
    const PyramidSpec spec;
    const Pyramid p = build_pyramid(Tensor(Shape{1, static_cast<std::size_t>(H), static_cast<std::size_t>(W)}), spec);
    std::vector<std::pair<int, int>> want;
    for (int i = 0; i < 100; ++i) {
      const double f = std::pow(2.0, -i / 5.0);
      const int h = static_cast<int>(std::lround(H * f)), w = static_cast<int>(std::lround(W * f));
      if (std::min(h, w) < 48) break;
      want.emplace_back(h, w);
    }
    ASSERT_EQ(p.levels.size(), want.size());
    for (std::size_t k = 0; k < want.size(); ++k) {
      EXPECT_EQ(static_cast<int>(p.levels[k].image.dim(1)), want[k].first);
      EXPECT_EQ(static_cast<int>(p.levels[k].image.dim(2)), want[k].second);
      EXPECT_DOUBLE_EQ(p.levels[k].scale_x, static_cast<double>(W) / want[k].second);
    }
  }
}

TEST(Pyramid, SixtyFourPixelImageHasThreeLevels) {
  const Pyramid p = build_pyramid(Tensor(Shape{1, 64, 64}), PyramidSpec{});
  ASSERT_EQ(p.levels.size(), 3u);  // 64, 56, 49
  EXPECT_EQ(p.levels[2].image.dim(1), 49u);
}

TEST(Pyramid, UndersizedInputKeepsOneLevel) {
  const Pyramid p = build_pyramid(Tensor(Shape{1, 30, 60}), PyramidSpec{});
  EXPECT_TRUE(p.undersized);
  ASSERT_EQ(p.levels.size(), 1u);
  EXPECT_EQ(p.levels[0].image.dim(1), 30u);
}

TEST(Pyramid, ResizePreservesConstantImage) {
  Tensor img(Shape{1, 64, 64}, 0.25);
  const Pyramid p = build_pyramid(img, PyramidSpec{});
  for (const auto& l : p.levels) {
    for (double v : l.image.data()) EXPECT_DOUBLE_EQ(v, 0.25);
  }
}

TEST(ProjectBox, UnprojectInvertsProject) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> pos(0, 12), ext(1, 6);
  const ReceptiveField rf = featnet_geometry(default_featnet_spec());
  for (double s : {1.0, 64.0 / 56.0, 64.0 / 49.0}) {
    const ScaleGeometry g{s, s, rf.stride, rf.fov, rf.center_offset()};
    for (int t = 0; t < 200; ++t) {
      const CellRect c{pos(rng), pos(rng), ext(rng), ext(rng)};
      EXPECT_EQ(unproject_box(project_box(c, g), g), c);
    }
  }
}

TEST(ProjectBox, CellSpansOneStrideAroundItsFieldCenter) {
  const ReceptiveField rf = featnet_geometry(default_featnet_spec());
  const ScaleGeometry g{1.0, 1.0, rf.stride, rf.fov, rf.center_offset()};
  // cell 0 sees pixels [0, 12): center 6, box [4, 8)
  const Box b = project_box(CellRect{0, 0, 1, 1}, g);
  EXPECT_EQ(b, (Box{4, 4, 8, 8}));
  const Box big = project_box(CellRect{1, 2, 4, 3}, g);
  EXPECT_EQ(big, (Box{12, 8, 24, 24}));
}

TEST(Box, ClipKeepsInsideImage) {
  const Box b = clip_box(Box{-3, 5, 70, 80}, 64, 64);
  EXPECT_EQ(b, (Box{0, 5, 64, 64}));
}
