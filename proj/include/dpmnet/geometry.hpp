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

#pragma once

// Image pyramid and every coordinate mapping between feature cells and
// input pixels.
//
// Coordinates are continuous "edge" coordinates: pixel p covers [p, p+1).
// A feature cell c (along one axis) sees input pixels
// [c*stride + fov_start, c*stride + fov_start + fov) of its pyramid level.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "dpmnet/ops.hpp"
#include "dpmnet/tensor.hpp"

namespace dpmnet {

struct PyramidSpec {
  int intervals_per_octave = 5;
  int min_dim = 48;
};

struct PyramidLevel {
  Tensor image;    // [C,h,w]
  int index = 0;   // level i has nominal factor 2^(-i/intervals)
  double nominal = 1.0;
  // input pixels per level pixel, measured from the rounded level size
  double scale_x = 1.0;
  double scale_y = 1.0;
};

struct Pyramid {
  std::vector<PyramidLevel> levels;
  bool undersized = false;  // input smaller than min_dim; one level only
};

inline std::size_t pyramid_round(double v) {
  return static_cast<std::size_t>(std::lround(v));
}

inline Pyramid build_pyramid(const Tensor& image, const PyramidSpec& spec) {
  require_chw(image, "build_pyramid");
  if (spec.intervals_per_octave < 1) {
    throw Error("build_pyramid: intervals_per_octave must be >= 1");
  }
  if (spec.min_dim < 1) throw Error("build_pyramid: min_dim must be >= 1");
  const std::size_t H = image.dim(1), W = image.dim(2);
  Pyramid pyr;
  const auto min_dim = static_cast<std::size_t>(spec.min_dim);
  if (std::min(H, W) < min_dim) {
    pyr.undersized = true;
    pyr.levels.push_back({image, 0, 1.0, 1.0, 1.0});
    return pyr;
  }
  for (int i = 0;; ++i) {
    const double f = std::pow(2.0, -static_cast<double>(i) / spec.intervals_per_octave);
    const std::size_t h = pyramid_round(static_cast<double>(H) * f);
    const std::size_t w = pyramid_round(static_cast<double>(W) * f);
    if (std::min(h, w) < min_dim) break;
    PyramidLevel lvl;
    lvl.index = i;
    lvl.nominal = f;
    lvl.image = (i == 0) ? image : resize_bilinear(image, h, w);
    lvl.scale_x = static_cast<double>(W) / static_cast<double>(w);
    lvl.scale_y = static_cast<double>(H) / static_cast<double>(h);
    pyr.levels.push_back(std::move(lvl));
  }
  return pyr;
}

enum class LayerKind { conv, pool };

inline LayerKind parse_layer_kind(const std::string& s) {
  if (s == "conv") return LayerKind::conv;
  if (s == "pool") return LayerKind::pool;
  throw Error("unknown layer kind '" + s + "'");
}

struct LayerGeom {
  LayerKind kind = LayerKind::conv;
  int kernel = 1;
  int stride = 1;
};

/// Receptive field of one output cell, in input pixels of its level.
struct ReceptiveField {
  int stride = 1;
  int fov = 1;
  int fov_start = 0;  // first input pixel seen by cell 0

  double center_offset() const { return fov_start + 0.5 * fov; }
};

inline ReceptiveField compute_geometry(std::span<const LayerGeom> layers) {
  if (layers.empty()) throw Error("compute_geometry: empty layer stack");
  ReceptiveField rf;
  for (const LayerGeom& l : layers) {
    if (l.kind != LayerKind::conv && l.kind != LayerKind::pool) {
      throw Error("compute_geometry: unknown layer kind");
    }
    if (l.kernel < 1 || l.stride < 1) {
      throw Error("compute_geometry: kernel and stride must be positive");
    }
    rf.fov += (l.kernel - 1) * rf.stride;
    rf.stride *= l.stride;
  }
  return rf;
}

struct ScaleGeometry {
  double scale_x = 1.0;  // input pixels per level pixel
  double scale_y = 1.0;
  int feat_stride = 1;
  int fov = 1;
  double fov_center_offset = 0.5;  // level pixels, cell 0
};

inline ScaleGeometry make_scale_geometry(const ReceptiveField& rf,
                                         const PyramidLevel& level) {
  return {level.scale_x, level.scale_y, rf.stride, rf.fov, rf.center_offset()};
}

struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  bool valid() const { return x1 < x2 && y1 < y2; }

  friend bool operator==(const Box&, const Box&) = default;
};

inline Box clip_box(Box b, double width, double height) {
  b.x1 = std::clamp(b.x1, 0.0, width);
  b.x2 = std::clamp(b.x2, 0.0, width);
  b.y1 = std::clamp(b.y1, 0.0, height);
  b.y2 = std::clamp(b.y2, 0.0, height);
  return b;
}

/// A rectangle of feature cells: top-left (row, col), extent in cells.
struct CellRect {
  int row = 0, col = 0;
  int height = 1, width = 1;

  friend bool operator==(const CellRect&, const CellRect&) = default;
};

/// Input-image box for a cell rectangle. Edges sit half a stride outside the
/// field-of-view centers of the boundary cells, so the remaining
/// (fov - stride) / 2 pixels of each boundary field of view are context.
inline Box project_box(const CellRect& cells, const ScaleGeometry& g) {
  const double half = 0.5 * g.feat_stride;
  const double c0x = cells.col * g.feat_stride + g.fov_center_offset;
  const double c1x = (cells.col + cells.width - 1) * g.feat_stride + g.fov_center_offset;
  const double c0y = cells.row * g.feat_stride + g.fov_center_offset;
  const double c1y = (cells.row + cells.height - 1) * g.feat_stride + g.fov_center_offset;
  return Box{(c0x - half) * g.scale_x, (c0y - half) * g.scale_y,
             (c1x + half) * g.scale_x, (c1y + half) * g.scale_y};
}

/// Inverse of project_box for unclipped boxes.
inline CellRect unproject_box(const Box& b, const ScaleGeometry& g) {
  const double half = 0.5 * g.feat_stride;
  auto cell = [&](double edge, double scale, double sign) {
    return static_cast<int>(std::lround(
        (edge / scale - sign * half - g.fov_center_offset) / g.feat_stride));
  };
  CellRect r;
  r.col = cell(b.x1, g.scale_x, -1.0);
  r.row = cell(b.y1, g.scale_y, -1.0);
  r.width = cell(b.x2, g.scale_x, 1.0) - r.col + 1;
  r.height = cell(b.y2, g.scale_y, 1.0) - r.row + 1;
  return r;
}

}  // namespace dpmnet
