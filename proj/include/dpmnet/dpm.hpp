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

// Deformable parts model as network layers.
//
//   F_root = w_root * phi                       (correlation, summed over channels)
//   F_part = w_part * phi
//   F_def[x] = max_{|d| <= s} F_part[x + anchor + d] - w_D . [|di|, |dj|, di^2, dj^2]
//   F_v = F_root + sum_parts F_def               (AND)
//   F   = max_v F_v                               (OR)
//
// The deformation term is a subtracted cost with w_D >= 0, so w_D = 0 and a
// zero anchor reduce the deformation layer to max-pooling. A location x of a
// response map is the top-left cell of the root placement.

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dpmnet/geometry.hpp"
#include "dpmnet/ops.hpp"
#include "dpmnet/tape.hpp"

namespace dpmnet {

constexpr int kPartsPerView = 9;

struct PartSpec {
  int anchor_row = 0, anchor_col = 0;  // offset from the root's top-left cell
  int height = 1, width = 1;           // filter size in cells
  int radius = 1;                      // search window [-radius, radius]^2
  Tensor deformation = Tensor(Shape{4});  // w_D >= 0
};

struct ViewModel {
  Tensor root;                       // [1,C,rh,rw]
  std::vector<PartSpec> parts;       // exactly kPartsPerView
  std::vector<Tensor> part_filters;  // [1,C,ph,pw] each
  double aspect = 1.0;               // root width / height

  int root_height() const { return static_cast<int>(root.dim(2)); }
  int root_width() const { return static_cast<int>(root.dim(3)); }
  int channels() const { return static_cast<int>(root.dim(1)); }
};

struct ClassModel {
  int label = 1;  // > 0; 0 is background
  std::string name;
  std::vector<ViewModel> views;
};

inline void project_deformation(PartSpec& part) {
  for (double& w : part.deformation.data()) w = std::max(0.0, w);
}

inline void validate(const ViewModel& v) {
  if (v.root.rank() != 4 || v.root.dim(0) != 1) {
    throw ShapeError("view: root filter must be [1,C,h,w], got " + shape_str(v.root.shape()));
  }
  if (v.parts.size() != kPartsPerView || v.part_filters.size() != kPartsPerView) {
    throw Error("view: expected 9 parts, got " + std::to_string(v.parts.size()));
  }
  for (std::size_t p = 0; p < v.parts.size(); ++p) {
    const PartSpec& ps = v.parts[p];
    const Tensor& f = v.part_filters[p];
    if (f.rank() != 4 || f.dim(1) != v.root.dim(1) ||
        static_cast<int>(f.dim(2)) != ps.height || static_cast<int>(f.dim(3)) != ps.width) {
      throw ShapeError("view: part filter " + std::to_string(p) + " has shape " +
                       shape_str(f.shape()));
    }
    if (ps.anchor_row < 0 || ps.anchor_col < 0 ||
        ps.anchor_row + ps.height > v.root_height() ||
        ps.anchor_col + ps.width > v.root_width()) {
      throw Error("view: part " + std::to_string(p) + " anchor outside root extent");
    }
    if (ps.deformation.size() != 4) throw ShapeError("view: w_D must have 4 entries");
    for (double w : ps.deformation.data()) {
      if (w < 0.0) throw Error("view: negative deformation weight");
    }
  }
}

inline void validate(const ClassModel& c) {
  if (c.label <= 0) throw Error("class label must be positive");
  if (c.views.empty()) throw Error("class '" + c.name + "' has no views");
  for (std::size_t a = 0; a < c.views.size(); ++a) {
    validate(c.views[a]);
    for (std::size_t b = a + 1; b < c.views.size(); ++b) {
      if (c.views[a].aspect == c.views[b].aspect) {
        throw Error("class '" + c.name + "' has views with equal aspect ratio");
      }
    }
  }
}

/// Anchor offsets of a 3x3 grid of parts tiling a root extent.
inline std::array<int, 3> grid_anchors(int root_extent, int part_extent) {
  std::array<int, 3> a{};
  for (int k = 0; k < 3; ++k) {
    a[static_cast<std::size_t>(k)] =
        static_cast<int>(std::lround(k * (root_extent - part_extent) / 2.0));
  }
  return a;
}

struct ViewShape {
  int root_height = 4, root_width = 4;
};

/// A view with zero filters and nine parts on a 3x3 grid. Part size is
/// ceil(root/3) per axis; the search radius defaults to the part size.
inline ViewModel make_view(int channels, ViewShape shape,
                           std::array<double, 4> deformation = {0.0, 0.0, 0.0, 0.0},
                           int radius = -1) {
  const int ph = (shape.root_height + 2) / 3;
  const int pw = (shape.root_width + 2) / 3;
  ViewModel v;
  const auto C = static_cast<std::size_t>(channels);
  v.root = Tensor(Shape{1, C, static_cast<std::size_t>(shape.root_height),
                        static_cast<std::size_t>(shape.root_width)});
  v.aspect = static_cast<double>(shape.root_width) / shape.root_height;
  const auto rows = grid_anchors(shape.root_height, ph);
  const auto cols = grid_anchors(shape.root_width, pw);
  for (int gi = 0; gi < 3; ++gi) {
    for (int gj = 0; gj < 3; ++gj) {
      PartSpec p;
      p.anchor_row = rows[static_cast<std::size_t>(gi)];
      p.anchor_col = cols[static_cast<std::size_t>(gj)];
      p.height = ph;
      p.width = pw;
      p.radius = radius < 0 ? std::max(ph, pw) : radius;
      p.deformation = Tensor(Shape{4}, std::vector<double>(deformation.begin(), deformation.end()));
      v.parts.push_back(std::move(p));
      v.part_filters.emplace_back(Shape{1, C, static_cast<std::size_t>(ph),
                                        static_cast<std::size_t>(pw)});
    }
  }
  return v;
}

// ---------------------------------------------------------------------------
// Part responses

struct FilterResponses {
  Tensor root;                // [1,H-rh+1,W-rw+1]
  std::vector<Tensor> parts;  // [1,H-ph+1,W-pw+1]
};

inline bool view_fits(const Tensor& phi, const ViewModel& view) {
  return static_cast<int>(phi.dim(1)) >= view.root_height() &&
         static_cast<int>(phi.dim(2)) >= view.root_width();
}

/// Root and part appearance responses, or nullopt when the root does not
/// fit the map at this scale (the view is skipped there).
inline std::optional<FilterResponses> score_filters(const Tensor& phi,
                                                    const ViewModel& view) {
  require_chw(phi, "score_filters");
  if (static_cast<int>(phi.dim(0)) != view.channels()) {
    throw ShapeError("score_filters: map has " + std::to_string(phi.dim(0)) +
                     " channels, filters expect " + std::to_string(view.channels()));
  }
  if (!view_fits(phi, view)) return std::nullopt;
  FilterResponses r;
  r.root = correlate2d(phi, view.root, 1);
  for (const Tensor& f : view.part_filters) r.parts.push_back(correlate2d(phi, f, 1));
  return r;
}

// ---------------------------------------------------------------------------
// Deformation layer

inline std::array<double, 4> deformation_features(int di, int dj) {
  return {static_cast<double>(std::abs(di)), static_cast<double>(std::abs(dj)),
          static_cast<double>(di * di), static_cast<double>(dj * dj)};
}

struct DeformResult {
  Tensor output;                     // [1,Ho,Wo]
  std::vector<std::int16_t> di, dj;  // optimal offsets per output location
  std::vector<std::size_t> source;   // flat index into the part map
};

/// Deformation layer over an explicit output extent. Offsets are scanned
/// row-major from (-s,-s); the first maximum wins. Reads outside the part
/// map are excluded. With `enabled` false (or radius <= 0) only d = 0 is
/// considered.
inline DeformResult deform(const Tensor& part_scores, const PartSpec& part,
                           std::size_t out_h, std::size_t out_w, bool enabled = true) {
  require_chw(part_scores, "deform");
  const std::size_t H = part_scores.dim(1), W = part_scores.dim(2);
  const auto ai = static_cast<std::size_t>(part.anchor_row);
  const auto aj = static_cast<std::size_t>(part.anchor_col);
  if (out_h + ai > H || out_w + aj > W) {
    throw ShapeError("deform: output extent " + std::to_string(out_h) + "x" +
                     std::to_string(out_w) + " with anchor (" + std::to_string(ai) + "," +
                     std::to_string(aj) + ") exceeds part map " + std::to_string(H) + "x" +
                     std::to_string(W));
  }
  const int s = (enabled && part.radius > 0) ? part.radius : 0;
  const double* w = part.deformation.ptr();
  DeformResult r;
  r.output = Tensor(Shape{1, out_h, out_w});
  r.di.resize(out_h * out_w);
  r.dj.resize(out_h * out_w);
  r.source.resize(out_h * out_w);
  const double* f = part_scores.ptr();
  const auto iH = static_cast<long>(H), iW = static_cast<long>(W);
  for (std::size_t i = 0; i < out_h; ++i) {
    for (std::size_t j = 0; j < out_w; ++j) {
      const long ci = static_cast<long>(i + ai), cj = static_cast<long>(j + aj);
      double best = -std::numeric_limits<double>::infinity();
      int bi = 0, bj = 0;
      for (int di = -s; di <= s; ++di) {
        const long y = ci + di;
        if (y < 0 || y >= iH) continue;
        for (int dj = -s; dj <= s; ++dj) {
          const long x = cj + dj;
          if (x < 0 || x >= iW) continue;
          const double cost = w[0] * std::abs(di) + w[1] * std::abs(dj) +
                              w[2] * di * di + w[3] * dj * dj;
          const double v = f[y * iW + x] - cost;
          if (v > best) {
            best = v;
            bi = di;
            bj = dj;
          }
        }
      }
      const std::size_t o = i * out_w + j;
      r.output[o] = best;
      r.di[o] = static_cast<std::int16_t>(bi);
      r.dj[o] = static_cast<std::int16_t>(bj);
      r.source[o] = static_cast<std::size_t>((ci + bi) * iW + (cj + bj));
    }
  }
  return r;
}

/// Extent where the anchored part position stays inside the map.
inline DeformResult deform(const Tensor& part_scores, const PartSpec& part,
                           bool enabled = true) {
  require_chw(part_scores, "deform");
  const auto ai = static_cast<std::size_t>(part.anchor_row);
  const auto aj = static_cast<std::size_t>(part.anchor_col);
  if (ai >= part_scores.dim(1) || aj >= part_scores.dim(2)) {
    throw ShapeError("deform: anchor outside part map");
  }
  return deform(part_scores, part, part_scores.dim(1) - ai, part_scores.dim(2) - aj, enabled);
}

inline void deform_backward(const DeformResult& fwd, const Tensor& grad_out,
                            Tensor* grad_scores, Tensor* grad_deformation) {
  for (std::size_t o = 0; o < grad_out.size(); ++o) {
    const double g = grad_out[o];
    if (g == 0.0) continue;
    if (grad_scores) (*grad_scores)[fwd.source[o]] += g;
    if (grad_deformation) {
      const auto phi = deformation_features(fwd.di[o], fwd.dj[o]);
      for (std::size_t k = 0; k < 4; ++k) (*grad_deformation)[k] -= g * phi[k];
    }
  }
}

// ---------------------------------------------------------------------------
// AND / OR

inline Tensor and_accumulate(const Tensor& root, const std::vector<Tensor>& deformed) {
  Tensor out = root;
  for (const Tensor& d : deformed) {
    if (d.shape() != root.shape()) {
      throw ShapeError("and_accumulate: misaligned extents " + shape_str(root.shape()) +
                       " vs " + shape_str(d.shape()));
    }
    out += d;
  }
  return out;
}

struct OrResult {
  Tensor output;          // [1,Hmax,Wmax]; 0 where no view is valid
  std::vector<int> view;  // argmax view per location, -1 where none is valid
};

/// Per-location max over views whose extents cover the location. Maps are
/// aligned at their top-left cell; absent views are passed as nullptr.
inline OrResult or_max(const std::vector<const Tensor*>& maps) {
  std::size_t Hm = 0, Wm = 0;
  for (const Tensor* m : maps) {
    if (!m) continue;
    require_chw(*m, "or_max");
    Hm = std::max(Hm, m->dim(1));
    Wm = std::max(Wm, m->dim(2));
  }
  if (Hm == 0) throw Error("or_max: no valid view");
  OrResult r{Tensor(Shape{1, Hm, Wm}), std::vector<int>(Hm * Wm, -1)};
  for (std::size_t i = 0; i < Hm; ++i) {
    for (std::size_t j = 0; j < Wm; ++j) {
      double best = -std::numeric_limits<double>::infinity();
      int bv = -1;
      for (std::size_t v = 0; v < maps.size(); ++v) {
        const Tensor* m = maps[v];
        if (!m || i >= m->dim(1) || j >= m->dim(2)) continue;
        const double x = m->at(0, i, j);
        if ((x > best || std::isnan(x)) && !std::isnan(best)) {  // NaN wins so it cannot hide
          best = x;
          bv = static_cast<int>(v);
        }
      }
      if (bv >= 0) {
        r.output[i * Wm + j] = best;
        r.view[i * Wm + j] = bv;
      }
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Recorded layers

namespace ag {

struct DeformVar {
  Var output;
  std::shared_ptr<const DeformResult> saved;
};

inline DeformVar deform(Var scores, Var deformation, const PartSpec& part,
                        std::size_t out_h, std::size_t out_w, bool enabled) {
  PartSpec geom = part;
  geom.deformation = deformation.value();
  auto saved = std::make_shared<DeformResult>(
      dpmnet::deform(scores.value(), geom, out_h, out_w, enabled));
  Tensor out = saved->output;
  Var v = scores.tape->record(
      std::move(out), {scores.id, deformation.id},
      [si = scores.id, wi = deformation.id, saved](Tape& tp, std::size_t self) {
        Tensor* ds = tp.requires_grad(si) ? &tp.grad_buffer(si) : nullptr;
        Tensor* dw = tp.requires_grad(wi) ? &tp.grad_buffer(wi) : nullptr;
        deform_backward(*saved, tp.grad(self), ds, dw);
      });
  return {v, saved};
}

struct OrVar {
  Var output;
  std::shared_ptr<const OrResult> saved;
};

/// `views[k]` is the response of view `view_index[k]`.
inline OrVar or_max(const std::vector<Var>& views, const std::vector<int>& view_index,
                    int view_count) {
  std::vector<const Tensor*> maps(static_cast<std::size_t>(view_count), nullptr);
  std::vector<std::size_t> ids(static_cast<std::size_t>(view_count), SIZE_MAX);
  for (std::size_t k = 0; k < views.size(); ++k) {
    const auto v = static_cast<std::size_t>(view_index[k]);
    maps[v] = &views[k].value();
    ids[v] = views[k].id;
  }
  auto saved = std::make_shared<OrResult>(dpmnet::or_max(maps));
  std::vector<std::size_t> inputs;
  for (const Var& v : views) inputs.push_back(v.id);
  Tensor out = saved->output;
  Var o = views.front().tape->record(
      std::move(out), inputs, [saved, ids](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        const std::size_t Wm = g.dim(2);
        for (std::size_t loc = 0; loc < g.size(); ++loc) {
          const int v = saved->view[loc];
          if (v < 0 || g[loc] == 0.0) continue;
          const std::size_t id = ids[static_cast<std::size_t>(v)];
          if (!tp.requires_grad(id)) continue;
          Tensor& dv = tp.grad_buffer(id);
          dv[(loc / Wm) * dv.dim(2) + loc % Wm] += g[loc];
        }
      });
  return {o, saved};
}

}  // namespace ag

// ---------------------------------------------------------------------------
// Class forward on a tape

struct ViewVars {
  Var root;
  std::vector<Var> parts;
  std::vector<Var> deformation;
};

struct ClassVars {
  std::vector<ViewVars> views;
};

inline ClassVars bind_class(Tape& tape, const ClassModel& cls, bool requires_grad) {
  ClassVars cv;
  for (const ViewModel& v : cls.views) {
    ViewVars vv;
    vv.root = tape.leaf(v.root, requires_grad);
    for (std::size_t p = 0; p < v.parts.size(); ++p) {
      vv.parts.push_back(tape.leaf(v.part_filters[p], requires_grad));
      vv.deformation.push_back(tape.leaf(v.parts[p].deformation, requires_grad));
    }
    cv.views.push_back(std::move(vv));
  }
  return cv;
}

struct ViewForward {
  int view = 0;
  Var root;
  std::vector<Var> part_scores;
  std::vector<ag::DeformVar> deformed;
  Var total;  // F_v
};

/// Responses of one class at one scale: per-view maps, saved offsets and
/// the OR output F with its argmax-view map.
struct ClassForward {
  std::vector<ViewForward> views;  // only views that fit at this scale
  std::optional<ag::OrVar> score;  // nullopt when no view fits
};

inline ClassForward forward_class(Var phi, const ClassModel& cls, const ClassVars& vars,
                                  bool deformation_enabled) {
  ClassForward cf;
  std::vector<Var> totals;
  std::vector<int> index;
  for (std::size_t v = 0; v < cls.views.size(); ++v) {
    const ViewModel& view = cls.views[v];
    if (!view_fits(phi.value(), view)) continue;
    const ViewVars& vv = vars.views[v];
    ViewForward vf;
    vf.view = static_cast<int>(v);
    vf.root = ag::correlate2d(phi, vv.root, 1);
    const std::size_t Ho = vf.root.value().dim(1), Wo = vf.root.value().dim(2);
    std::vector<Var> terms{vf.root};
    for (std::size_t p = 0; p < view.parts.size(); ++p) {
      Var ps = ag::correlate2d(phi, vv.parts[p], 1);
      vf.part_scores.push_back(ps);
      auto d = ag::deform(ps, vv.deformation[p], view.parts[p], Ho, Wo, deformation_enabled);
      terms.push_back(d.output);
      vf.deformed.push_back(d);
    }
    vf.total = ag::add_n(terms);
    totals.push_back(vf.total);
    index.push_back(static_cast<int>(v));
    cf.views.push_back(std::move(vf));
  }
  if (!totals.empty()) {
    cf.score = ag::or_max(totals, index, static_cast<int>(cls.views.size()));
  }
  return cf;
}

/// Cell rectangle covered by the root at (row, col) together with the nine
/// parts at their inferred positions.
inline CellRect placement_cells(const ClassModel& cls, const ClassForward& cf,
                                int view, std::size_t row, std::size_t col) {
  const ViewModel& vm = cls.views[static_cast<std::size_t>(view)];
  int r0 = static_cast<int>(row), c0 = static_cast<int>(col);
  int r1 = r0 + vm.root_height(), c1 = c0 + vm.root_width();
  for (const ViewForward& vf : cf.views) {
    if (vf.view != view) continue;
    const std::size_t Wv = vf.total.value().dim(2);
    const std::size_t o = row * Wv + col;
    for (std::size_t p = 0; p < vm.parts.size(); ++p) {
      const DeformResult& d = *vf.deformed[p].saved;
      const int pr = r0 + vm.parts[p].anchor_row + d.di[o];
      const int pc = c0 + vm.parts[p].anchor_col + d.dj[o];
      r0 = std::min(r0, pr);
      c0 = std::min(c0, pc);
      r1 = std::max(r1, pr + vm.parts[p].height);
      c1 = std::max(c1, pc + vm.parts[p].width);
    }
  }
  return {r0, c0, r1 - r0, c1 - c0};
}

// ---------------------------------------------------------------------------
// Standalone DPM pass with explicit backward

struct ViewGradients {
  Tensor root;
  std::vector<Tensor> parts;
  std::vector<Tensor> deformation;
};

struct DpmGradients {
  std::vector<std::vector<ViewGradients>> classes;  // [class][view]
  Tensor phi;
};

/// Forward of all classes on one feature map. backward_dpm takes dL/dF per
/// class and routes it through OR, AND, deformation and correlation using
/// the argmax views and offsets saved by the most recent forward; each
/// forward can be differentiated once.
class DpmPass {
 public:
  DpmPass() = default;
  DpmPass(const DpmPass&) = delete;
  DpmPass& operator=(const DpmPass&) = delete;

  void forward(const Tensor& phi, const std::vector<ClassModel>& classes,
               bool deformation_enabled = true) {
    tape_ = std::make_unique<Tape>();
    vars_.clear();
    forward_.clear();
    phi_ = tape_->leaf(phi, true);
    for (const ClassModel& c : classes) {
      vars_.push_back(bind_class(*tape_, c, true));
      forward_.push_back(forward_class(phi_, c, vars_.back(), deformation_enabled));
    }
    pending_ = true;
  }

  const ClassForward& response(std::size_t c) const { return forward_.at(c); }

  DpmGradients backward_dpm(const std::vector<Tensor>& grad_scores) {
    if (!pending_) throw Error("backward_dpm: no forward pass to differentiate");
    if (grad_scores.size() != forward_.size()) {
      throw Error("backward_dpm: expected one gradient map per class");
    }
    std::vector<std::pair<std::size_t, Tensor>> seeds;
    for (std::size_t c = 0; c < forward_.size(); ++c) {
      if (!forward_[c].score) continue;
      seeds.emplace_back(forward_[c].score->output.id, grad_scores[c]);
    }
    tape_->backward_from(std::move(seeds));
    pending_ = false;
    DpmGradients g;
    auto grad_or_zero = [](Var v) {
      return v.has_grad() ? v.grad() : Tensor(v.value().shape());
    };
    for (const ClassVars& cv : vars_) {
      std::vector<ViewGradients> views;
      for (const ViewVars& vv : cv.views) {
        ViewGradients vg{grad_or_zero(vv.root), {}, {}};
        for (std::size_t p = 0; p < vv.parts.size(); ++p) {
          vg.parts.push_back(grad_or_zero(vv.parts[p]));
          vg.deformation.push_back(grad_or_zero(vv.deformation[p]));
        }
        views.push_back(std::move(vg));
      }
      g.classes.push_back(std::move(views));
    }
    g.phi = grad_or_zero(phi_);
    return g;
  }

 private:
  std::unique_ptr<Tape> tape_;
  Var phi_;
  std::vector<ClassVars> vars_;
  std::vector<ClassForward> forward_;
  bool pending_ = false;
};

/// Random filters in [-scale, scale] for tests and initialization.
inline void randomize_filters(ClassModel& cls, std::mt19937_64& rng, double scale) {
  std::uniform_real_distribution<double> dist(-scale, scale);
  for (ViewModel& v : cls.views) {
    for (double& x : v.root.data()) x = dist(rng);
    for (Tensor& f : v.part_filters) {
      for (double& x : f.data()) x = dist(rng);
    }
  }
}

}  // namespace dpmnet
