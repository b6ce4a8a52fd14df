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

// Image -> pyramid -> feature maps -> class response maps -> assignments.

#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dpmnet/dpm.hpp"
#include "dpmnet/featnet.hpp"
#include "dpmnet/loss.hpp"
#include "dpmnet/nms.hpp"

namespace dpmnet {

/// Class k of `classes` carries label k + 1.
struct Model {
  FeatNetSpec featnet_spec;
  FeatNetParams featnet;
  PyramidSpec pyramid;
  std::vector<ClassModel> classes;
};

inline void validate(const Model& m) {
  validate(m.featnet_spec);
  if (m.classes.empty()) throw Error("model has no classes");
  const int channels = output_channels(m.featnet_spec);
  for (std::size_t k = 0; k < m.classes.size(); ++k) {
    const ClassModel& c = m.classes[k];
    if (c.label != static_cast<int>(k) + 1) throw Error("class labels must be 1..K in order");
    validate(c);
    for (const ViewModel& v : c.views) {
      if (v.channels() != channels) {
        throw ShapeError("class '" + c.name + "' filters have " + std::to_string(v.channels()) +
                         " channels, features have " + std::to_string(channels));
      }
    }
  }
  if (m.pyramid.min_dim < featnet_geometry(m.featnet_spec).fov) {
    throw Error("pyramid min_dim is below the network's minimum input size");
  }
}

struct ClassSetup {
  std::string name;
  std::vector<ViewShape> views;
};

/// Fresh model: featnet from `seed`, DPM filters uniform in [-0.01, 0.01].
inline Model init_model(const FeatNetSpec& spec, const PyramidSpec& pyramid,
                        const std::vector<ClassSetup>& classes, std::uint64_t seed,
                        std::array<double, 4> deformation = {0.0, 0.0, 0.05, 0.05}) {
  Model m;
  m.featnet_spec = spec;
  m.featnet = init_featnet(spec, seed);
  m.pyramid = pyramid;
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  const int channels = output_channels(spec);
  for (std::size_t k = 0; k < classes.size(); ++k) {
    ClassModel c;
    c.label = static_cast<int>(k) + 1;
    c.name = classes[k].name;
    for (const ViewShape& vs : classes[k].views) c.views.push_back(make_view(channels, vs, deformation));
    randomize_filters(c, rng, 0.01);
    m.classes.push_back(std::move(c));
  }
  validate(m);
  return m;
}

inline std::vector<ScaleMap> extract_pyramid(const Model& m, const Tensor& image) {
  std::vector<ScaleMap> out;
  const Pyramid pyr = build_pyramid(image, m.pyramid);
  for (const PyramidLevel& lvl : pyr.levels) out.push_back(extract(lvl, m.featnet_spec, m.featnet));
  return out;
}

struct ForwardOptions {
  bool featnet_grad = false;
  bool dpm_grad = false;
  bool deformation = true;
};

struct LevelPass {
  ScaleGeometry geometry;
  Var phi;
  std::vector<ClassForward> classes;
};

/// One recorded forward pass over every pyramid level of an image.
struct ImagePass {
  std::unique_ptr<Tape> tape;
  FeatNetVars featnet;
  std::vector<ClassVars> classes;
  std::vector<LevelPass> levels;
  double width = 0.0, height = 0.0;
};

/// Runs the network on an image. With `cached` (one ScaleMap per pyramid
/// level, from extract_pyramid) the feature extractor is skipped.
inline ImagePass forward_image(const Model& m, const Tensor& image, const ForwardOptions& opt,
                               const std::vector<ScaleMap>* cached = nullptr) {
  ImagePass pass;
  pass.tape = std::make_unique<Tape>();
  Tape& tape = *pass.tape;
  pass.width = static_cast<double>(image.dim(2));
  pass.height = static_cast<double>(image.dim(1));
  for (const ClassModel& c : m.classes) pass.classes.push_back(bind_class(tape, c, opt.dpm_grad));
  const ReceptiveField rf = featnet_geometry(m.featnet_spec);
  if (cached) {
    for (const ScaleMap& sm : *cached) {
      LevelPass lp;
      lp.geometry = sm.geometry;
      lp.phi = tape.constant(sm.features);
      pass.levels.push_back(std::move(lp));
    }
  } else {
    pass.featnet = bind_params(tape, m.featnet, opt.featnet_grad);
    const Pyramid pyr = build_pyramid(image, m.pyramid);
    for (const PyramidLevel& lvl : pyr.levels) {
      LevelPass lp;
      lp.geometry = make_scale_geometry(rf, lvl);
      Var img = tape.constant(lvl.image);
      lp.phi = extract(img, m.featnet_spec, pass.featnet);
      pass.levels.push_back(std::move(lp));
    }
  }
  for (LevelPass& lp : pass.levels) {
    for (std::size_t k = 0; k < m.classes.size(); ++k) {
      lp.classes.push_back(forward_class(lp.phi, m.classes[k], pass.classes[k], opt.deformation));
    }
  }
  return pass;
}

/// A0: one assignment per (scale, location, class) that has a valid view.
inline std::vector<Assignment> emit_assignments(const Model& m, const ImagePass& pass) {
  std::vector<Assignment> out;
  for (std::size_t s = 0; s < pass.levels.size(); ++s) {
    const LevelPass& lp = pass.levels[s];
    for (std::size_t k = 0; k < m.classes.size(); ++k) {
      const ClassForward& cf = lp.classes[k];
      if (!cf.score) continue;
      const Tensor& F = cf.score->output.value();
      const std::size_t Hf = F.dim(1), Wf = F.dim(2);
      for (std::size_t i = 0; i < Hf; ++i) {
        for (std::size_t j = 0; j < Wf; ++j) {
          const int v = cf.score->saved->view[i * Wf + j];
          if (v < 0) continue;
          Assignment a;
          a.box = clip_box(project_box(placement_cells(m.classes[k], cf, v, i, j), lp.geometry),
                           pass.width, pass.height);
          a.label = static_cast<int>(k) + 1;
          a.score = F[i * Wf + j];
          a.scale = static_cast<int>(s);
          a.row = static_cast<int>(i);
          a.col = static_cast<int>(j);
          a.view = v;
          out.push_back(a);
        }
      }
    }
  }
  return out;
}

/// Gradients of every model parameter, shaped like the model.
struct ModelGradients {
  std::vector<ConvParams> featnet;
  std::vector<std::vector<ViewGradients>> classes;
};

/// Seeds dL/dF from per-candidate response gradients and runs the tape
/// backward. Candidate k of `candidates` must come from emit_assignments on
/// this pass.
inline ModelGradients backward_image(const Model& m, ImagePass& pass,
                                     std::span<const Assignment> candidates,
                                     std::span<const double> grad) {
  std::vector<std::vector<Tensor>> maps(pass.levels.size());
  for (std::size_t s = 0; s < pass.levels.size(); ++s) {
    for (const ClassForward& cf : pass.levels[s].classes) {
      maps[s].push_back(cf.score ? Tensor(cf.score->output.value().shape()) : Tensor());
    }
  }
  for (std::size_t k = 0; k < candidates.size(); ++k) {
    if (grad[k] == 0.0) continue;
    const Assignment& a = candidates[k];
    Tensor& g = maps[static_cast<std::size_t>(a.scale)][static_cast<std::size_t>(a.label - 1)];
    g[static_cast<std::size_t>(a.row) * g.dim(2) + static_cast<std::size_t>(a.col)] += grad[k];
  }
  std::vector<std::pair<std::size_t, Tensor>> seeds;
  for (std::size_t s = 0; s < pass.levels.size(); ++s) {
    for (std::size_t k = 0; k < m.classes.size(); ++k) {
      const ClassForward& cf = pass.levels[s].classes[k];
      if (cf.score) seeds.emplace_back(cf.score->output.id, std::move(maps[s][k]));
    }
  }
  pass.tape->backward_from(std::move(seeds));

  auto grad_or_zero = [](Var v) { return v.has_grad() ? v.grad() : Tensor(v.value().shape()); };
  ModelGradients g;
  for (std::size_t c = 0; c < pass.featnet.weights.size(); ++c) {
    g.featnet.push_back({grad_or_zero(pass.featnet.weights[c]), grad_or_zero(pass.featnet.biases[c])});
  }
  for (const ClassVars& cv : pass.classes) {
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
  return g;
}

struct DetectOptions {
  OverlapPolicy policy;
  double response_floor = -1.0;
};

/// Test-time inference: forward, candidates above the floor, suppression.
inline std::vector<Assignment> detect(const Model& m, const Tensor& image,
                                      const DetectOptions& opt = {}) {
  ImagePass pass = forward_image(m, image, {});
  std::vector<Assignment> pool;
  for (const Assignment& a : emit_assignments(m, pass)) {
    if (a.score > opt.response_floor) pool.push_back(a);
  }
  std::vector<Assignment> out;
  for (std::size_t k : suppress_indices(pool, opt.policy)) out.push_back(pool[k]);
  return out;
}

}  // namespace dpmnet
