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

// Small fully convolutional feature extractor. It is applied bottom-up over
// whole pyramid levels of any size; resolution is controlled through the
// stride of the first convolution, never by resizing filters.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "dpmnet/geometry.hpp"
#include "dpmnet/ops.hpp"
#include "dpmnet/tape.hpp"

namespace dpmnet {

struct FeatLayer {
  enum class Kind : std::uint8_t { conv = 0, relu = 1, pool = 2 };
  Kind kind = Kind::conv;
  int out_channels = 0;  // conv only
  int kernel = 1;        // conv, pool
  int stride = 1;        // conv, pool

  friend bool operator==(const FeatLayer&, const FeatLayer&) = default;
};

struct FeatNetSpec {
  int in_channels = 1;
  std::vector<FeatLayer> layers;
  int first_layer_stride = 1;  // overrides the stride of the first conv
  double input_mean = 0.0;     // subtracted from every input value

  friend bool operator==(const FeatNetSpec&, const FeatNetSpec&) = default;
};

/// Inputs centered at 0.5, then conv 8@5x5 s1 -> relu -> pool 2/2 -> conv 16@3x3 s1 -> relu -> pool 2/2
inline FeatNetSpec default_featnet_spec(int in_channels = 1) {
  using K = FeatLayer::Kind;
  FeatNetSpec s;
  s.in_channels = in_channels;
  s.layers = {{K::conv, 8, 5, 1}, {K::relu, 0, 1, 1}, {K::pool, 0, 2, 2},
              {K::conv, 16, 3, 1}, {K::relu, 0, 1, 1}, {K::pool, 0, 2, 2}};
  s.first_layer_stride = 1;
  s.input_mean = 0.5;
  return s;
}

struct ConvParams {
  Tensor weight;  // [O,C,k,k]
  Tensor bias;    // [O]
};

struct FeatNetParams {
  std::vector<ConvParams> convs;  // one per conv layer, in order
  bool trainable = true;
};

inline void set_trainable(FeatNetParams& params, bool flag) {
  params.trainable = flag;
}

inline int effective_stride(const FeatNetSpec& spec, std::size_t layer_index) {
  for (std::size_t k = 0; k < spec.layers.size(); ++k) {
    if (spec.layers[k].kind == FeatLayer::Kind::conv) {
      return k == layer_index ? spec.first_layer_stride
                              : spec.layers[layer_index].stride;
    }
  }
  return spec.layers[layer_index].stride;
}

inline std::vector<LayerGeom> geometry_layers(const FeatNetSpec& spec) {
  std::vector<LayerGeom> out;
  for (std::size_t k = 0; k < spec.layers.size(); ++k) {
    const FeatLayer& l = spec.layers[k];
    if (l.kind == FeatLayer::Kind::relu) continue;
    out.push_back({l.kind == FeatLayer::Kind::conv ? LayerKind::conv : LayerKind::pool,
                   l.kernel, effective_stride(spec, k)});
  }
  return out;
}

inline ReceptiveField featnet_geometry(const FeatNetSpec& spec) {
  return compute_geometry(geometry_layers(spec));
}

inline int output_channels(const FeatNetSpec& spec) {
  int c = spec.in_channels;
  for (const FeatLayer& l : spec.layers) {
    if (l.kind == FeatLayer::Kind::conv) c = l.out_channels;
  }
  return c;
}

inline void validate(const FeatNetSpec& spec) {
  if (spec.in_channels < 1) throw Error("featnet: in_channels must be >= 1");
  if (spec.first_layer_stride < 1) throw Error("featnet: first_layer_stride must be >= 1");
  bool any_conv = false;
  for (const FeatLayer& l : spec.layers) {
    if (l.kind == FeatLayer::Kind::conv) {
      any_conv = true;
      if (l.out_channels < 1) throw Error("featnet: conv out_channels must be >= 1");
    }
    if (l.kind != FeatLayer::Kind::relu && (l.kernel < 1 || l.stride < 1)) {
      throw Error("featnet: kernel and stride must be >= 1");
    }
  }
  if (!any_conv) throw Error("featnet: spec has no conv layer");
}

/// Zero-mean uniform weights in [-1/sqrt(fan_in), 1/sqrt(fan_in)], zero bias.
inline FeatNetParams init_featnet(const FeatNetSpec& spec, std::uint64_t seed) {
  validate(spec);
  std::mt19937_64 rng(seed);
  FeatNetParams p;
  int c = spec.in_channels;
  for (const FeatLayer& l : spec.layers) {
    if (l.kind != FeatLayer::Kind::conv) continue;
    const auto O = static_cast<std::size_t>(l.out_channels);
    const auto C = static_cast<std::size_t>(c);
    const auto k = static_cast<std::size_t>(l.kernel);
    const double a = 1.0 / std::sqrt(static_cast<double>(C * k * k));
    std::uniform_real_distribution<double> dist(-a, a);
    ConvParams cp{Tensor(Shape{O, C, k, k}), Tensor(Shape{O})};
    for (double& v : cp.weight.data()) v = dist(rng);
    p.convs.push_back(std::move(cp));
    c = l.out_channels;
  }
  return p;
}

/// Identity extractor: one 1x1 conv with unit weight, no nonlinearity.
inline std::pair<FeatNetSpec, FeatNetParams> identity_featnet(int channels) {
  FeatNetSpec s;
  s.in_channels = channels;
  s.layers = {{FeatLayer::Kind::conv, channels, 1, 1}};
  FeatNetParams p;
  const auto C = static_cast<std::size_t>(channels);
  ConvParams cp{Tensor(Shape{C, C, 1, 1}), Tensor(Shape{C})};
  for (std::size_t c = 0; c < C; ++c) cp.weight.at(c, c, 0, 0) = 1.0;
  p.convs.push_back(std::move(cp));
  return {s, p};
}

/// A feature map of one pyramid level with its pixel geometry.
struct ScaleMap {
  Tensor features;  // [C,H,W]
  ScaleGeometry geometry;
  int level = 0;
};

inline void require_extractable(const Tensor& image, const FeatNetSpec& spec) {
  require_chw(image, "featnet");
  if (static_cast<int>(image.dim(0)) != spec.in_channels) {
    throw ShapeError("featnet: image has " + std::to_string(image.dim(0)) +
                     " channels, spec expects " + std::to_string(spec.in_channels));
  }
  const int need = featnet_geometry(spec).fov;
  if (static_cast<int>(image.dim(1)) < need || static_cast<int>(image.dim(2)) < need) {
    throw ShapeError("featnet: input " + std::to_string(image.dim(1)) + "x" +
                     std::to_string(image.dim(2)) + " below required minimum " +
                     std::to_string(need) + "x" + std::to_string(need));
  }
}

/// Forward pass without recording gradients.
inline Tensor extract_features(const Tensor& image, const FeatNetSpec& spec,
                               const FeatNetParams& params) {
  require_extractable(image, spec);
  Tensor x = image;
  if (spec.input_mean != 0.0) {
    for (double& v : x.data()) v -= spec.input_mean;
  }
  std::size_t conv = 0;
  for (std::size_t k = 0; k < spec.layers.size(); ++k) {
    const FeatLayer& l = spec.layers[k];
    switch (l.kind) {
      case FeatLayer::Kind::conv: {
        const ConvParams& cp = params.convs.at(conv++);
        x = add_bias(correlate2d(x, cp.weight, effective_stride(spec, k)), cp.bias);
        break;
      }
      case FeatLayer::Kind::relu:
        x = relu(x);
        break;
      case FeatLayer::Kind::pool:
        x = maxpool2d(x, l.kernel, l.stride).output;
        break;
    }
  }
  return x;
}

inline ScaleMap extract(const PyramidLevel& level, const FeatNetSpec& spec,
                        const FeatNetParams& params) {
  return {extract_features(level.image, spec, params),
          make_scale_geometry(featnet_geometry(spec), level), level.index};
}

/// Parameter leaves of one forward pass, aligned with FeatNetParams::convs.
struct FeatNetVars {
  std::vector<Var> weights;
  std::vector<Var> biases;
};

inline FeatNetVars bind_params(Tape& tape, const FeatNetParams& params,
                               bool requires_grad) {
  FeatNetVars v;
  for (const ConvParams& cp : params.convs) {
    v.weights.push_back(tape.leaf(cp.weight, requires_grad));
    v.biases.push_back(tape.leaf(cp.bias, requires_grad));
  }
  return v;
}

/// Recorded forward pass; returns the phi_A node.
inline Var extract(Var image, const FeatNetSpec& spec, const FeatNetVars& vars) {
  require_extractable(image.value(), spec);
  Var x = spec.input_mean != 0.0 ? ag::shift(image, -spec.input_mean) : image;
  std::size_t conv = 0;
  for (std::size_t k = 0; k < spec.layers.size(); ++k) {
    const FeatLayer& l = spec.layers[k];
    switch (l.kind) {
      case FeatLayer::Kind::conv:
        x = ag::add_bias(ag::correlate2d(x, vars.weights.at(conv), effective_stride(spec, k)),
                         vars.biases.at(conv));
        ++conv;
        break;
      case FeatLayer::Kind::relu:
        x = ag::relu(x);
        break;
      case FeatLayer::Kind::pool:
        x = ag::maxpool2d(x, l.kernel, l.stride);
        break;
    }
  }
  return x;
}

}  // namespace dpmnet
