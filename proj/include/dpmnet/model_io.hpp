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

// Versioned binary model and checkpoint files. Little-endian throughout:
//
//   "DPMNET\0\0" u32 version u32 flags(bit 0: train state present)
//   featnet spec, featnet params, pyramid spec, classes, [train state]
//
// Doubles are stored as raw IEEE-754 bits, so save/load round-trips exactly.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "dpmnet/trainer.hpp"

namespace dpmnet {

static_assert(std::endian::native == std::endian::little, "model files assume a little-endian host");

constexpr std::uint32_t kModelFileVersion = 1;
inline constexpr char kModelMagic[8] = {'D', 'P', 'M', 'N', 'E', 'T', '\0', '\0'};

class VersionError : public Error {
 public:
  using Error::Error;
};

namespace io {

class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}
  template <class T>
  void pod(const T& v) {
    os_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void u32(std::uint32_t v) { pod(v); }
  void i32(std::int32_t v) { pod(v); }
  void u64(std::uint64_t v) { pod(v); }
  void f64(double v) { pod(v); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    os_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void tensor(const Tensor& t) {
    u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) u64(d);
    os_.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  }

 private:
  std::ostream& os_;
};

class Reader {
 public:
  explicit Reader(std::istream& is) : is_(is) {}
  template <class T>
  T pod() {
    T v{};
    is_.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is_) throw Error("model file is truncated");
    return v;
  }
  std::uint32_t u32() { return pod<std::uint32_t>(); }
  std::int32_t i32() { return pod<std::int32_t>(); }
  std::uint64_t u64() { return pod<std::uint64_t>(); }
  double f64() { return pod<double>(); }
  std::string str() {
    const std::uint32_t n = u32();
    if (n > (1u << 20)) throw Error("model file: implausible string length");
    std::string s(n, '\0');
    is_.read(s.data(), n);
    if (!is_) throw Error("model file is truncated");
    return s;
  }
  Tensor tensor() {
    const std::uint32_t rank = u32();
    if (rank == 0 || rank > 8) throw Error("model file: bad tensor rank");
    Shape shape(rank);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = u64();
      if (d == 0 || d > (1u << 24)) throw Error("model file: bad tensor extent");
      n *= d;
    }
    if (n > (1u << 26)) throw Error("model file: tensor too large");
    std::vector<double> data(n);
    is_.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!is_) throw Error("model file is truncated");
    return Tensor(std::move(shape), std::move(data));
  }

 private:
  std::istream& is_;
};

}  // namespace io

inline void write_model(std::ostream& os, const Model& m, const TrainState* state = nullptr) {
  io::Writer w(os);
  os.write(kModelMagic, sizeof(kModelMagic));
  w.u32(kModelFileVersion);
  w.u32(state ? 1u : 0u);

  const FeatNetSpec& fs = m.featnet_spec;
  w.i32(fs.in_channels);
  w.i32(fs.first_layer_stride);
  w.f64(fs.input_mean);
  w.u32(static_cast<std::uint32_t>(fs.layers.size()));
  for (const FeatLayer& l : fs.layers) {
    w.u32(static_cast<std::uint32_t>(l.kind));
    w.i32(l.out_channels);
    w.i32(l.kernel);
    w.i32(l.stride);
  }
  w.u32(m.featnet.trainable ? 1u : 0u);
  w.u32(static_cast<std::uint32_t>(m.featnet.convs.size()));
  for (const ConvParams& c : m.featnet.convs) {
    w.tensor(c.weight);
    w.tensor(c.bias);
  }
  w.i32(m.pyramid.intervals_per_octave);
  w.i32(m.pyramid.min_dim);

  w.u32(static_cast<std::uint32_t>(m.classes.size()));
  for (const ClassModel& c : m.classes) {
    w.i32(c.label);
    w.str(c.name);
    w.u32(static_cast<std::uint32_t>(c.views.size()));
    for (const ViewModel& v : c.views) {
      w.f64(v.aspect);
      w.tensor(v.root);
      w.u32(static_cast<std::uint32_t>(v.parts.size()));
      for (std::size_t p = 0; p < v.parts.size(); ++p) {
        const PartSpec& ps = v.parts[p];
        w.i32(ps.anchor_row);
        w.i32(ps.anchor_col);
        w.i32(ps.height);
        w.i32(ps.width);
        w.i32(ps.radius);
        w.tensor(ps.deformation);
        w.tensor(v.part_filters[p]);
      }
    }
  }

  if (state) {
    w.u32(state->pretrained ? 1u : 0u);
    w.i32(state->epoch);
    w.u64(state->step);
    w.u32(static_cast<std::uint32_t>(state->history.size()));
    for (const EpochMetrics& e : state->history) {
      w.i32(e.epoch);
      w.f64(e.lr);
      w.f64(e.mean_loss);
      w.f64(e.mean_cost_predicted);
      w.f64(e.mean_cost_constrained);
      w.f64(e.val_map);
      w.i32(e.rejected);
      w.i32(e.degenerate);
    }
  }
  if (!os) throw Error("model file: write failed");
}

/// Reads a model; a train-state section, when present, goes to `state`
/// (whose model member is filled too).
inline Model read_model(std::istream& is, TrainState* state = nullptr, bool* has_state = nullptr) {
  io::Reader r(is);
  char magic[sizeof(kModelMagic)];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kModelMagic, sizeof(magic)) != 0) {
    throw Error("not a dpmnet model file");
  }
  const std::uint32_t version = r.u32();
  if (version != kModelFileVersion) {
    throw VersionError("model file version " + std::to_string(version) + " is not supported (expected " +
                       std::to_string(kModelFileVersion) + ")");
  }
  const std::uint32_t flags = r.u32();

  Model m;
  FeatNetSpec& fs = m.featnet_spec;
  fs.in_channels = r.i32();
  fs.first_layer_stride = r.i32();
  fs.input_mean = r.f64();
  const std::uint32_t n_layers = r.u32();
  if (n_layers > 1024) throw Error("model file: implausible layer count");
  for (std::uint32_t k = 0; k < n_layers; ++k) {
    FeatLayer l;
    const std::uint32_t kind = r.u32();
    if (kind > 2) throw Error("model file: unknown layer kind " + std::to_string(kind));
    l.kind = static_cast<FeatLayer::Kind>(kind);
    l.out_channels = r.i32();
    l.kernel = r.i32();
    l.stride = r.i32();
    fs.layers.push_back(l);
  }
  m.featnet.trainable = r.u32() != 0;
  const std::uint32_t n_convs = r.u32();
  if (n_convs > 1024) throw Error("model file: implausible conv count");
  for (std::uint32_t k = 0; k < n_convs; ++k) {
    ConvParams c;
    c.weight = r.tensor();
    c.bias = r.tensor();
    m.featnet.convs.push_back(std::move(c));
  }
  m.pyramid.intervals_per_octave = r.i32();
  m.pyramid.min_dim = r.i32();

  const std::uint32_t n_classes = r.u32();
  if (n_classes > 4096) throw Error("model file: implausible class count");
  for (std::uint32_t k = 0; k < n_classes; ++k) {
    ClassModel c;
    c.label = r.i32();
    c.name = r.str();
    const std::uint32_t n_views = r.u32();
    if (n_views > 1024) throw Error("model file: implausible view count");
    for (std::uint32_t v = 0; v < n_views; ++v) {
      ViewModel vm;
      vm.aspect = r.f64();
      vm.root = r.tensor();
      const std::uint32_t n_parts = r.u32();
      if (n_parts > 1024) throw Error("model file: implausible part count");
      for (std::uint32_t p = 0; p < n_parts; ++p) {
        PartSpec ps;
        ps.anchor_row = r.i32();
        ps.anchor_col = r.i32();
        ps.height = r.i32();
        ps.width = r.i32();
        ps.radius = r.i32();
        ps.deformation = r.tensor();
        vm.parts.push_back(std::move(ps));
        vm.part_filters.push_back(r.tensor());
      }
      c.views.push_back(std::move(vm));
    }
    m.classes.push_back(std::move(c));
  }

  const bool stateful = (flags & 1u) != 0;
  if (has_state) *has_state = stateful;
  if (stateful) {
    TrainState st;
    st.pretrained = r.u32() != 0;
    st.epoch = r.i32();
    st.step = r.u64();
    const std::uint32_t n = r.u32();
    if (n > (1u << 20)) throw Error("model file: implausible history length");
    for (std::uint32_t k = 0; k < n; ++k) {
      EpochMetrics e;
      e.epoch = r.i32();
      e.lr = r.f64();
      e.mean_loss = r.f64();
      e.mean_cost_predicted = r.f64();
      e.mean_cost_constrained = r.f64();
      e.val_map = r.f64();
      e.rejected = r.i32();
      e.degenerate = r.i32();
      st.history.push_back(e);
    }
    if (state) {
      *state = std::move(st);
      state->model = m;
    }
  }
  validate(m);
  return m;
}

inline void save_model(const std::string& path, const Model& m, const TrainState* state = nullptr) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write '" + path + "'");
  write_model(os, m, state);
}

inline Model load_model(const std::string& path, TrainState* state = nullptr, bool* has_state = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot read '" + path + "'");
  return read_model(is, state, has_state);
}

inline void save_checkpoint(const std::string& path, const TrainState& st) { save_model(path, st.model, &st); }

inline TrainState load_checkpoint(const std::string& path) {
  TrainState st;
  bool has = false;
  Model m = load_model(path, &st, &has);
  if (!has) throw Error("'" + path + "' is a model file without training state, not a checkpoint");
  st.model = std::move(m);
  return st;
}

}  // namespace dpmnet
