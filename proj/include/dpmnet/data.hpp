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

// Synthetic part-composed scenes and their manifests.
//
// An object is a dark root blob with nine glyphs ("parts") placed on a 3x3
// grid over it, each displaced by Gaussian jitter. Each class has several
// aspect-ratio variants that share one glyph layout. Object boxes are laid
// on the feature-cell grid of a randomly chosen pyramid level so that a
// detector with that grid can reach them.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dpmnet/geometry.hpp"
#include "dpmnet/loss.hpp"
#include "dpmnet/nms.hpp"
#include "dpmnet/raster.hpp"

namespace dpmnet {

enum class Glyph : int { bright_square = 0, dark_square, bright_plus, dark_plus, bright_ring, dark_bar };
constexpr int kGlyphKinds = 6;

struct ObjectView {
  int rows = 4, cols = 4;  // extent in grid cells
};

struct ObjectClassSpec {
  std::string name;
  std::array<Glyph, 9> layout{};  // row-major 3x3
  std::vector<ObjectView> views;
  double body = 0.3;  // root blob intensity
};

struct SceneSpec {
  int width = 64, height = 64;
  std::vector<ObjectClassSpec> classes;
  int objects_per_image = 2;
  double part_jitter = 1.0;      // sigma, pixels at level scale
  double position_jitter = 0.5;  // sigma of the whole object, pixels
  double occlusion = 0.0;        // probability an object loses one part region
  double clutter = 0.0;          // distractor glyphs per 1000 px^2
  double noise = 0.03;           // pixel noise sigma
  double background = 0.55;
  std::uint64_t seed = 1;
  // Object boxes snap to level pixels align_offset + k * align_stride.
  int align_stride = 4;
  int align_offset = 4;
  PyramidSpec pyramid;

  void validate() const {
    if (width < 8 || height < 8) throw Error("scene: image too small");
    if (classes.empty()) throw Error("scene: no classes");
    if (objects_per_image < 0) throw Error("scene: negative object count");
    for (const auto& c : classes) {
      if (c.views.empty()) throw Error("scene: class '" + c.name + "' has no views");
    }
    if (part_jitter < 0 || position_jitter < 0 || noise < 0 || clutter < 0 ||
        occlusion < 0 || occlusion > 1) {
      throw Error("scene: invalid jitter/noise/clutter/occlusion");
    }
  }
};

/// Two classes with square and elongated variants.
inline std::vector<ObjectClassSpec> desk_classes() {
  using G = Glyph;
  ObjectClassSpec a{"kite",
                    {G::bright_square, G::dark_bar, G::bright_square,
                     G::dark_bar, G::bright_plus, G::dark_bar,
                     G::bright_square, G::dark_bar, G::bright_square},
                    {{4, 4}, {3, 6}}, 0.3};
  ObjectClassSpec b{"wheel",
                    {G::bright_ring, G::bright_square, G::bright_ring,
                     G::dark_square, G::dark_plus, G::dark_square,
                     G::bright_ring, G::bright_square, G::bright_ring},
                    {{4, 4}, {6, 3}}, 0.3};
  return {a, b};
}

struct PartPlacement {
  Glyph glyph = Glyph::bright_square;
  double cx = 0, cy = 0;  // glyph center, image pixels
  int size = 3;
  bool occluded = false;
};

struct ObjectInstance {
  int class_index = 0;
  int view = 0;
  int x1 = 0, y1 = 0, x2 = 0, y2 = 0;  // integer pixel box
  double body = 0.3;
  std::array<PartPlacement, 9> parts{};
};

struct SceneObjectRecord {
  std::string class_name;
  Box box;
};

struct Annotation {
  std::string image_id;
  std::vector<SceneObjectRecord> objects;
};

struct Sample {
  std::string image_id;
  Raster raster;
  std::vector<ObjectInstance> instances;
};

struct Dataset {
  int width = 0, height = 0;
  std::vector<std::string> class_names;
  std::vector<Sample> samples;
  std::vector<Annotation> annotations;
};

inline void draw_rect(std::vector<double>& canvas, int W, int H, int x1, int y1, int x2, int y2,
                      double v) {
  for (int y = std::max(0, y1); y < std::min(H, y2); ++y) {
    for (int x = std::max(0, x1); x < std::min(W, x2); ++x) {
      canvas[static_cast<std::size_t>(y * W + x)] = v;
    }
  }
}

inline void draw_glyph(std::vector<double>& canvas, int W, int H, Glyph g, double cx, double cy,
                       int size) {
  const int x0 = static_cast<int>(std::lround(cx - size / 2.0));
  const int y0 = static_cast<int>(std::lround(cy - size / 2.0));
  const int mid = size / 2;
  for (int u = 0; u < size; ++u) {
    for (int v = 0; v < size; ++v) {
      const int y = y0 + u, x = x0 + v;
      if (x < 0 || y < 0 || x >= W || y >= H) continue;
      double val = -1.0;
      switch (g) {
        case Glyph::bright_square: val = 0.95; break;
        case Glyph::dark_square: val = 0.0; break;
        case Glyph::bright_plus:
          if (u == mid || v == mid) val = 0.95;
          break;
        case Glyph::dark_plus:
          if (u == mid || v == mid) val = 0.0;
          break;
        case Glyph::bright_ring:
          if (u == 0 || v == 0 || u == size - 1 || v == size - 1) val = 0.95;
          break;
        case Glyph::dark_bar:
          if (u == mid) val = 0.0;
          break;
      }
      if (val >= 0.0) canvas[static_cast<std::size_t>(y * W + x)] = val;
    }
  }
}

inline void render_object(std::vector<double>& canvas, int W, int H, const ObjectInstance& obj) {
  draw_rect(canvas, W, H, obj.x1, obj.y1, obj.x2, obj.y2, obj.body);
  for (const PartPlacement& p : obj.parts) {
    if (!p.occluded) draw_glyph(canvas, W, H, p.glyph, p.cx, p.cy, p.size);
  }
}

/// Nominal factors of the pyramid levels built for a W x H image.
inline std::vector<double> level_factors(int W, int H, const PyramidSpec& p) {
  if (std::min(W, H) < p.min_dim) return {1.0};
  std::vector<double> out;
  for (int i = 0;; ++i) {
    const double f = std::pow(2.0, -static_cast<double>(i) / p.intervals_per_octave);
    if (static_cast<int>(std::min(pyramid_round(H * f), pyramid_round(W * f))) < p.min_dim) break;
    out.push_back(f);
  }
  return out;
}

namespace detail {

inline double sample_clamped_normal(std::mt19937_64& rng, double sigma, double limit) {
  if (sigma <= 0.0) return 0.0;
  std::normal_distribution<double> n(0.0, sigma);
  return std::clamp(n(rng), -limit, limit);
}

inline bool boxes_clear(const ObjectInstance& a, const ObjectInstance& b, int margin) {
  return a.x2 + margin <= b.x1 || b.x2 + margin <= a.x1 || a.y2 + margin <= b.y1 ||
         b.y2 + margin <= a.y1;
}

/// Places one object of the given class and view on a random pyramid level.
inline bool place_object(const SceneSpec& spec, int cls, int view, std::mt19937_64& rng,
                         ObjectInstance& out) {
  const ObjectClassSpec& cs = spec.classes[static_cast<std::size_t>(cls)];
  const ObjectView& ov = cs.views[static_cast<std::size_t>(view)];
  const std::vector<double> factors = level_factors(spec.width, spec.height, spec.pyramid);
  std::uniform_int_distribution<std::size_t> pick_level(0, factors.size() - 1);
  const std::size_t li = pick_level(rng);
  const double f = factors[li];
  const double lw = static_cast<double>(pyramid_round(spec.width * f));
  const double lh = static_cast<double>(pyramid_round(spec.height * f));
  const double sx = spec.width / lw, sy = spec.height / lh;
  const int bw = ov.cols * spec.align_stride, bh = ov.rows * spec.align_stride;
  const int max_col = static_cast<int>(std::floor((lw - spec.align_offset - bw) / spec.align_stride));
  const int max_row = static_cast<int>(std::floor((lh - spec.align_offset - bh) / spec.align_stride));
  if (max_col < 0 || max_row < 0) return false;
  const int col = std::uniform_int_distribution<int>(0, max_col)(rng);
  const int row = std::uniform_int_distribution<int>(0, max_row)(rng);
  const double jx = sample_clamped_normal(rng, spec.position_jitter, 2.0);
  const double jy = sample_clamped_normal(rng, spec.position_jitter, 2.0);
  const double fx1 = (spec.align_offset + col * spec.align_stride) * sx + jx;
  const double fy1 = (spec.align_offset + row * spec.align_stride) * sy + jy;
  out.class_index = cls;
  out.view = view;
  out.body = cs.body;
  out.x1 = static_cast<int>(std::lround(fx1));
  out.y1 = static_cast<int>(std::lround(fy1));
  out.x2 = out.x1 + static_cast<int>(std::lround(bw * sx));
  out.y2 = out.y1 + static_cast<int>(std::lround(bh * sy));
  if (out.x1 < 0 || out.y1 < 0 || out.x2 > spec.width || out.y2 > spec.height) return false;
  const double cw = (out.x2 - out.x1) / 3.0, ch = (out.y2 - out.y1) / 3.0;
  const int gsize = std::max(3, static_cast<int>(std::lround(std::min(cw, ch) * 0.75)));
  for (int gi = 0; gi < 3; ++gi) {
    for (int gj = 0; gj < 3; ++gj) {
      PartPlacement& p = out.parts[static_cast<std::size_t>(gi * 3 + gj)];
      p.glyph = cs.layout[static_cast<std::size_t>(gi * 3 + gj)];
      p.size = gsize;
      // jitter stays inside the part's own grid cell
      const double lim_x = std::max(0.0, (cw - gsize) / 2.0);
      const double lim_y = std::max(0.0, (ch - gsize) / 2.0);
      p.cx = out.x1 + (gj + 0.5) * cw + sample_clamped_normal(rng, spec.part_jitter * sx, lim_x);
      p.cy = out.y1 + (gi + 0.5) * ch + sample_clamped_normal(rng, spec.part_jitter * sy, lim_y);
    }
  }
  return true;
}

}  // namespace detail

inline std::string image_id_for(std::size_t index) {
  std::ostringstream os;
  os << std::setw(6) << std::setfill('0') << index;
  return os.str();
}

/// Renders one scene with exactly `count` objects, or nullopt-equivalent
/// false when placement fails after bounded retries.
inline bool generate_scene(const SceneSpec& spec, std::size_t image_index, int count,
                           std::mt19937_64& rng, Sample& out) {
  const int W = spec.width, H = spec.height;
  const int K = static_cast<int>(spec.classes.size());
  std::vector<ObjectInstance> objs;
  for (int k = 0; k < count; ++k) {
    const int cls = static_cast<int>((image_index * static_cast<std::size_t>(spec.objects_per_image) +
                                      static_cast<std::size_t>(k)) % static_cast<std::size_t>(K));
    const auto& views = spec.classes[static_cast<std::size_t>(cls)].views;
    const int view = std::uniform_int_distribution<int>(0, static_cast<int>(views.size()) - 1)(rng);
    bool placed = false;
    for (int attempt = 0; attempt < 50 && !placed; ++attempt) {
      ObjectInstance cand;
      if (!detail::place_object(spec, cls, view, rng, cand)) continue;
      bool clear = true;
      for (const auto& o : objs) clear = clear && detail::boxes_clear(o, cand, 2);
      if (clear) {
        objs.push_back(cand);
        placed = true;
      }
    }
    if (!placed) return false;
  }
  std::vector<double> canvas(static_cast<std::size_t>(W * H), spec.background);
  // clutter: loose glyphs away from objects
  const int n_clutter = static_cast<int>(std::lround(spec.clutter * W * H / 1000.0));
  std::uniform_int_distribution<int> gk(0, kGlyphKinds - 1);
  std::uniform_real_distribution<double> ux(0.0, W), uy(0.0, H);
  std::uniform_int_distribution<int> gs(3, 5);
  for (int c = 0; c < n_clutter; ++c) {
    const auto g = static_cast<Glyph>(gk(rng));
    const double cx = ux(rng), cy = uy(rng);
    const int size = gs(rng);
    bool inside = false;
    for (const auto& o : objs) {
      inside = inside || (cx + size > o.x1 - 1 && cx - size < o.x2 + 1 && cy + size > o.y1 - 1 &&
                          cy - size < o.y2 + 1);
    }
    if (!inside) draw_glyph(canvas, W, H, g, cx, cy, size);
  }
  std::bernoulli_distribution occl(spec.occlusion);
  std::uniform_int_distribution<int> which(0, 8);
  for (auto& o : objs) {
    if (occl(rng)) o.parts[static_cast<std::size_t>(which(rng))].occluded = true;
    render_object(canvas, W, H, o);
  }
  Raster r(W, H, 1);
  std::normal_distribution<double> noise(0.0, spec.noise > 0 ? spec.noise : 1.0);
  for (std::size_t p = 0; p < canvas.size(); ++p) {
    const double v = canvas[p] + (spec.noise > 0 ? noise(rng) : 0.0);
    r.pixels[p] = quantize(v);
  }
  out.image_id = image_id_for(image_index);
  out.raster = std::move(r);
  out.instances = std::move(objs);
  return true;
}

inline Annotation annotation_of(const SceneSpec& spec, const Sample& s) {
  Annotation a{s.image_id, {}};
  for (const auto& o : s.instances) {
    a.objects.push_back({spec.classes[static_cast<std::size_t>(o.class_index)].name,
                         Box{static_cast<double>(o.x1), static_cast<double>(o.y1),
                             static_cast<double>(o.x2), static_cast<double>(o.y2)}});
  }
  return a;
}

/// Deterministic under spec.seed. An image whose objects cannot be placed
/// is regenerated with one object fewer.
inline Dataset generate(const SceneSpec& spec, std::size_t n_images) {
  spec.validate();
  Dataset ds;
  ds.width = spec.width;
  ds.height = spec.height;
  for (const auto& c : spec.classes) ds.class_names.push_back(c.name);
  for (std::size_t i = 0; i < n_images; ++i) {
    std::mt19937_64 rng(spec.seed * 0x100000001b3ULL + i);
    Sample s;
    for (int count = spec.objects_per_image; count >= 0; --count) {
      if (generate_scene(spec, i, count, rng, s)) break;
    }
    ds.annotations.push_back(annotation_of(spec, s));
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

inline std::vector<GroundTruth> ground_truth(const Dataset& ds, std::size_t i) {
  std::vector<GroundTruth> out;
  for (const auto& o : ds.annotations[i].objects) {
    const auto it = std::find(ds.class_names.begin(), ds.class_names.end(), o.class_name);
    if (it == ds.class_names.end()) throw Error("unknown class '" + o.class_name + "'");
    out.push_back({o.box, static_cast<int>(it - ds.class_names.begin()) + 1});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifest:
//   dpmnet-manifest 1 <width> <height>
//   <image path> [<class> <x1> <y1> <x2> <y2>]...

constexpr int kManifestVersion = 1;

struct ManifestEntry {
  std::string path;  // relative to the manifest directory
  std::vector<SceneObjectRecord> objects;
};

struct Manifest {
  int width = 0, height = 0;
  std::vector<ManifestEntry> entries;
};

inline void write_manifest(std::ostream& os, const Manifest& m) {
  os << "dpmnet-manifest " << kManifestVersion << ' ' << m.width << ' ' << m.height << '\n';
  for (const auto& e : m.entries) {
    os << e.path;
    for (const auto& o : e.objects) {
      os << ' ' << o.class_name << ' ' << format_double(o.box.x1) << ' ' << format_double(o.box.y1)
         << ' ' << format_double(o.box.x2) << ' ' << format_double(o.box.y2);
    }
    os << '\n';
  }
}

inline Manifest read_manifest(std::istream& is) {
  Manifest m;
  std::string line;
  if (!std::getline(is, line)) throw Error("manifest: empty file");
  {
    std::istringstream hs(line);
    std::string magic;
    int version = 0;
    if (!(hs >> magic >> version >> m.width >> m.height) || magic != "dpmnet-manifest") {
      throw Error("manifest: bad header");
    }
    if (version != kManifestVersion) {
      throw Error("manifest: unsupported version " + std::to_string(version));
    }
  }
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    ManifestEntry e;
    ls >> e.path;
    std::vector<std::string> tok;
    for (std::string t; ls >> t;) tok.push_back(t);
    if (tok.size() % 5 != 0) {
      throw Error("manifest line " + std::to_string(lineno) + ": incomplete object group");
    }
    for (std::size_t k = 0; k < tok.size(); k += 5) {
      e.objects.push_back({tok[k], Box{parse_double(tok[k + 1]), parse_double(tok[k + 2]),
                                       parse_double(tok[k + 3]), parse_double(tok[k + 4])}});
    }
    m.entries.push_back(std::move(e));
  }
  return m;
}

inline std::string image_id_of_path(const std::string& path) {
  return std::filesystem::path(path).stem().string();
}

/// Writes manifest.txt and images/<id>.pgm under `dir`.
inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  Manifest m{ds.width, ds.height, {}};
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const std::string rel = "images/" + ds.samples[i].image_id + ".pgm";
    write_pnm((dir / rel).string(), ds.samples[i].raster);
    m.entries.push_back({rel, ds.annotations[i].objects});
  }
  std::ofstream os(dir / "manifest.txt");
  if (!os) throw Error("cannot write '" + (dir / "manifest.txt").string() + "'");
  write_manifest(os, m);
}

inline Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot read '" + path.string() + "'");
  return read_manifest(is);
}

/// Loads a manifest and its rasters; class names are collected in order of
/// first appearance unless `class_names` is given.
inline Dataset load_dataset(const std::filesystem::path& manifest_path,
                            std::vector<std::string> class_names = {}) {
  const Manifest m = load_manifest(manifest_path);
  const auto base = manifest_path.parent_path();
  Dataset ds;
  ds.width = m.width;
  ds.height = m.height;
  ds.class_names = std::move(class_names);
  for (const auto& e : m.entries) {
    Sample s;
    s.image_id = image_id_of_path(e.path);
    s.raster = read_pnm((base / e.path).string());
    for (const auto& o : e.objects) {
      if (std::find(ds.class_names.begin(), ds.class_names.end(), o.class_name) == ds.class_names.end()) {
        ds.class_names.push_back(o.class_name);
      }
    }
    ds.annotations.push_back({s.image_id, e.objects});
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace dpmnet
