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

// 8-bit rasters stored as binary PGM (grayscale) or PPM (RGB).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "dpmnet/tensor.hpp"

namespace dpmnet {

struct Raster {
  int width = 0, height = 0, channels = 1;  // channels: 1 or 3
  std::vector<std::uint8_t> pixels;         // interleaved, row-major

  Raster() = default;
  Raster(int w, int h, int c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c),
        pixels(static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * static_cast<std::size_t>(c), fill) {}

  std::uint8_t& at(int x, int y, int c = 0) {
    return pixels[(static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)) *
                      static_cast<std::size_t>(channels) + static_cast<std::size_t>(c)];
  }
  std::uint8_t at(int x, int y, int c = 0) const {
    return pixels[(static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)) *
                      static_cast<std::size_t>(channels) + static_cast<std::size_t>(c)];
  }

  friend bool operator==(const Raster&, const Raster&) = default;
};

inline std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// [C,H,W] tensor with values in [0,1].
inline Tensor to_tensor(const Raster& r) {
  const auto C = static_cast<std::size_t>(r.channels);
  const auto H = static_cast<std::size_t>(r.height);
  const auto W = static_cast<std::size_t>(r.width);
  Tensor t(Shape{C, H, W});
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        t.at(c, y, x) = r.pixels[(y * W + x) * C + c] / 255.0;
      }
    }
  }
  return t;
}

inline void write_pnm(const std::string& path, const Raster& r) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write '" + path + "'");
  os << (r.channels == 1 ? "P5" : "P6") << '\n' << r.width << ' ' << r.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(r.pixels.data()), static_cast<std::streamsize>(r.pixels.size()));
  if (!os) throw Error("cannot write '" + path + "'");
}

inline Raster read_pnm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot read '" + path + "'");
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  is >> magic >> w >> h >> maxval;
  if (!is || (magic != "P5" && magic != "P6") || w <= 0 || h <= 0 || maxval != 255) {
    throw Error("'" + path + "' is not an 8-bit binary PGM/PPM");
  }
  is.get();
  Raster r(w, h, magic == "P5" ? 1 : 3);
  is.read(reinterpret_cast<char*>(r.pixels.data()), static_cast<std::streamsize>(r.pixels.size()));
  if (is.gcount() != static_cast<std::streamsize>(r.pixels.size())) {
    throw Error("'" + path + "' is truncated");
  }
  return r;
}

inline Raster to_rgb(const Raster& r) {
  if (r.channels == 3) return r;
  Raster out(r.width, r.height, 3);
  for (int y = 0; y < r.height; ++y) {
    for (int x = 0; x < r.width; ++x) {
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = r.at(x, y, 0);
    }
  }
  return out;
}

using Rgb = std::array<std::uint8_t, 3>;

/// One-pixel outline through the pixels at the rounded box coordinates.
/// Sides outside the raster are dropped; nothing wraps.
inline void draw_box(Raster& r, double x1, double y1, double x2, double y2, Rgb color) {
  const long X1 = std::lround(x1), Y1 = std::lround(y1), X2 = std::lround(x2), Y2 = std::lround(y2);
  auto put = [&](long x, long y) {
    if (x < 0 || y < 0 || x >= r.width || y >= r.height) return;
    for (int c = 0; c < r.channels; ++c) {
      r.at(static_cast<int>(x), static_cast<int>(y), c) = color[static_cast<std::size_t>(std::min(c, 2))];
    }
  };
  for (long x = X1; x <= X2; ++x) {
    put(x, Y1);
    put(x, Y2);
  }
  for (long y = Y1; y <= Y2; ++y) {
    put(X1, y);
    put(X2, y);
  }
}

}  // namespace dpmnet
