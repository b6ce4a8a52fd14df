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

#include <algorithm>
#include <charconv>
#include <fstream>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "dpmnet/geometry.hpp"

namespace dpmnet {

struct OverlapPolicy {
  double same_class = 0.5;        // asymmetric containment threshold
  double different_class = 0.75;  // IoU threshold across classes
  double ground_truth = 0.7;      // IoU needed to stand in for a ground-truth box

  void validate() const {
    for (double t : {same_class, different_class, ground_truth}) {
      if (!(t > 0.0 && t <= 1.0)) throw Error("overlap thresholds must lie in (0,1]");
    }
  }
};

enum class Provenance { candidates, predicted, constrained, ground_truth };

/// (box, class label, response). The remaining fields locate the response
/// in the score maps and break score ties.
struct Assignment {
  Box box;
  int label = 0;
  double score = 0.0;
  int scale = 0;
  int row = 0, col = 0;
  int view = 0;
};

struct AssignmentSet {
  std::vector<Assignment> items;
  Provenance tag = Provenance::candidates;
};

inline double intersection_area(const Box& a, const Box& b) {
  const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  return (w > 0.0 && h > 0.0) ? w * h : 0.0;
}

inline double iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  if (inter <= 0.0) return 0.0;
  return inter / (a.area() + b.area() - inter);
}

/// max(|a∩b|/|a|, |a∩b|/|b|)
inline double containment(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  if (inter <= 0.0) return 0.0;
  return std::max(inter / a.area(), inter / b.area());
}

/// Asymmetric containment for boxes of the same class, IoU otherwise.
inline double overlap(const Box& a, const Box& b, bool same_class) {
  return same_class ? containment(a, b) : iou(a, b);
}

inline bool neighbors(const Assignment& a, const Assignment& b, const OverlapPolicy& p) {
  const bool same = a.label == b.label;
  return overlap(a.box, b.box, same) >= (same ? p.same_class : p.different_class);
}

/// Greedy order: descending response, ties by (label, scale, row, col).
inline bool ranks_before(const Assignment& a, const Assignment& b) {
  if (a.score != b.score) return a.score > b.score;
  return std::tie(a.label, a.scale, a.row, a.col) < std::tie(b.label, b.scale, b.row, b.col);
}

inline std::vector<std::size_t> greedy_order(std::span<const Assignment> items) {
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    return ranks_before(items[x], items[y]);
  });
  return order;
}

/// Indices of neigh(b) within `candidates`.
inline std::vector<std::size_t> neighborhood(const Assignment& b,
                                             std::span<const Assignment> candidates,
                                             const OverlapPolicy& policy) {
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < candidates.size(); ++k) {
    if (neighbors(b, candidates[k], policy)) out.push_back(k);
  }
  return out;
}

/// Indices of survivors in greedy order. An assignment is kept iff it lies
/// outside the neighborhood of every assignment kept before it.
inline std::vector<std::size_t> suppress_indices(std::span<const Assignment> items,
                                                 const OverlapPolicy& policy) {
  std::vector<std::size_t> kept;
  for (std::size_t idx : greedy_order(items)) {
    bool ok = true;
    for (std::size_t k : kept) {
      if (neighbors(items[k], items[idx], policy)) {
        ok = false;
        break;
      }
    }
    if (ok) kept.push_back(idx);
  }
  return kept;
}

inline AssignmentSet suppress(const AssignmentSet& candidates, const OverlapPolicy& policy) {
  AssignmentSet out;
  out.tag = Provenance::predicted;
  for (std::size_t k : suppress_indices(candidates.items, policy)) {
    out.items.push_back(candidates.items[k]);
  }
  return out;
}

/// Post-hoc check that no two members are each other's neighbors.
inline bool satisfies_suppression(std::span<const Assignment> items, const OverlapPolicy& policy) {
  for (std::size_t a = 0; a < items.size(); ++a) {
    for (std::size_t b = a + 1; b < items.size(); ++b) {
      if (neighbors(items[a], items[b], policy)) return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Detection files: one survivor per line,
//   <image id> <class name> <score> <x1> <y1> <x2> <y2>

struct Detection {
  std::string image_id;
  std::string class_name;
  double score = 0.0;
  Box box;
};

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw Error("not a number: '" + s + "'");
  }
  return v;
}

inline void write_detections(std::ostream& os, std::span<const Detection> dets) {
  for (const Detection& d : dets) {
    os << d.image_id << ' ' << d.class_name << ' ' << format_double(d.score) << ' '
       << format_double(d.box.x1) << ' ' << format_double(d.box.y1) << ' '
       << format_double(d.box.x2) << ' ' << format_double(d.box.y2) << '\n';
  }
}

inline std::vector<Detection> read_detections(std::istream& is) {
  std::vector<Detection> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    Detection d;
    std::string score, x1, y1, x2, y2, extra;
    if (!(ls >> d.image_id >> d.class_name >> score >> x1 >> y1 >> x2 >> y2) || (ls >> extra)) {
      throw Error("detections line " + std::to_string(lineno) + ": expected 7 fields");
    }
    d.score = parse_double(score);
    d.box = {parse_double(x1), parse_double(y1), parse_double(x2), parse_double(y2)};
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace dpmnet
