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

// Average precision with greedy matching and all-points interpolation: AP is
// the area under the monotone precision envelope, summed at every recall
// step of the ranked list (not the 11-point variant).

#include <algorithm>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "dpmnet/data.hpp"
#include "dpmnet/nms.hpp"

namespace dpmnet {

struct PRCurve {
  std::vector<double> precision, recall;  // one point per ranked detection
  std::vector<bool> true_positive;
  double ap = 0.0;
  std::size_t positives = 0;
};

struct ClassReport {
  std::string name;
  PRCurve curve;
};

struct EvalReport {
  std::vector<ClassReport> classes;        // classes with ground truth
  std::vector<std::string> excluded;       // detected but never annotated
  double map = 0.0;
};

/// Area under the precision envelope of a ranked TP/FP sequence.
inline double average_precision(const std::vector<double>& recall,
                                const std::vector<double>& precision) {
  std::vector<double> env(precision);
  for (std::size_t i = env.size(); i-- > 1;) env[i - 1] = std::max(env[i - 1], env[i]);
  double ap = 0.0, prev = 0.0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    ap += (recall[i] - prev) * env[i];
    prev = recall[i];
  }
  return ap;
}

/// Detections of one class against that class's ground truth.
inline PRCurve evaluate_class(std::vector<const Detection*> dets,
                              const std::map<std::string, std::vector<Box>>& truth,
                              double iou_threshold) {
  PRCurve pr;
  for (const auto& [id, boxes] : truth) pr.positives += boxes.size();
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection* a, const Detection* b) { return a->score > b->score; });
  std::map<std::string, std::vector<bool>> used;
  for (const auto& [id, boxes] : truth) used[id].assign(boxes.size(), false);
  std::size_t tp = 0, fp = 0;
  for (const Detection* d : dets) {
    bool hit = false;
    const auto it = truth.find(d->image_id);
    if (it != truth.end()) {
      double best = -1.0;
      std::size_t best_k = 0;
      for (std::size_t k = 0; k < it->second.size(); ++k) {
        const double o = iou(d->box, it->second[k]);
        if (o > best) {
          best = o;
          best_k = k;
        }
      }
      auto& u = used[d->image_id];
      // a duplicate on an already-matched box is a false positive
      if (best >= iou_threshold && !u[best_k]) {
        u[best_k] = true;
        hit = true;
      }
    }
    hit ? ++tp : ++fp;
    pr.true_positive.push_back(hit);
    pr.recall.push_back(pr.positives ? static_cast<double>(tp) / static_cast<double>(pr.positives) : 0.0);
    pr.precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
  }
  pr.ap = average_precision(pr.recall, pr.precision);
  return pr;
}

inline EvalReport evaluate(const std::vector<Detection>& detections,
                           const std::vector<Annotation>& annotations,
                           double iou_threshold = 0.5) {
  std::vector<std::string> names;
  std::map<std::string, std::map<std::string, std::vector<Box>>> truth;
  for (const auto& a : annotations) {
    for (const auto& o : a.objects) {
      if (!truth.count(o.class_name)) names.push_back(o.class_name);
      truth[o.class_name][a.image_id].push_back(o.box);
    }
  }
  std::sort(names.begin(), names.end());
  EvalReport rep;
  std::map<std::string, std::vector<const Detection*>> by_class;
  for (const auto& d : detections) {
    if (!truth.count(d.class_name)) {
      if (std::find(rep.excluded.begin(), rep.excluded.end(), d.class_name) == rep.excluded.end()) {
        rep.excluded.push_back(d.class_name);
      }
      continue;
    }
    by_class[d.class_name].push_back(&d);
  }
  std::sort(rep.excluded.begin(), rep.excluded.end());
  double sum = 0.0;
  for (const auto& name : names) {
    rep.classes.push_back({name, evaluate_class(by_class[name], truth[name], iou_threshold)});
    sum += rep.classes.back().curve.ap;
  }
  rep.map = names.empty() ? 0.0 : sum / static_cast<double>(names.size());
  return rep;
}

inline void write_report(std::ostream& os, const EvalReport& rep) {
  for (const auto& c : rep.classes) {
    os << "AP " << c.name << ' ' << format_double(c.curve.ap) << " (" << c.curve.positives
       << " objects, " << c.curve.true_positive.size() << " detections)\n";
  }
  for (const auto& n : rep.excluded) {
    os << "note: class '" << n << "' has no ground truth; AP undefined, excluded from mAP\n";
  }
  os << "mAP " << format_double(rep.map) << '\n';
}

}  // namespace dpmnet
