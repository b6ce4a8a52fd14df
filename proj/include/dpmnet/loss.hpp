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

// Final-prediction structured loss.
//
//   H(r, y) = max(0, 1 - r)^2   for y > 0
//           = max(0, r + 1)     for y = 0
//   C(A)    = sum_{A} H(r_i, y_i) + sum_{S(A)} H(r_j, 0),  S(A) = B \ neigh(A)
//   L       = C(A') - C(A)
//
// B is the candidate pool after the response floor (plus the entries of A',
// which are always kept). Candidates under the floor have r <= -1, where the
// background hinge is zero, so dropping them leaves every background sum
// unchanged. The discrete sets A, A' and the neighborhoods are held fixed
// while differentiating; gradients flow through the responses only.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "dpmnet/nms.hpp"

namespace dpmnet {

inline double hinge(double r, int y) {
  if (y > 0) {
    const double m = std::max(0.0, 1.0 - r);
    return m * m;
  }
  return std::max(0.0, r + 1.0);
}

inline double hinge_derivative(double r, int y) {
  if (y > 0) return -2.0 * std::max(0.0, 1.0 - r);
  return r > -1.0 ? 1.0 : 0.0;
}

struct GroundTruth {
  Box box;
  int label = 1;
};

struct LossConfig {
  OverlapPolicy policy;
  bool soft_positives = false;
  double response_floor = -1.0;
  // Survivors of suppression with r below this are predicted background.
  double decision_threshold = 0.0;
};

constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

/// A': per ground-truth box, the highest-response candidate of the same
/// class with IoU >= threshold. When nothing qualifies the entry binds to
/// the best-overlap candidate of that class and is flagged degenerate.
struct ConstrainedAssignment {
  std::vector<std::size_t> index;  // into the candidate list, kNone if unbound
  std::vector<bool> degenerate;
  bool flagged() const {
    for (bool d : degenerate) {
      if (d) return true;
    }
    return false;
  }
};

inline ConstrainedAssignment constrain(std::span<const Assignment> candidates,
                                       std::span<const GroundTruth> truth, double threshold) {
  ConstrainedAssignment out;
  for (const GroundTruth& gt : truth) {
    std::size_t best = kNone, fallback = kNone;
    double fallback_iou = -1.0;
    for (std::size_t k = 0; k < candidates.size(); ++k) {
      const Assignment& c = candidates[k];
      if (c.label != gt.label) continue;
      const double o = iou(c.box, gt.box);
      if (o >= threshold && (best == kNone || ranks_before(c, candidates[best]))) best = k;
      if (o > fallback_iou || (o == fallback_iou && ranks_before(c, candidates[fallback]))) {
        fallback_iou = o;
        fallback = k;
      }
    }
    out.index.push_back(best != kNone ? best : fallback);
    out.degenerate.push_back(best == kNone);
  }
  return out;
}

/// Same-class neighbors of entry i with weight a_ij = 2|b_i ∩ b_j|/|b_i| - 1;
/// non-positive weights are dropped.
inline std::vector<std::pair<std::size_t, double>> soft_neighbors(
    std::span<const Assignment> pool, std::size_t i, const OverlapPolicy& policy) {
  std::vector<std::pair<std::size_t, double>> out;
  const Assignment& bi = pool[i];
  for (std::size_t j = 0; j < pool.size(); ++j) {
    const Assignment& bj = pool[j];
    if (bj.label != bi.label) continue;
    if (containment(bi.box, bj.box) < policy.same_class) continue;
    const double alpha = 2.0 * intersection_area(bi.box, bj.box) / bi.box.area() - 1.0;
    if (alpha > 0.0) out.emplace_back(j, alpha);
  }
  return out;
}

/// Membership mask of neigh(assignment) over the pool.
inline std::vector<char> neighborhood_mask(std::span<const Assignment> pool,
                                           std::span<const std::size_t> assignment,
                                           const OverlapPolicy& policy) {
  std::vector<char> mask(pool.size(), 0);
  for (std::size_t i : assignment) {
    for (std::size_t j : neighborhood(pool[i], pool, policy)) mask[j] = 1;
  }
  return mask;
}

/// Positive term C^P. Accumulates dC^P/dr into `grad` when non-null.
inline double positive_cost(std::span<const Assignment> pool, std::span<const std::size_t> assignment,
                            bool soft, const OverlapPolicy& policy,
                            std::vector<double>* grad = nullptr, double sign = 1.0) {
  double c = 0.0;
  for (std::size_t i : assignment) {
    const int y = pool[i].label;
    if (soft) {
      auto nb = soft_neighbors(pool, i, policy);
      double norm = 0.0;
      for (auto& [j, a] : nb) norm += a;
      if (norm > 0.0) {
        for (auto& [j, a] : nb) {
          c += a * hinge(pool[j].score, y) / norm;
          if (grad) (*grad)[j] += sign * a * hinge_derivative(pool[j].score, y) / norm;
        }
        continue;
      }
    }
    c += hinge(pool[i].score, y);
    if (grad) (*grad)[i] += sign * hinge_derivative(pool[i].score, y);
  }
  return c;
}

inline double soft_positive_cost(std::span<const Assignment> pool,
                                 std::span<const std::size_t> assignment,
                                 const OverlapPolicy& policy) {
  return positive_cost(pool, assignment, true, policy);
}

/// C(A) = C^P(A) + sum of background hinge over S(A) = pool \ neigh(A).
inline double cost(std::span<const Assignment> pool, std::span<const std::size_t> assignment,
                   bool soft, const OverlapPolicy& policy) {
  double c = positive_cost(pool, assignment, soft, policy);
  const auto mask = neighborhood_mask(pool, assignment, policy);
  for (std::size_t j = 0; j < pool.size(); ++j) {
    if (!mask[j]) c += hinge(pool[j].score, 0);
  }
  return c;
}

struct LossReport {
  double cost_predicted = 0.0;    // C(A)
  double cost_constrained = 0.0;  // C(A')
  double loss = 0.0;              // C(A') - C(A)
  double loss_positive = 0.0;     // L^P
  double loss_negative = 0.0;     // L^N
  std::vector<double> grad;       // dL/dr per pool entry
  bool degenerate = false;
};

/// L computed directly and through the neighborhood decomposition
/// L^P + L^N, where L^N only visits N \ N' and N' \ N.
inline LossReport final_loss(std::span<const Assignment> pool,
                             std::span<const std::size_t> predicted,
                             std::span<const std::size_t> constrained,
                             const LossConfig& config) {
  const OverlapPolicy& pol = config.policy;
  LossReport rep;
  rep.grad.assign(pool.size(), 0.0);
  const auto n_pred = neighborhood_mask(pool, predicted, pol);
  const auto n_cons = neighborhood_mask(pool, constrained, pol);

  const double cp_pred = positive_cost(pool, predicted, config.soft_positives, pol, &rep.grad, -1.0);
  const double cp_cons = positive_cost(pool, constrained, config.soft_positives, pol, &rep.grad, 1.0);
  double cn_pred = 0.0, cn_cons = 0.0, ln = 0.0;
  for (std::size_t j = 0; j < pool.size(); ++j) {
    const double h = hinge(pool[j].score, 0);
    const double dh = hinge_derivative(pool[j].score, 0);
    if (!n_pred[j]) cn_pred += h;
    if (!n_cons[j]) cn_cons += h;
    if (n_pred[j] && !n_cons[j]) {
      ln += h;
      rep.grad[j] += dh;
    } else if (n_cons[j] && !n_pred[j]) {
      ln -= h;
      rep.grad[j] -= dh;
    }
  }
  rep.cost_predicted = cp_pred + cn_pred;
  rep.cost_constrained = cp_cons + cn_cons;
  rep.loss = rep.cost_constrained - rep.cost_predicted;
  rep.loss_positive = cp_cons - cp_pred;
  rep.loss_negative = ln;
  if (std::abs(rep.loss - (rep.loss_positive + rep.loss_negative)) > 1e-9) {
    throw Error("final_loss: direct and decomposed loss disagree");
  }
  return rep;
}

/// Everything the loss needs from one image, with discrete choices frozen.
struct LossPlan {
  std::vector<Assignment> pool;        // B
  std::vector<std::size_t> source;     // pool entry -> candidate index
  std::vector<std::size_t> predicted;  // A, as pool indices
  std::vector<std::size_t> constrained;  // A', as pool indices (deduplicated)
  bool degenerate = false;
};

inline LossPlan plan_loss(std::span<const Assignment> candidates,
                          std::span<const GroundTruth> truth, const LossConfig& config) {
  LossPlan plan;
  const ConstrainedAssignment cons = constrain(candidates, truth, config.policy.ground_truth);
  plan.degenerate = cons.flagged() || (candidates.empty() && !truth.empty());
  std::vector<std::size_t> pool_of(candidates.size(), kNone);
  auto add = [&](std::size_t k) {
    if (pool_of[k] == kNone) {
      pool_of[k] = plan.pool.size();
      plan.pool.push_back(candidates[k]);
      plan.source.push_back(k);
    }
    return pool_of[k];
  };
  for (std::size_t k = 0; k < candidates.size(); ++k) {
    if (candidates[k].score > config.response_floor) add(k);
  }
  for (std::size_t k : cons.index) {
    if (k == kNone) continue;
    const std::size_t p = add(k);
    if (std::find(plan.constrained.begin(), plan.constrained.end(), p) == plan.constrained.end()) {
      plan.constrained.push_back(p);
    }
  }
  for (std::size_t p : suppress_indices(plan.pool, config.policy)) {
    if (plan.pool[p].score >= config.decision_threshold) plan.predicted.push_back(p);
  }
  return plan;
}

/// Re-evaluates a frozen plan at new responses (one per pool entry).
inline LossReport evaluate_plan(const LossPlan& plan, std::span<const double> scores,
                                const LossConfig& config) {
  std::vector<Assignment> pool = plan.pool;
  for (std::size_t j = 0; j < pool.size(); ++j) pool[j].score = scores[j];
  LossReport rep = final_loss(pool, plan.predicted, plan.constrained, config);
  rep.degenerate = plan.degenerate;
  return rep;
}

inline LossReport evaluate_plan(const LossPlan& plan, const LossConfig& config) {
  LossReport rep = final_loss(plan.pool, plan.predicted, plan.constrained, config);
  rep.degenerate = plan.degenerate;
  return rep;
}

/// Per-window hinge used for bootstrap-style training: the A' entries are
/// positives, and pool entries whose IoU with every ground-truth box is at
/// most `negative_iou` are negatives. Windows overlapping objects are
/// ignored, and suppression plays no role.
inline LossReport window_hinge(const LossPlan& plan, std::span<const GroundTruth> truth,
                               double negative_iou = 0.3) {
  LossReport rep;
  rep.grad.assign(plan.pool.size(), 0.0);
  rep.degenerate = plan.degenerate;
  for (std::size_t i : plan.constrained) {
    const Assignment& a = plan.pool[i];
    rep.loss_positive += hinge(a.score, a.label);
    rep.grad[i] += hinge_derivative(a.score, a.label);
  }
  for (std::size_t j = 0; j < plan.pool.size(); ++j) {
    const Assignment& a = plan.pool[j];
    bool negative = true;
    for (const GroundTruth& gt : truth) {
      if (iou(a.box, gt.box) > negative_iou) {
        negative = false;
        break;
      }
    }
    if (!negative) continue;
    rep.loss_negative += hinge(a.score, 0);
    rep.grad[j] += hinge_derivative(a.score, 0);
  }
  rep.loss = rep.loss_positive + rep.loss_negative;
  rep.cost_constrained = rep.loss;
  return rep;
}

}  // namespace dpmnet
