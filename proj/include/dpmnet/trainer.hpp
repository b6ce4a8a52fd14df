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

// Training: deformation-free filter pretraining against a fixed random
// negative set, then per-image SGD on the final-prediction loss.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <ostream>
#include <random>
#include <thread>
#include <vector>

#include "dpmnet/data.hpp"
#include "dpmnet/eval.hpp"
#include "dpmnet/loss.hpp"
#include "dpmnet/parallel.hpp"
#include "dpmnet/pipeline.hpp"
#include "dpmnet/raster.hpp"

namespace dpmnet {

struct TrainConfig {
  int pretrain_negatives = 2000;  // per class
  int pretrain_epochs = 30;
  double pretrain_lr = 3e-2;
  bool skip_pretrain = false;

  int epochs_phase1 = 15;
  double lr_phase1 = 1e-3;
  int epochs_phase2 = 15;
  double lr_phase2 = 1e-4;

  std::uint64_t seed = 1;
  bool train_featnet = true;
  double featnet_lr_scale = 0.1;  // featnet step = lr * featnet_lr_scale
  bool nms_loss = true;  // false: per-window hinge
  LossConfig loss;

  int total_epochs() const { return epochs_phase1 + epochs_phase2; }
  double lr_for(int epoch) const { return epoch < epochs_phase1 ? lr_phase1 : lr_phase2; }

  // A zero rate is accepted: it turns fit into an evaluation pass.
  void validate() const {
    if (pretrain_negatives < 0 || pretrain_epochs < 0) throw Error("train: negative pretrain size");
    if (epochs_phase1 < 0 || epochs_phase2 < 0) throw Error("train: negative epoch count");
    if (!(lr_phase1 >= 0) || !(lr_phase2 >= 0) || !(pretrain_lr >= 0) || !(featnet_lr_scale >= 0)) {
      throw Error("train: learning rates must be >= 0");
    }
    loss.policy.validate();
  }
};

struct EpochMetrics {
  int epoch = 0;  // 1-based
  double lr = 0.0;
  double mean_loss = 0.0;
  double mean_cost_predicted = 0.0;
  double mean_cost_constrained = 0.0;
  double val_map = std::nan("");
  int rejected = 0;
  int degenerate = 0;
};

struct TrainState {
  Model model;
  bool pretrained = false;
  int epoch = 0;  // completed joint epochs
  std::uint64_t step = 0;
  std::vector<EpochMetrics> history;
};

// ---------------------------------------------------------------------------
// Parameter updates

inline bool all_finite(const ModelGradients& g) {
  for (const auto& c : g.featnet) {
    if (!c.weight.all_finite() || !c.bias.all_finite()) return false;
  }
  for (const auto& cls : g.classes) {
    for (const auto& v : cls) {
      if (!v.root.all_finite()) return false;
      for (const auto& t : v.parts) if (!t.all_finite()) return false;
      for (const auto& t : v.deformation) if (!t.all_finite()) return false;
    }
  }
  return true;
}

/// w <- w - lr * g, then w_D projected onto w_D >= 0.
inline void sgd_step(Model& m, const ModelGradients& g, double lr, bool update_featnet,
                     double featnet_lr_scale = 1.0) {
  if (update_featnet && m.featnet.trainable) {
    const double fl = lr * featnet_lr_scale;
    for (std::size_t c = 0; c < m.featnet.convs.size() && c < g.featnet.size(); ++c) {
      m.featnet.convs[c].weight.axpy(-fl, g.featnet[c].weight);
      m.featnet.convs[c].bias.axpy(-fl, g.featnet[c].bias);
    }
  }
  for (std::size_t k = 0; k < m.classes.size(); ++k) {
    for (std::size_t v = 0; v < m.classes[k].views.size(); ++v) {
      ViewModel& view = m.classes[k].views[v];
      const ViewGradients& vg = g.classes[k][v];
      view.root.axpy(-lr, vg.root);
      for (std::size_t p = 0; p < view.parts.size(); ++p) {
        view.part_filters[p].axpy(-lr, vg.parts[p]);
        view.parts[p].deformation.axpy(-lr, vg.deformation[p]);
        project_deformation(view.parts[p]);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Model shape from data

/// Views per class by 1-D k-means on log aspect ratio of the ground-truth
/// boxes; each root is sized from the 20th-percentile-area box of its
/// cluster, in feature cells of `stride` pixels.
inline std::vector<ClassSetup> infer_class_setup(const Dataset& ds, int views_per_class, int stride) {
  if (views_per_class < 1) throw Error("views_per_class must be >= 1");
  std::vector<ClassSetup> out;
  for (const std::string& name : ds.class_names) {
    std::vector<Box> boxes;
    for (const auto& a : ds.annotations) {
      for (const auto& o : a.objects) {
        if (o.class_name == name && o.box.valid()) boxes.push_back(o.box);
      }
    }
    ClassSetup cs{name, {}};
    if (boxes.empty()) throw Error("class '" + name + "' has no ground-truth boxes");
    std::vector<double> la(boxes.size());
    for (std::size_t i = 0; i < boxes.size(); ++i) la[i] = std::log(boxes[i].width() / boxes[i].height());
    std::vector<double> sorted = la;
    std::sort(sorted.begin(), sorted.end());
    const auto k = static_cast<std::size_t>(std::min<std::size_t>(static_cast<std::size_t>(views_per_class), boxes.size()));
    std::vector<double> centers(k);
    for (std::size_t c = 0; c < k; ++c) centers[c] = sorted[(2 * c + 1) * sorted.size() / (2 * k)];
    std::vector<std::size_t> assign(boxes.size(), 0);
    for (int it = 0; it < 50; ++it) {
      for (std::size_t i = 0; i < la.size(); ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < k; ++c) {
          if (std::abs(la[i] - centers[c]) < std::abs(la[i] - centers[best])) best = c;
        }
        assign[i] = best;
      }
      for (std::size_t c = 0; c < k; ++c) {
        double sum = 0.0;
        std::size_t n = 0;
        for (std::size_t i = 0; i < la.size(); ++i) {
          if (assign[i] == c) {
            sum += la[i];
            ++n;
          }
        }
        if (n) centers[c] = sum / static_cast<double>(n);
      }
    }
    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return centers[a] < centers[b]; });
    for (std::size_t c : order) {
      std::vector<Box> group;
      for (std::size_t i = 0; i < boxes.size(); ++i) {
        if (assign[i] == c) group.push_back(boxes[i]);
      }
      if (group.empty()) continue;
      std::sort(group.begin(), group.end(), [](const Box& a, const Box& b) { return a.area() < b.area(); });
      const Box& b = group[group.size() / 5];
      cs.views.push_back({std::max(1, static_cast<int>(std::lround(b.height() / stride))),
                          std::max(1, static_cast<int>(std::lround(b.width() / stride)))});
    }
    out.push_back(std::move(cs));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pretraining

/// A root placement on one pyramid level; parts sit at their anchors.
struct Window {
  std::size_t image = 0, level = 0;
  int cls = 0, view = 0;
  int row = 0, col = 0;
  int y = -1;  // hinge label: class label or 0
};

inline Box window_box(const ScaleMap& sm, const ViewModel& v, int row, int col, double W, double H) {
  return clip_box(project_box(CellRect{row, col, v.root_height(), v.root_width()}, sm.geometry), W, H);
}

/// Deformation-free view score at (row, col); with `grad` set, adds
/// scale * d score / d filter into the filters of `grad`.
inline double window_score(const Tensor& phi, const ViewModel& v, int row, int col,
                           ViewModel* grad = nullptr, double scale = 0.0) {
  const std::size_t C = phi.dim(0);
  auto block = [&](const Tensor& f, Tensor* gf, int r0, int c0) {
    const std::size_t fh = f.dim(2), fw = f.dim(3);
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t u = 0; u < fh; ++u) {
        for (std::size_t w = 0; w < fw; ++w) {
          const double x = phi.at(c, static_cast<std::size_t>(r0) + u, static_cast<std::size_t>(c0) + w);
          const std::size_t idx = (c * fh + u) * fw + w;
          s += f[idx] * x;
          if (gf) (*gf)[idx] += scale * x;
        }
      }
    }
    return s;
  };
  double s = block(v.root, grad ? &grad->root : nullptr, row, col);
  for (std::size_t p = 0; p < v.parts.size(); ++p) {
    s += block(v.part_filters[p], grad ? &grad->part_filters[p] : nullptr,
               row + v.parts[p].anchor_row, col + v.parts[p].anchor_col);
  }
  return s;
}

inline bool window_fits(const Tensor& phi, const ViewModel& v) {
  return static_cast<int>(phi.dim(1)) >= v.root_height() && static_cast<int>(phi.dim(2)) >= v.root_width();
}

struct PretrainSet {
  std::vector<Window> positives, negatives;
  std::vector<int> skipped_classes;  // labels without any positive
};

/// Positives: for each ground-truth box the best-overlapping root placement
/// over all levels and views of its class (kept when IoU >= 0.5).
/// Negatives: uniform random placements with IoU <= 0.3 to every object.
inline PretrainSet pretrain_windows(const Model& m, const Dataset& ds,
                                    const std::vector<std::vector<ScaleMap>>& maps,
                                    const TrainConfig& cfg) {
  PretrainSet set;
  const auto W = static_cast<double>(ds.width), H = static_cast<double>(ds.height);
  std::vector<int> count(m.classes.size(), 0);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    for (const GroundTruth& gt : ground_truth(ds, i)) {
      const ClassModel& cls = m.classes[static_cast<std::size_t>(gt.label - 1)];
      Window best;
      double best_iou = -1.0;
      for (std::size_t s = 0; s < maps[i].size(); ++s) {
        const Tensor& phi = maps[i][s].features;
        for (std::size_t v = 0; v < cls.views.size(); ++v) {
          const ViewModel& view = cls.views[v];
          if (!window_fits(phi, view)) continue;
          for (int r = 0; r + view.root_height() <= static_cast<int>(phi.dim(1)); ++r) {
            for (int c = 0; c + view.root_width() <= static_cast<int>(phi.dim(2)); ++c) {
              const double o = iou(window_box(maps[i][s], view, r, c, W, H), gt.box);
              if (o > best_iou) {
                best_iou = o;
                best = {i, s, gt.label - 1, static_cast<int>(v), r, c, gt.label};
              }
            }
          }
        }
      }
      if (best_iou >= 0.5) {
        set.positives.push_back(best);
        ++count[static_cast<std::size_t>(gt.label - 1)];
      }
    }
  }
  std::mt19937_64 rng(cfg.seed * 0x2545f4914f6cdd1dULL + 7);
  for (std::size_t k = 0; k < m.classes.size(); ++k) {
    if (count[k] == 0) {
      set.skipped_classes.push_back(static_cast<int>(k) + 1);
      continue;
    }
    const ClassModel& cls = m.classes[k];
    int got = 0;
    for (long attempt = 0; got < cfg.pretrain_negatives && attempt < 200L * cfg.pretrain_negatives + 1000; ++attempt) {
      const std::size_t i = std::uniform_int_distribution<std::size_t>(0, ds.samples.size() - 1)(rng);
      const std::size_t s = std::uniform_int_distribution<std::size_t>(0, maps[i].size() - 1)(rng);
      const int v = std::uniform_int_distribution<int>(0, static_cast<int>(cls.views.size()) - 1)(rng);
      const ViewModel& view = cls.views[static_cast<std::size_t>(v)];
      const Tensor& phi = maps[i][s].features;
      if (!window_fits(phi, view)) continue;
      const int r = std::uniform_int_distribution<int>(0, static_cast<int>(phi.dim(1)) - view.root_height())(rng);
      const int c = std::uniform_int_distribution<int>(0, static_cast<int>(phi.dim(2)) - view.root_width())(rng);
      const Box b = window_box(maps[i][s], view, r, c, W, H);
      bool clear = true;
      for (const auto& o : ds.annotations[i].objects) clear = clear && iou(b, o.box) <= 0.3;
      if (!clear) continue;
      set.negatives.push_back({i, s, static_cast<int>(k), v, r, c, 0});
      ++got;
    }
  }
  return set;
}

inline std::vector<std::vector<ScaleMap>> cache_features(const Model& m, const Dataset& ds,
                                                         int workers = 1);

/// Hinge SGD on the fixed window set with deformation off. The feature
/// extractor and w_D are not touched.
inline PretrainSet pretrain(Model& m, const Dataset& ds, const TrainConfig& cfg,
                            const std::vector<std::vector<ScaleMap>>* cached = nullptr,
                            std::ostream* log = nullptr) {
  std::vector<std::vector<ScaleMap>> own;
  if (!cached) {
    own = cache_features(m, ds);
    cached = &own;
  }
  PretrainSet set = pretrain_windows(m, ds, *cached, cfg);
  if (log) {
    for (int label : set.skipped_classes) {
      *log << "warning: class '" << m.classes[static_cast<std::size_t>(label - 1)].name
           << "' has no positives; skipped in pretraining\n";
    }
  }
  std::vector<Window> all = set.positives;
  all.insert(all.end(), set.negatives.begin(), set.negatives.end());
  std::vector<std::size_t> order(all.size());
  for (int e = 0; e < cfg.pretrain_epochs; ++e) {
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(cfg.seed * 0x9e3779b97f4a7c15ULL + 1000 + static_cast<std::uint64_t>(e));
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t idx : order) {
      const Window& w = all[idx];
      ViewModel& view = m.classes[static_cast<std::size_t>(w.cls)].views[static_cast<std::size_t>(w.view)];
      const Tensor& phi = (*cached)[w.image][w.level].features;
      const double r = window_score(phi, view, w.row, w.col);
      total += hinge(r, w.y);
      const double d = hinge_derivative(r, w.y);
      if (d != 0.0) window_score(phi, view, w.row, w.col, &view, -cfg.pretrain_lr * d);
    }
    if (log) {
      *log << "pretrain epoch " << e + 1 << " mean hinge "
           << (all.empty() ? 0.0 : total / static_cast<double>(all.size())) << '\n';
    }
  }
  return set;
}

// ---------------------------------------------------------------------------
// Joint training

struct StepResult {
  LossReport report;
  bool applied = false;
};

/// One image, one update: forward over the whole pyramid, A0, A = NMS(A0),
/// A' from A0 and the ground truth, dL/dF into every scale, a single SGD
/// step on the summed gradient, w_D projection.
inline StepResult train_image(Model& m, const Tensor& image, std::span<const GroundTruth> truth,
                              const TrainConfig& cfg, double lr,
                              const std::vector<ScaleMap>* cached = nullptr) {
  ForwardOptions opt;
  opt.featnet_grad = cfg.train_featnet && m.featnet.trainable && !cached;
  opt.dpm_grad = true;
  opt.deformation = true;
  ImagePass pass = forward_image(m, image, opt, cached);
  const std::vector<Assignment> cands = emit_assignments(m, pass);
  StepResult out;
  for (const Assignment& a : cands) {
    if (!std::isfinite(a.score)) return out;
  }
  const LossPlan plan = plan_loss(cands, truth, cfg.loss);
  out.report = cfg.nms_loss ? evaluate_plan(plan, cfg.loss) : window_hinge(plan, truth);
  if (!std::isfinite(out.report.loss)) return out;
  std::vector<double> grad(cands.size(), 0.0);
  for (std::size_t p = 0; p < plan.pool.size(); ++p) grad[plan.source[p]] += out.report.grad[p];
  const ModelGradients g = backward_image(m, pass, cands, grad);
  if (!all_finite(g)) return out;
  sgd_step(m, g, lr, opt.featnet_grad, cfg.featnet_lr_scale);
  out.applied = true;
  return out;
}

inline std::vector<std::vector<ScaleMap>> cache_features(const Model& m, const Dataset& ds,
                                                         int workers) {
  std::vector<std::vector<ScaleMap>> maps(ds.samples.size());
  auto job = [&](std::size_t i) { maps[i] = extract_pyramid(m, to_tensor(ds.samples[i].raster)); };
  parallel_for(ds.samples.size(), workers, job);
  return maps;
}

/// Detections for every image of a dataset, in image order.
inline std::vector<Detection> detect_dataset(const Model& m, const Dataset& ds,
                                             const DetectOptions& opt = {}, int workers = 1) {
  std::vector<std::vector<Detection>> per(ds.samples.size());
  auto job = [&](std::size_t i) {
    for (const Assignment& a : detect(m, to_tensor(ds.samples[i].raster), opt)) {
      per[i].push_back({ds.samples[i].image_id,
                        m.classes[static_cast<std::size_t>(a.label - 1)].name, a.score, a.box});
    }
  };
  parallel_for(ds.samples.size(), workers, job);
  std::vector<Detection> out;
  for (auto& v : per) out.insert(out.end(), v.begin(), v.end());
  return out;
}

struct FitHooks {
  std::function<void(const EpochMetrics&)> on_epoch;
  std::function<void(const TrainState&)> checkpoint;
  std::function<void(std::uint64_t step, const LossReport&)> on_step;  // applied steps only
  const Dataset* validation = nullptr;
  std::ostream* log = nullptr;
  int workers = 1;
};

/// Pretrains (unless done or skipped), then runs the remaining joint epochs.
/// Image order in epoch e depends only on (seed, e), so a run resumed from
/// an epoch checkpoint follows the uninterrupted trajectory.
inline void fit(TrainState& st, const Dataset& train, const TrainConfig& cfg, const FitHooks& hooks = {}) {
  cfg.validate();
  validate(st.model);
  if (train.samples.empty()) throw Error("train: empty dataset");
  std::vector<std::vector<GroundTruth>> truth;
  for (std::size_t i = 0; i < train.samples.size(); ++i) truth.push_back(ground_truth(train, i));
  std::vector<Tensor> images;
  for (const Sample& s : train.samples) images.push_back(to_tensor(s.raster));

  std::vector<std::vector<ScaleMap>> maps;
  const bool frozen = !cfg.train_featnet || !st.model.featnet.trainable;
  if (!st.pretrained) {
    if (!cfg.skip_pretrain) {
      maps = cache_features(st.model, train, hooks.workers);
      pretrain(st.model, train, cfg, &maps, hooks.log);
    }
    st.pretrained = true;
    if (hooks.checkpoint) hooks.checkpoint(st);
  }
  if (frozen && maps.empty() && st.epoch < cfg.total_epochs()) {
    maps = cache_features(st.model, train, hooks.workers);
  }
  std::vector<std::size_t> order(train.samples.size());
  for (; st.epoch < cfg.total_epochs(); ++st.epoch) {
    const double lr = cfg.lr_for(st.epoch);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(cfg.seed * 0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(st.epoch));
    std::shuffle(order.begin(), order.end(), rng);
    EpochMetrics em;
    em.epoch = st.epoch + 1;
    em.lr = lr;
    int counted = 0;
    for (std::size_t i : order) {
      const StepResult r = train_image(st.model, images[i], truth[i], cfg, lr, frozen ? &maps[i] : nullptr);
      ++st.step;
      if (r.report.degenerate) ++em.degenerate;
      if (!r.applied) {
        ++em.rejected;
        if (hooks.log) *hooks.log << "warning: step " << st.step << " rejected (non-finite loss or gradient)\n";
        continue;
      }
      if (hooks.on_step) hooks.on_step(st.step, r.report);
      em.mean_loss += r.report.loss;
      em.mean_cost_predicted += r.report.cost_predicted;
      em.mean_cost_constrained += r.report.cost_constrained;
      ++counted;
    }
    if (counted > 0) {
      em.mean_loss /= counted;
      em.mean_cost_predicted /= counted;
      em.mean_cost_constrained /= counted;
    }
    if (hooks.validation) {
      DetectOptions dopt{cfg.loss.policy, cfg.loss.response_floor};
      em.val_map = evaluate(detect_dataset(st.model, *hooks.validation, dopt, hooks.workers),
                            hooks.validation->annotations).map;
    }
    st.history.push_back(em);
    if (hooks.on_epoch) hooks.on_epoch(em);
    if (hooks.checkpoint) {
      ++st.epoch;
      hooks.checkpoint(st);
      --st.epoch;
    }
  }
}

inline void write_loss_header(std::ostream& os) { os << "step\tcost_A\tcost_A_constrained\tloss\tloss_P\tloss_N\n"; }

inline void write_loss_row(std::ostream& os, std::uint64_t step, const LossReport& r) {
  os << step << '\t' << format_double(r.cost_predicted) << '\t' << format_double(r.cost_constrained) << '\t'
     << format_double(r.loss) << '\t' << format_double(r.loss_positive) << '\t' << format_double(r.loss_negative)
     << '\n';
}

inline void write_metrics_header(std::ostream& os) {
  os << "epoch\tlr\tmean_loss\tmean_cost_A\tmean_cost_A_constrained\tval_map\trejected\tdegenerate\n";
}

inline void write_metrics_row(std::ostream& os, const EpochMetrics& m) {
  os << m.epoch << '\t' << format_double(m.lr) << '\t' << format_double(m.mean_loss) << '\t'
     << format_double(m.mean_cost_predicted) << '\t' << format_double(m.mean_cost_constrained) << '\t'
     << (std::isnan(m.val_map) ? std::string("-") : format_double(m.val_map)) << '\t' << m.rejected
     << '\t' << m.degenerate << '\n';
}

}  // namespace dpmnet
