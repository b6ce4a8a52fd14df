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

// Finite-difference verification of every recorded operation and of the
// composed image -> loss pipeline.
//
// Central differences at eps; the error of a coordinate is
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-6 * max(1, |f|)).
// Max, ReLU and hinge are piecewise smooth. A coordinate that fails is
// re-probed at eps/2: when the one-sided slope gap does not shrink linearly
// with the step, the function has a kink inside [x - eps, x + eps], and the
// coordinate is counted as skipped instead of failed.

#include <cmath>
#include <functional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "dpmnet/dpm.hpp"
#include "dpmnet/featnet.hpp"
#include "dpmnet/loss.hpp"
#include "dpmnet/pipeline.hpp"
#include "dpmnet/tape.hpp"

namespace dpmnet {

struct GradCheckOptions {
  int seeds = 20;
  double eps = 1e-5;
  double tolerance = 1e-4;
  std::size_t max_coords = 40;  // sampled coordinates per seed (all when fewer)
  std::uint64_t seed = 1;
  std::string inject_fault;     // op whose analytic gradient is sign-flipped
};

struct OpReport {
  std::string op;
  int seeds = 0;
  std::size_t checked = 0, kinks = 0;
  double max_rel_error = 0.0;
  bool pass = true;
};

namespace gc {

/// f as a function of one scalar coordinate offset.
using Probe = std::function<double(std::size_t coord, double delta)>;

inline void compare(const std::vector<double>& analytic, const std::vector<std::size_t>& coords,
                    const Probe& f, const GradCheckOptions& opt, OpReport& rep) {
  const double f0 = f(0, 0.0);
  const double floor = 1e-6 * std::max(1.0, std::abs(f0));
  for (std::size_t c : coords) {
    const double e = opt.eps;
    const double fp = f(c, e), fm = f(c, -e);
    const double num = (fp - fm) / (2 * e);
    const double a = analytic[c];
    const double rel = std::abs(a - num) / std::max({std::abs(a), std::abs(num), floor});
    ++rep.checked;
    if (rel < opt.tolerance) {
      rep.max_rel_error = std::max(rep.max_rel_error, rel);
      continue;
    }
    const double gap1 = (fp - f0) / e - (f0 - fm) / e;
    const double h = e / 2;
    const double gap2 = (f(c, h) - f0) / h - (f0 - f(c, -h)) / h;
    const bool kink = std::abs(gap2 - gap1 / 2) > 0.1 * std::abs(gap1) + 1e-7 * std::max(1.0, std::abs(f0));
    if (kink) {
      ++rep.kinks;
      --rep.checked;
      continue;
    }
    rep.max_rel_error = std::max(rep.max_rel_error, rel);
  }
}

inline std::vector<std::size_t> sample_coords(std::size_t n, std::size_t max, std::mt19937_64& rng) {
  std::vector<std::size_t> out;
  if (n <= max) {
    for (std::size_t i = 0; i < n; ++i) out.push_back(i);
    return out;
  }
  std::uniform_int_distribution<std::size_t> d(0, n - 1);
  for (std::size_t k = 0; k < max; ++k) out.push_back(d(rng));
  return out;
}

/// Leaves of a tape-built case; build() returns the scalar objective.
struct Case {
  std::vector<Tensor> inputs;
  std::function<Var(Tape&, const std::vector<Var>&)> build;
};

inline Tensor random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(s));
  std::uniform_real_distribution<double> d(lo, hi);
  for (double& v : t.data()) v = d(rng);
  return t;
}

/// Values bounded away from zero: |x| in [0.05, 1].
inline Tensor signed_tensor(Shape s, std::mt19937_64& rng) {
  Tensor t(std::move(s));
  std::uniform_real_distribution<double> mag(0.05, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (double& v : t.data()) v = sign(rng) ? mag(rng) : -mag(rng);
  return t;
}

/// Distinct values 0.01 apart in random order.
inline Tensor distinct_tensor(Shape s, std::mt19937_64& rng) {
  Tensor t(std::move(s));
  std::vector<double> vals(t.size());
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = 0.01 * static_cast<double>(i) - 0.5;
  std::shuffle(vals.begin(), vals.end(), rng);
  std::copy(vals.begin(), vals.end(), t.data().begin());
  return t;
}

/// sum(out * R) for a fixed random R, so every output element matters.
inline Var project(Var out, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x5bd1e995ULL);
  return ag::dot(out, out.tape->constant(random_tensor(out.value().shape(), rng)));
}

inline void run_case(const Case& cs, bool flip, std::mt19937_64& rng, const GradCheckOptions& opt,
                     OpReport& rep) {
  Tape tape;
  std::vector<Var> leaves;
  for (const Tensor& t : cs.inputs) leaves.push_back(tape.leaf(t, true));
  Var root = cs.build(tape, leaves);
  tape.backward(root);
  std::vector<double> analytic;
  std::vector<std::pair<std::size_t, std::size_t>> where;  // (input, element)
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    const Tensor g = leaves[k].has_grad() ? leaves[k].grad() : Tensor(cs.inputs[k].shape());
    for (std::size_t e = 0; e < g.size(); ++e) {
      analytic.push_back(flip ? -g[e] : g[e]);
      where.emplace_back(k, e);
    }
  }
  Probe f = [&](std::size_t c, double delta) {
    std::vector<Tensor> in = cs.inputs;
    if (delta != 0.0) in[where[c].first][where[c].second] += delta;
    Tape t;
    std::vector<Var> lv;
    for (const Tensor& x : in) lv.push_back(t.leaf(x, false));
    return cs.build(t, lv).value()[0];
  };
  compare(analytic, sample_coords(analytic.size(), opt.max_coords, rng), f, opt, rep);
}

inline ClassModel random_class(int channels, std::vector<ViewShape> shapes, std::mt19937_64& rng,
                               double filter_scale) {
  ClassModel c;
  c.label = 1;
  c.name = "c";
  std::uniform_real_distribution<double> wd(0.0, 0.2);
  for (const ViewShape& s : shapes) {
    ViewModel v = make_view(channels, s);
    for (PartSpec& p : v.parts) {
      for (double& w : p.deformation.data()) w = wd(rng);
    }
    c.views.push_back(std::move(v));
  }
  randomize_filters(c, rng, filter_scale);
  return c;
}

inline std::vector<Tensor> class_tensors(const ClassModel& c) {
  std::vector<Tensor> out;
  for (const ViewModel& v : c.views) {
    out.push_back(v.root);
    for (std::size_t p = 0; p < v.parts.size(); ++p) {
      out.push_back(v.part_filters[p]);
      out.push_back(v.parts[p].deformation);
    }
  }
  return out;
}

/// ClassVars over leaves laid out as class_tensors() orders them.
inline ClassVars class_vars(const ClassModel& c, const std::vector<Var>& leaves, std::size_t first) {
  ClassVars cv;
  std::size_t k = first;
  for (const ViewModel& v : c.views) {
    ViewVars vv;
    vv.root = leaves[k++];
    for (std::size_t p = 0; p < v.parts.size(); ++p) {
      vv.parts.push_back(leaves[k++]);
      vv.deformation.push_back(leaves[k++]);
    }
    cv.views.push_back(std::move(vv));
  }
  return cv;
}

inline Case make_case(const std::string& op, std::uint64_t s) {
  std::mt19937_64 rng(s);
  Case cs;
  if (op == "correlate2d") {
    const int stride = 1 + static_cast<int>(s % 2);
    cs.inputs = {random_tensor({2, 7, 7}, rng), random_tensor({3, 2, 3, 3}, rng)};
    cs.build = [s, stride](Tape&, const std::vector<Var>& v) {
      return project(ag::correlate2d(v[0], v[1], stride), s);
    };
  } else if (op == "add_bias") {
    cs.inputs = {random_tensor({3, 4, 5}, rng), random_tensor({3}, rng)};
    cs.build = [s](Tape&, const std::vector<Var>& v) { return project(ag::add_bias(v[0], v[1]), s); };
  } else if (op == "relu") {
    cs.inputs = {signed_tensor({2, 5, 5}, rng)};
    cs.build = [s](Tape&, const std::vector<Var>& v) { return project(ag::relu(v[0]), s); };
  } else if (op == "maxpool2d") {
    const int k = 2 + static_cast<int>(s % 2), stride = 1 + static_cast<int>(s % 3 == 0);
    cs.inputs = {distinct_tensor({2, 6, 6}, rng)};
    cs.build = [s, k, stride](Tape&, const std::vector<Var>& v) {
      return project(ag::maxpool2d(v[0], k, stride), s);
    };
  } else if (op == "shift") {
    cs.inputs = {random_tensor({2, 3, 3}, rng)};
    cs.build = [s](Tape&, const std::vector<Var>& v) { return project(ag::shift(v[0], 0.37), s); };
  } else if (op == "add_n") {
    cs.inputs = {random_tensor({2, 3, 4}, rng), random_tensor({2, 3, 4}, rng), random_tensor({2, 3, 4}, rng)};
    cs.build = [s](Tape&, const std::vector<Var>& v) { return project(ag::add_n(v), s); };
  } else if (op == "dot") {
    cs.inputs = {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)};
    cs.build = [](Tape&, const std::vector<Var>& v) { return ag::dot(v[0], v[1]); };
  } else if (op == "sum") {
    cs.inputs = {random_tensor({2, 5}, rng)};
    cs.build = [](Tape&, const std::vector<Var>& v) {
      return ag::dot(ag::sum(v[0]), ag::sum(v[0]));
    };
  } else if (op == "deform") {
    PartSpec part;
    part.anchor_row = static_cast<int>(s % 3);
    part.anchor_col = static_cast<int>((s / 3) % 3);
    part.radius = 1 + static_cast<int>(s % 2);
    cs.inputs = {random_tensor({1, 8, 8}, rng), random_tensor({4}, rng, 0.0, 0.5)};
    cs.build = [s, part](Tape&, const std::vector<Var>& v) {
      const std::size_t oh = 8 - static_cast<std::size_t>(part.anchor_row);
      const std::size_t ow = 8 - static_cast<std::size_t>(part.anchor_col);
      return project(ag::deform(v[0], v[1], part, oh, ow, true).output, s);
    };
  } else if (op == "or_max") {
    cs.inputs = {random_tensor({1, 5, 6}, rng), random_tensor({1, 4, 6}, rng), random_tensor({1, 5, 3}, rng)};
    cs.build = [s](Tape&, const std::vector<Var>& v) {
      return project(ag::or_max(v, {0, 1, 2}, 3).output, s);
    };
  } else if (op == "featnet") {
    const FeatNetSpec spec = default_featnet_spec(1);
    const FeatNetParams p = init_featnet(spec, s);
    cs.inputs = {random_tensor({1, 16, 18}, rng, 0.0, 1.0)};
    for (const ConvParams& c : p.convs) {
      cs.inputs.push_back(c.weight);
      cs.inputs.push_back(random_tensor(c.bias.shape(), rng, -0.1, 0.1));
    }
    cs.build = [s, spec](Tape&, const std::vector<Var>& v) {
      FeatNetVars fv;
      for (std::size_t k = 1; k < v.size(); k += 2) {
        fv.weights.push_back(v[k]);
        fv.biases.push_back(v[k + 1]);
      }
      return project(extract(v[0], spec, fv), s);
    };
  } else if (op == "dpm_class") {
    const ClassModel cls = random_class(2, {{4, 4}, {3, 6}}, rng, 0.5);
    cs.inputs = {random_tensor({2, 9, 10}, rng)};
    for (Tensor& t : class_tensors(cls)) cs.inputs.push_back(std::move(t));
    cs.build = [s, cls](Tape&, const std::vector<Var>& v) {
      const ClassVars cv = class_vars(cls, v, 1);
      return project(forward_class(v[0], cls, cv, true).score->output, s);
    };
  } else {
    throw Error("gradcheck: unknown op '" + op + "'");
  }
  return cs;
}

enum class PipelineLoss { nms, soft_nms, window_hinge };

inline Model pipeline_model(std::uint64_t s) {
  PyramidSpec pyr;
  return init_model(default_featnet_spec(1), pyr, {{"a", {{4, 4}, {3, 6}}}, {"b", {{4, 4}}}}, s);
}

inline std::vector<Tensor*> model_tensors(Model& m) {
  std::vector<Tensor*> out;
  for (ConvParams& c : m.featnet.convs) {
    out.push_back(&c.weight);
    out.push_back(&c.bias);
  }
  for (ClassModel& c : m.classes) {
    for (ViewModel& v : c.views) {
      out.push_back(&v.root);
      for (std::size_t p = 0; p < v.parts.size(); ++p) {
        out.push_back(&v.part_filters[p]);
        out.push_back(&v.parts[p].deformation);
      }
    }
  }
  return out;
}

inline std::vector<const Tensor*> gradient_tensors(const ModelGradients& g) {
  std::vector<const Tensor*> out;
  for (const ConvParams& c : g.featnet) {
    out.push_back(&c.weight);
    out.push_back(&c.bias);
  }
  for (const auto& cls : g.classes) {
    for (const ViewGradients& v : cls) {
      out.push_back(&v.root);
      for (std::size_t p = 0; p < v.parts.size(); ++p) {
        out.push_back(&v.parts[p]);
        out.push_back(&v.deformation[p]);
      }
    }
  }
  return out;
}

/// Image -> pyramid -> featnet -> DPM -> NMS -> loss, differentiated with
/// respect to every model parameter. The discrete choices (A, A', the pool)
/// are those of the unperturbed pass, which is what backward differentiates.
inline void run_pipeline(PipelineLoss kind, std::uint64_t s, bool flip, const GradCheckOptions& opt,
                         OpReport& rep) {
  std::mt19937_64 rng(s);
  Model m = pipeline_model(s);
  // biases keep ReLUs active; filters large enough to spread responses
  for (ConvParams& c : m.featnet.convs) c.bias = random_tensor(c.bias.shape(), rng, 0.0, 0.2);
  for (ClassModel& c : m.classes) randomize_filters(c, rng, 0.3);
  const Tensor image = random_tensor({1, 56, 56}, rng, 0.0, 1.0);
  std::vector<GroundTruth> truth = {{Box{4, 6, 24, 26}, 1}, {Box{30, 28, 50, 48}, 2}};
  LossConfig cfg;
  cfg.soft_positives = kind == PipelineLoss::soft_nms;
  cfg.response_floor = -1e9;

  auto loss_of = [&](const Model& mm, const LossPlan& plan, std::vector<Assignment>* cands_out,
                     ImagePass* keep) -> LossReport {
    ForwardOptions fo;
    fo.featnet_grad = keep != nullptr;
    fo.dpm_grad = keep != nullptr;
    ImagePass pass = forward_image(mm, image, fo);
    std::vector<Assignment> cands = emit_assignments(mm, pass);
    std::vector<double> scores(plan.pool.size());
    for (std::size_t p = 0; p < plan.pool.size(); ++p) scores[p] = cands[plan.source[p]].score;
    LossPlan moved = plan;
    for (std::size_t p = 0; p < plan.pool.size(); ++p) moved.pool[p].score = scores[p];
    LossReport r = kind == PipelineLoss::window_hinge ? window_hinge(moved, truth)
                                                      : evaluate_plan(moved, cfg);
    if (cands_out) *cands_out = std::move(cands);
    if (keep) *keep = std::move(pass);
    return r;
  };

  ForwardOptions fo;
  fo.featnet_grad = true;
  fo.dpm_grad = true;
  ImagePass pass = forward_image(m, image, fo);
  const std::vector<Assignment> cands = emit_assignments(m, pass);
  const LossPlan plan = plan_loss(cands, truth, cfg);
  const LossReport rep0 = kind == PipelineLoss::window_hinge ? window_hinge(plan, truth)
                                                             : evaluate_plan(plan, cfg);
  std::vector<double> grad(cands.size(), 0.0);
  for (std::size_t p = 0; p < plan.pool.size(); ++p) grad[plan.source[p]] += rep0.grad[p];
  const ModelGradients g = backward_image(m, pass, cands, grad);

  std::vector<Tensor*> params = model_tensors(m);
  std::vector<const Tensor*> grads = gradient_tensors(g);
  std::vector<double> analytic;
  std::vector<std::pair<std::size_t, std::size_t>> where;
  for (std::size_t k = 0; k < params.size(); ++k) {
    for (std::size_t e = 0; e < params[k]->size(); ++e) {
      analytic.push_back(flip ? -(*grads[k])[e] : (*grads[k])[e]);
      where.emplace_back(k, e);
    }
  }
  // one coordinate per randomly chosen tensor keeps small tensors covered
  std::vector<std::size_t> coords;
  std::vector<std::size_t> first(params.size(), 0);
  for (std::size_t k = 1; k < params.size(); ++k) first[k] = first[k - 1] + params[k - 1]->size();
  std::uniform_int_distribution<std::size_t> pick_t(0, params.size() - 1);
  for (std::size_t n = 0; n < opt.max_coords; ++n) {
    const std::size_t t = pick_t(rng);
    coords.push_back(first[t] + std::uniform_int_distribution<std::size_t>(0, params[t]->size() - 1)(rng));
  }
  Probe f = [&](std::size_t c, double delta) {
    Model mm = m;
    std::vector<Tensor*> pp = model_tensors(mm);
    (*pp[where[c].first])[where[c].second] += delta;
    return loss_of(mm, plan, nullptr, nullptr).loss;
  };
  compare(analytic, coords, f, opt, rep);
}

}  // namespace gc

inline std::vector<std::string> gradcheck_ops() {
  return {"correlate2d", "add_bias", "relu",   "maxpool2d", "shift",     "add_n",
          "dot",         "sum",      "deform", "or_max",    "featnet",   "dpm_class",
          "pipeline.nms_loss", "pipeline.soft_nms_loss", "pipeline.window_hinge"};
}

inline OpReport gradcheck_op(const std::string& op, const GradCheckOptions& opt) {
  OpReport rep;
  rep.op = op;
  const bool flip = op == opt.inject_fault;
  std::mt19937_64 rng(opt.seed * 7919 + std::hash<std::string>{}(op) % 1000003);
  for (int k = 0; k < opt.seeds; ++k) {
    const std::uint64_t s = opt.seed * 1000 + static_cast<std::uint64_t>(k);
    if (op.rfind("pipeline.", 0) == 0) {
      const auto kind = op == "pipeline.nms_loss"        ? gc::PipelineLoss::nms
                        : op == "pipeline.soft_nms_loss" ? gc::PipelineLoss::soft_nms
                        : op == "pipeline.window_hinge"  ? gc::PipelineLoss::window_hinge
                                                         : throw Error("gradcheck: unknown op '" + op + "'");
      gc::run_pipeline(kind, s, flip, opt, rep);
    } else {
      gc::run_case(gc::make_case(op, s), flip, rng, opt, rep);
    }
    ++rep.seeds;
  }
  rep.pass = rep.checked > 0 && rep.max_rel_error < opt.tolerance;
  return rep;
}

inline std::vector<OpReport> run_gradcheck(const GradCheckOptions& opt) {
  if (!opt.inject_fault.empty()) {
    const auto ops = gradcheck_ops();
    if (std::find(ops.begin(), ops.end(), opt.inject_fault) == ops.end()) {
      throw Error("gradcheck: cannot inject into unknown op '" + opt.inject_fault + "'");
    }
  }
  std::vector<OpReport> out;
  for (const std::string& op : gradcheck_ops()) out.push_back(gradcheck_op(op, opt));
  return out;
}

inline void write_gradcheck_report(std::ostream& os, const std::vector<OpReport>& reps) {
  for (const OpReport& r : reps) {
    os << (r.pass ? "ok   " : "FAIL ") << r.op << " seeds=" << r.seeds << " checked=" << r.checked
       << " kinks_skipped=" << r.kinks << " max_rel_error=" << format_double(r.max_rel_error) << '\n';
  }
}

}  // namespace dpmnet
