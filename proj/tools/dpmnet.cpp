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


// dpmnet command-line tool: gen, train, detect, eval, render, gradcheck.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dpmnet/config.hpp"
#include "dpmnet/data.hpp"
#include "dpmnet/eval.hpp"
#include "dpmnet/gradcheck.hpp"
#include "dpmnet/model_io.hpp"
#include "dpmnet/parallel.hpp"
#include "dpmnet/raster.hpp"
#include "dpmnet/trainer.hpp"

namespace fs = std::filesystem;
using namespace dpmnet;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

struct NumericFailure : Error {
  using Error::Error;
};

struct Common {
  std::string config_file;
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  bool seed_given = false;
  bool deterministic = false;
  int workers = 0;

  int effective_workers() const {
    if (deterministic) return 1;
    return workers > 0 ? workers : default_workers();
  }

  void apply(ConfigTable& t) const {
    if (!config_file.empty()) t.apply(read_config_file(config_file));
    for (const std::string& o : overrides) {
      const auto [k, v] = split_key_value(o, "--set");
      t.set(k, v);
    }
  }
};

void add_common(CLI::App* cmd, Common& c, bool with_config) {
  if (with_config) {
    cmd->add_option("--config", c.config_file, "key=value config file");
    cmd->add_option("--set", c.overrides, "config override key=value (repeatable)");
  }
  cmd->add_option_function<std::uint64_t>(
      "--seed", [&c](const std::uint64_t& s) { c.seed = s; c.seed_given = true; }, "run seed");
  cmd->add_flag("--deterministic", c.deterministic, "single worker; bitwise reproducible");
  cmd->add_option("--workers", c.workers, "worker threads (default: $DPMNET_WORKERS or all cores)");
}

void echo_config(const ConfigTable& t) {
  std::cout << "# effective config\n";
  t.echo(std::cout, "config ");
}

// gen ------------------------------------------------------------------------

int cmd_gen(const Common& c, const std::string& out_dir) {
  GenConfig g;
  ConfigTable t;
  bind_gen(t, g);
  c.apply(t);
  if (c.seed_given) g.scene.seed = c.seed;
  g.scene.classes = scene_preset(g.preset);
  if (g.images < 0) throw ConfigError("images must be >= 0");
  echo_config(t);
  const Dataset ds = generate(g.scene, static_cast<std::size_t>(g.images));
  save_dataset(ds, out_dir);
  std::cout << "wrote " << ds.samples.size() << " images to " << out_dir << '\n';
  return 0;
}

// train ----------------------------------------------------------------------

struct TrainArgs {
  std::string data, val, out, metrics, loss_log, checkpoint, resume;
  bool skip_pretrain = false, freeze_featnet = false, bootstrap = false;
  double lr = -1.0;
};

int cmd_train(const Common& c, const TrainArgs& a) {
  TrainConfig cfg;
  ModelSetup ms;
  PyramidSpec pyr;
  ConfigTable t;
  bind_train(t, cfg);
  bind_model(t, ms);
  bind_pyramid(t, pyr);
  c.apply(t);
  if (c.seed_given) cfg.seed = c.seed;
  if (a.skip_pretrain) cfg.skip_pretrain = true;
  if (a.freeze_featnet) cfg.train_featnet = false;
  if (a.bootstrap) cfg.nms_loss = false;
  if (a.lr >= 0.0) cfg.lr_phase1 = cfg.lr_phase2 = cfg.pretrain_lr = a.lr;
  if (ms.featnet != "default") throw ConfigError("unknown featnet architecture '" + ms.featnet + "'");
  cfg.validate();
  echo_config(t);

  const Dataset train = load_dataset(a.data);
  Dataset val;
  if (!a.val.empty()) val = load_dataset(a.val, train.class_names);

  TrainState st;
  if (!a.resume.empty()) {
    st = load_checkpoint(a.resume);
    std::cout << "resumed from " << a.resume << " at epoch " << st.epoch << '\n';
  } else {
    const FeatNetSpec spec = default_featnet_spec(train.samples.empty() ? 1 : train.samples[0].raster.channels);
    const auto setup = infer_class_setup(train, ms.views_per_class, featnet_geometry(spec).stride);
    st.model = init_model(spec, pyr, setup, cfg.seed, {0.0, 0.0, ms.deformation_init, ms.deformation_init});
    for (const ClassSetup& s : setup) {
      std::cout << "class " << s.name << " views";
      for (const ViewShape& v : s.views) std::cout << ' ' << v.root_height << 'x' << v.root_width;
      std::cout << '\n';
    }
  }
  for (std::size_t k = 0; k < train.class_names.size(); ++k) {
    if (k >= st.model.classes.size() || st.model.classes[k].name != train.class_names[k]) {
      throw Error("model classes do not match the dataset's classes");
    }
  }

  std::ofstream metrics;
  if (!a.metrics.empty()) {
    metrics.open(a.metrics);
    if (!metrics) throw Error("cannot write '" + a.metrics + "'");
    write_metrics_header(metrics);
    for (const EpochMetrics& e : st.history) write_metrics_row(metrics, e);
  }
  std::ofstream loss_log;
  FitHooks hooks;
  if (!a.loss_log.empty()) {
    loss_log.open(a.loss_log);
    if (!loss_log) throw Error("cannot write '" + a.loss_log + "'");
    write_loss_header(loss_log);
    hooks.on_step = [&](std::uint64_t step, const LossReport& r) { write_loss_row(loss_log, step, r); };
  }
  hooks.workers = c.effective_workers();
  hooks.log = &std::cerr;
  if (!a.val.empty()) hooks.validation = &val;
  hooks.on_epoch = [&](const EpochMetrics& e) {
    write_metrics_row(std::cout, e);
    if (metrics.is_open()) {
      write_metrics_row(metrics, e);
      metrics.flush();
    }
  };
  if (!a.checkpoint.empty()) {
    hooks.checkpoint = [&](const TrainState& s) { save_checkpoint(a.checkpoint, s); };
  }
  write_metrics_header(std::cout);
  fit(st, train, cfg, hooks);
  save_model(a.out, st.model);
  std::cout << "wrote model " << a.out << '\n';
  int rejected = 0;
  for (const EpochMetrics& e : st.history) rejected += e.rejected;
  if (rejected > 0) std::cerr << rejected << " training steps were rejected as non-finite\n";
  return 0;
}

// detect ---------------------------------------------------------------------

struct DetectArgs {
  std::string model, manifest, out;
  std::vector<std::string> images;
  double floor = -1.0;
};

int cmd_detect(const Common& c, const DetectArgs& a) {
  DetectOptions opt;
  opt.response_floor = a.floor;
  ConfigTable t;
  bind_policy(t, opt.policy);
  c.apply(t);
  opt.policy.validate();
  echo_config(t);
  const Model m = load_model(a.model);

  std::vector<std::pair<std::string, std::string>> inputs;  // (image id, path)
  if (!a.manifest.empty()) {
    const Manifest mf = load_manifest(a.manifest);
    const fs::path base = fs::path(a.manifest).parent_path();
    for (const auto& e : mf.entries) inputs.emplace_back(image_id_of_path(e.path), (base / e.path).string());
  }
  for (const std::string& p : a.images) inputs.emplace_back(image_id_of_path(p), p);

  std::vector<std::vector<Detection>> per(inputs.size());
  std::vector<std::string> errors(inputs.size());
  parallel_for(inputs.size(), c.effective_workers(), [&](std::size_t i) {
    try {
      const Raster r = read_pnm(inputs[i].second);
      for (const Assignment& d : detect(m, to_tensor(r), opt)) {
        per[i].push_back({inputs[i].first, m.classes[static_cast<std::size_t>(d.label - 1)].name, d.score, d.box});
      }
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  std::ofstream os(a.out);
  if (!os) throw Error("cannot write '" + a.out + "'");
  std::size_t failed = 0, n = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!errors[i].empty()) {
      ++failed;
      std::cerr << "error: " << inputs[i].second << ": " << errors[i] << '\n';
      continue;
    }
    write_detections(os, per[i]);
    n += per[i].size();
  }
  std::cout << "wrote " << n << " detections for " << inputs.size() - failed << " images to " << a.out << '\n';
  if (failed) {
    std::cerr << failed << " of " << inputs.size() << " images could not be processed\n";
    return kExitData;
  }
  return 0;
}

// eval -----------------------------------------------------------------------

int cmd_eval(const std::string& detections, const std::string& manifest, double iou_threshold,
             const std::string& out) {
  std::ifstream is(detections);
  if (!is) throw Error("cannot read '" + detections + "'");
  const std::vector<Detection> dets = read_detections(is);
  const Manifest mf = load_manifest(manifest);
  std::vector<Annotation> ann;
  for (const auto& e : mf.entries) ann.push_back({image_id_of_path(e.path), e.objects});
  const EvalReport rep = evaluate(dets, ann, iou_threshold);
  write_report(std::cout, rep);
  if (!out.empty()) {
    std::ofstream os(out);
    if (!os) throw Error("cannot write '" + out + "'");
    write_report(os, rep);
  }
  return 0;
}

// render ---------------------------------------------------------------------

int cmd_render(const std::string& image, const std::string& detections, const std::string& manifest,
               std::string image_id, double min_score, const std::string& out) {
  Raster r = to_rgb(read_pnm(image));
  if (image_id.empty()) image_id = image_id_of_path(image);
  if (!manifest.empty()) {
    for (const auto& e : load_manifest(manifest).entries) {
      if (image_id_of_path(e.path) != image_id) continue;
      for (const auto& o : e.objects) draw_box(r, o.box.x1, o.box.y1, o.box.x2, o.box.y2, {0, 0, 255});
    }
  }
  if (!detections.empty()) {
    std::ifstream is(detections);
    if (!is) throw Error("cannot read '" + detections + "'");
    for (const Detection& d : read_detections(is)) {
      if (d.image_id == image_id && d.score >= min_score) draw_box(r, d.box.x1, d.box.y1, d.box.x2, d.box.y2, {255, 0, 0});
    }
  }
  write_pnm(out, r);
  return 0;
}

// gradcheck ------------------------------------------------------------------

int cmd_gradcheck(const Common& c, int seeds, const std::string& fault) {
  GradCheckOptions opt;
  opt.seeds = seeds;
  if (c.seed_given) opt.seed = c.seed;
  opt.inject_fault = fault;
  const auto ops = gradcheck_ops();
  if (!fault.empty() && std::find(ops.begin(), ops.end(), fault) == ops.end()) {
    throw ConfigError("--inject-fault: unknown op '" + fault + "'");
  }
  const auto reps = run_gradcheck(opt);
  write_gradcheck_report(std::cout, reps);
  std::vector<std::string> failed;
  for (const OpReport& r : reps) {
    if (!r.pass) failed.push_back(r.op);
  }
  if (!failed.empty()) {
    std::cerr << "gradient check failed:";
    for (const auto& f : failed) std::cerr << ' ' << f;
    std::cerr << '\n';
    return kExitNumeric;
  }
  std::cout << "all gradient checks passed\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dpmnet: deformable part models as a trainable detection network"};
  app.require_subcommand(1);

  Common gen_c, train_c, detect_c, grad_c;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  add_common(gen, gen_c, true);
  gen->add_option("--spec", gen_c.config_file, "scene spec file (key=value)");
  gen->add_option("--out", gen_out, "output directory")->required();

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "pretrain and train a model");
  add_common(train, train_c, true);
  train->add_option("--data", ta.data, "training manifest")->required();
  train->add_option("--val", ta.val, "validation manifest (AP per epoch)");
  train->add_option("--out", ta.out, "output model file")->required();
  train->add_option("--metrics", ta.metrics, "per-epoch metrics file (tab separated)");
  train->add_option("--loss-log", ta.loss_log, "per-step C(A), C(A'), L, L^P, L^N (tab separated)");
  train->add_option("--checkpoint", ta.checkpoint, "checkpoint file, rewritten every epoch");
  train->add_option("--resume", ta.resume, "resume from a checkpoint");
  train->add_flag("--skip-pretrain", ta.skip_pretrain, "skip filter pretraining");
  train->add_flag("--freeze-featnet", ta.freeze_featnet, "keep the feature network fixed");
  train->add_flag("--bootstrap-loss", ta.bootstrap, "per-window hinge instead of the NMS loss");
  train->add_option("--lr", ta.lr, "one learning rate for pretraining and both joint phases");

  DetectArgs da;
  auto* det = app.add_subcommand("detect", "run a model over images");
  add_common(det, detect_c, true);
  det->add_option("--model", da.model, "model file")->required();
  det->add_option("--manifest", da.manifest, "dataset manifest listing the images");
  det->add_option("images", da.images, "image files (PGM/PPM)");
  det->add_option("--out", da.out, "detection file")->required();
  det->add_option("--floor", da.floor, "minimum response kept before suppression");

  std::string ev_dets, ev_manifest, ev_out;
  double ev_iou = 0.5;
  auto* ev = app.add_subcommand("eval", "average precision of a detection file");
  ev->add_option("--detections", ev_dets, "detection file")->required();
  ev->add_option("--manifest", ev_manifest, "ground-truth manifest")->required();
  ev->add_option("--iou", ev_iou, "match threshold");
  ev->add_option("--out", ev_out, "report file");
  Common ev_c;
  add_common(ev, ev_c, false);

  std::string rn_image, rn_dets, rn_manifest, rn_id, rn_out;
  double rn_min = -1e300;
  auto* rn = app.add_subcommand("render", "draw detections (red) and ground truth (blue)");
  rn->add_option("--image", rn_image, "input image")->required();
  rn->add_option("--detections", rn_dets, "detection file");
  rn->add_option("--manifest", rn_manifest, "ground-truth manifest");
  rn->add_option("--image-id", rn_id, "id used in the detection file (default: file stem)");
  rn->add_option("--min-score", rn_min, "skip detections scoring below this");
  rn->add_option("--out", rn_out, "output PPM")->required();
  Common rn_c;
  add_common(rn, rn_c, false);

  int gc_seeds = 20;
  std::string gc_fault;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  add_common(grad, grad_c, false);
  grad->add_option("--seeds", gc_seeds, "random instances per op");
  grad->add_option("--inject-fault", gc_fault, "sign-flip the analytic gradient of one op");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*gen) return cmd_gen(gen_c, gen_out);
    if (*train) return cmd_train(train_c, ta);
    if (*det) return cmd_detect(detect_c, da);
    if (*ev) return cmd_eval(ev_dets, ev_manifest, ev_iou, ev_out);
    if (*rn) return cmd_render(rn_image, rn_dets, rn_manifest, rn_id, rn_min, rn_out);
    if (*grad) return cmd_gradcheck(grad_c, gc_seeds, gc_fault);
  } catch (const ConfigError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const VersionError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const NumericFailure& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}
