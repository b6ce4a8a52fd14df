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

// key=value configuration. Sources apply in order (defaults, then a file,
// then command-line overrides); every key must be known to the table.

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "dpmnet/data.hpp"
#include "dpmnet/trainer.hpp"

namespace dpmnet {

class ConfigError : public Error {
 public:
  using Error::Error;
};

using KeyValues = std::vector<std::pair<std::string, std::string>>;

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::pair<std::string, std::string> split_key_value(const std::string& item, const std::string& where) {
  const auto eq = item.find('=');
  if (eq == std::string::npos) throw ConfigError(where + ": expected key=value, got '" + item + "'");
  std::string k = trim(item.substr(0, eq)), v = trim(item.substr(eq + 1));
  if (k.empty()) throw ConfigError(where + ": empty key");
  return {k, v};
}

/// Lines of key=value; '#' starts a comment.
inline KeyValues parse_config(std::istream& is, const std::string& name) {
  KeyValues out;
  std::string line;
  int n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (const auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = trim(line);
    if (line.empty()) continue;
    out.push_back(split_key_value(line, name + ":" + std::to_string(n)));
  }
  return out;
}

inline KeyValues read_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file '" + path + "'");
  return parse_config(is, path);
}

class ConfigTable {
 public:
  void bind(const std::string& key, double& v) {
    add(key, [&v, key](const std::string& s) { v = number<double>(key, s); },
        [&v] { return format_double(v); });
  }
  void bind(const std::string& key, int& v) {
    add(key, [&v, key](const std::string& s) { v = number<int>(key, s); },
        [&v] { return std::to_string(v); });
  }
  void bind(const std::string& key, std::uint64_t& v) {
    add(key, [&v, key](const std::string& s) { v = number<std::uint64_t>(key, s); },
        [&v] { return std::to_string(v); });
  }
  void bind(const std::string& key, bool& v) {
    add(key,
        [&v, key](const std::string& s) {
          if (s == "1" || s == "true" || s == "yes") v = true;
          else if (s == "0" || s == "false" || s == "no") v = false;
          else throw ConfigError("config key '" + key + "': expected a boolean, got '" + s + "'");
        },
        [&v] { return std::string(v ? "true" : "false"); });
  }
  void bind(const std::string& key, std::string& v) {
    add(key, [&v](const std::string& s) { v = s; }, [&v] { return v; });
  }

  bool has(const std::string& key) const { return entries_.count(key) != 0; }

  void set(const std::string& key, const std::string& value) {
    const auto it = entries_.find(key);
    if (it == entries_.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second.set(value);
  }

  void apply(const KeyValues& kv) {
    for (const auto& [k, v] : kv) set(k, v);
  }

  /// Effective values, sorted by key.
  void echo(std::ostream& os, const std::string& prefix = "") const {
    for (const auto& [k, e] : entries_) os << prefix << k << '=' << e.get() << '\n';
  }

 private:
  struct Entry {
    std::function<void(const std::string&)> set;
    std::function<std::string()> get;
  };

  template <class T>
  static T number(const std::string& key, const std::string& s) {
    if constexpr (std::is_floating_point_v<T>) {
      try {
        return parse_double(s);
      } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected a number, got '" + s + "'");
      }
    } else {
      T v{};
      const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
      if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
        throw ConfigError("config key '" + key + "': expected an integer, got '" + s + "'");
      }
      return v;
    }
  }

  void add(const std::string& key, std::function<void(const std::string&)> set,
           std::function<std::string()> get) {
    entries_[key] = Entry{std::move(set), std::move(get)};
  }

  std::map<std::string, Entry> entries_;
};

inline void bind_policy(ConfigTable& t, OverlapPolicy& p) {
  t.bind("nms.same_class", p.same_class);
  t.bind("nms.different_class", p.different_class);
  t.bind("nms.ground_truth", p.ground_truth);
}

inline void bind_pyramid(ConfigTable& t, PyramidSpec& p) {
  t.bind("pyramid.intervals", p.intervals_per_octave);
  t.bind("pyramid.min_dim", p.min_dim);
}

inline void bind_train(ConfigTable& t, TrainConfig& c) {
  t.bind("pretrain.negatives", c.pretrain_negatives);
  t.bind("pretrain.epochs", c.pretrain_epochs);
  t.bind("pretrain.lr", c.pretrain_lr);
  t.bind("pretrain.skip", c.skip_pretrain);
  t.bind("phase1.epochs", c.epochs_phase1);
  t.bind("phase1.lr", c.lr_phase1);
  t.bind("phase2.epochs", c.epochs_phase2);
  t.bind("phase2.lr", c.lr_phase2);
  t.bind("seed", c.seed);
  t.bind("train.featnet", c.train_featnet);
  t.bind("train.featnet_lr_scale", c.featnet_lr_scale);
  t.bind("train.nms_loss", c.nms_loss);
  t.bind("loss.soft_positives", c.loss.soft_positives);
  t.bind("loss.response_floor", c.loss.response_floor);
  bind_policy(t, c.loss.policy);
}

/// Model shape chosen at initialization.
struct ModelSetup {
  int views_per_class = 2;
  std::string featnet = "default";  // "default" is the only architecture
  double deformation_init = 0.05;   // quadratic terms; linear terms start at 0
};

inline void bind_model(ConfigTable& t, ModelSetup& m) {
  t.bind("model.views_per_class", m.views_per_class);
  t.bind("model.featnet", m.featnet);
  t.bind("model.deformation_init", m.deformation_init);
}

/// Scene generation parameters. Classes come from the built-in preset.
struct GenConfig {
  SceneSpec scene;
  int images = 100;
  std::string preset = "desk";
};

inline void bind_gen(ConfigTable& t, GenConfig& g) {
  t.bind("images", g.images);
  t.bind("preset", g.preset);
  t.bind("scene.width", g.scene.width);
  t.bind("scene.height", g.scene.height);
  t.bind("scene.objects_per_image", g.scene.objects_per_image);
  t.bind("scene.part_jitter", g.scene.part_jitter);
  t.bind("scene.position_jitter", g.scene.position_jitter);
  t.bind("scene.occlusion", g.scene.occlusion);
  t.bind("scene.clutter", g.scene.clutter);
  t.bind("scene.noise", g.scene.noise);
  t.bind("scene.background", g.scene.background);
  t.bind("scene.align_stride", g.scene.align_stride);
  t.bind("scene.align_offset", g.scene.align_offset);
  t.bind("seed", g.scene.seed);
  bind_pyramid(t, g.scene.pyramid);
}

inline std::vector<ObjectClassSpec> scene_preset(const std::string& name) {
  if (name == "desk") return desk_classes();
  throw ConfigError("unknown scene preset '" + name + "'");
}

}  // namespace dpmnet
