#pragma once

#include <array>
#include <cstddef>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dpt/common.hpp"

namespace dpt {

enum class ReadoutMode { Ignore, Add, Project };
enum class EmbedderKind { Patch, Hybrid };
enum class HeadKind { Depth, Segmentation };

// A decoder tap: either a transformer layer (1-based) or a ResNet stage of the
// hybrid embedder (R0 = first stage, R1 = second).
struct HookPoint {
  enum class Kind { Layer, ResnetStage };
  Kind kind = Kind::Layer;
  int index = 1;

  static HookPoint layer(int l) { return {Kind::Layer, l}; }
  static HookPoint resnet(int stage) { return {Kind::ResnetStage, stage}; }
  bool operator==(const HookPoint&) const = default;

  std::string str() const {
    return kind == Kind::ResnetStage ? "R" + std::to_string(index) : std::to_string(index);
  }
};

struct HybridConfig {
  std::size_t stem_channels = 32;
  std::array<std::size_t, 4> stage_channels{32, 64, 128, 256};
  std::array<std::size_t, 4> stage_blocks{2, 2, 2, 2};
  std::size_t gn_groups = 32;

  bool operator==(const HybridConfig&) const = default;

  // The 50-layer block plan; used for parameter accounting experiments.
  static HybridConfig resnet50_plan() {
    HybridConfig c;
    c.stem_channels = 64;
    c.stage_channels = {256, 512, 1024, 2048};
    c.stage_blocks = {3, 4, 6, 3};
    c.gn_groups = 32;
    return c;
  }

  // Largest divisor of `channels` that is <= gn_groups.
  std::size_t groups_for(std::size_t channels) const {
    std::size_t g = std::min(gn_groups, channels);
    while (g > 1 && channels % g != 0) --g;
    return g;
  }
};

struct DptConfig {
  std::string name = "custom";
  std::size_t patch_size = 16;
  std::size_t embed_dim = 768;
  std::size_t layers = 12;
  std::size_t heads = 12;
  double mlp_ratio = 4.0;
  std::array<HookPoint, 4> hooks{HookPoint::layer(3), HookPoint::layer(6), HookPoint::layer(9),
                                 HookPoint::layer(12)};
  ReadoutMode readout = ReadoutMode::Project;
  std::size_t feature_dim = 256;  // decoder width (D-hat)
  std::array<std::size_t, 4> scales{4, 8, 16, 32};
  EmbedderKind embedder = EmbedderKind::Patch;
  HybridConfig hybrid;
  HeadKind head = HeadKind::Depth;
  std::size_t num_classes = 150;
  double aux_loss_weight = 0.2;
  double dropout_rate = 0.1;
  std::size_t pos_grid_h = 24;  // stored position-embedding grid
  std::size_t pos_grid_w = 24;
  std::array<double, 3> norm_mean{0.5, 0.5, 0.5};
  std::array<double, 3> norm_std{0.5, 0.5, 0.5};

  bool operator==(const DptConfig&) const = default;

  std::size_t mlp_hidden() const {
    return static_cast<std::size_t>(static_cast<double>(embed_dim) * mlp_ratio);
  }

  // Token grid is 1/16 resolution for the hybrid embedder, 1/p for patches.
  std::size_t token_stride() const {
    return embedder == EmbedderKind::Hybrid ? 16 : patch_size;
  }

  void validate() const {
    check_config(patch_size >= 1, "config: patch_size must be positive");
    check_config(embed_dim >= 1 && layers >= 1 && heads >= 1, "config: bad encoder dims");
    check_config(embed_dim % heads == 0, "config: embed_dim must be divisible by heads");
    check_config(mlp_hidden() >= 1, "config: mlp_ratio too small");
    check_config(feature_dim >= 2 && feature_dim % 2 == 0,
                 "config: feature_dim must be even (the depth head halves it)");
    int last_layer = 0;
    bool seen_layer = false;
    for (std::size_t i = 0; i < hooks.size(); ++i) {
      const HookPoint& h = hooks[i];
      if (h.kind == HookPoint::Kind::ResnetStage) {
        check_config(embedder == EmbedderKind::Hybrid,
                     "config: R0/R1 hooks require the hybrid embedder");
        check_config(!seen_layer, "config: R0/R1 hooks must precede layer hooks");
        check_config(h.index == static_cast<int>(i) && h.index <= 1,
                     "config: ResNet hooks must be R0 then R1");
      } else {
        check_config(h.index >= 1 && h.index <= static_cast<int>(layers),
                     "config: hook layer " + std::to_string(h.index) + " outside [1, " +
                         std::to_string(layers) + "]");
        check_config(!seen_layer || h.index > last_layer,
                     "config: layer hooks must be strictly ascending");
        last_layer = h.index;
        seen_layer = true;
      }
    }
    std::size_t last_scale = 0;
    for (std::size_t s : scales) {
      check_config(s == 4 || s == 8 || s == 16 || s == 32,
                   "config: scale " + std::to_string(s) + " not in {4, 8, 16, 32}");
      check_config(s > last_scale, "config: scales must be ascending (shallow -> deep)");
      last_scale = s;
    }
    if (embedder == EmbedderKind::Hybrid) {
      check_config(patch_size == 16, "config: hybrid embedder fixes the token stride at 16");
      for (std::size_t c : hybrid.stage_channels)
        check_config(c >= 1, "config: hybrid stage channels must be positive");
      for (std::size_t b : hybrid.stage_blocks)
        check_config(b >= 1, "config: hybrid stage blocks must be positive");
    }
    if (head == HeadKind::Segmentation)
      check_config(num_classes >= 2, "config: segmentation needs at least 2 classes");
    check_config(aux_loss_weight >= 0.0, "config: negative aux loss weight");
    check_config(dropout_rate >= 0.0 && dropout_rate < 1.0, "config: dropout rate in [0,1)");
    check_config(pos_grid_h >= 1 && pos_grid_w >= 1, "config: empty position grid");
    for (double s : norm_std) check_config(s != 0.0, "config: zero normalization std");
  }
};

inline bool is_preset_name(const std::string& name) {
  return name == "base" || name == "large" || name == "hybrid" || name == "toy" ||
         name == "toy-seg" || name == "toy-hybrid";
}

inline DptConfig preset(const std::string& name) {
  DptConfig c;
  c.name = name;
  if (name == "base") {
    // defaults are the base variant
  } else if (name == "large") {
    c.embed_dim = 1024;
    c.layers = 24;
    c.heads = 16;
    c.hooks = {HookPoint::layer(5), HookPoint::layer(12), HookPoint::layer(18),
               HookPoint::layer(24)};
  } else if (name == "hybrid") {
    c.embedder = EmbedderKind::Hybrid;
    c.hooks = {HookPoint::resnet(0), HookPoint::resnet(1), HookPoint::layer(9),
               HookPoint::layer(12)};
  } else if (name == "toy" || name == "toy-seg" || name == "toy-hybrid") {
    c.embed_dim = 32;
    c.layers = 4;
    c.heads = 4;
    c.feature_dim = 64;
    c.hooks = {HookPoint::layer(1), HookPoint::layer(2), HookPoint::layer(3),
               HookPoint::layer(4)};
    c.pos_grid_h = c.pos_grid_w = 4;
    if (name == "toy-seg") {
      c.head = HeadKind::Segmentation;
      c.num_classes = 5;
    }
    if (name == "toy-hybrid") {
      c.embedder = EmbedderKind::Hybrid;
      c.hybrid.stem_channels = 8;
      c.hybrid.stage_channels = {8, 16, 32, 64};
      c.hybrid.stage_blocks = {1, 1, 1, 1};
      c.hybrid.gn_groups = 4;
      c.hooks = {HookPoint::resnet(0), HookPoint::resnet(1), HookPoint::layer(3),
                 HookPoint::layer(4)};
    }
  } else {
    throw ConfigError("config: unknown preset '" + name + "'");
  }
  c.validate();
  return c;
}

namespace detail {

inline HookPoint hook_from_json(const nlohmann::json& j) {
  if (j.is_string()) {
    std::string s = j.get<std::string>();
    if (s == "R0") return HookPoint::resnet(0);
    if (s == "R1") return HookPoint::resnet(1);
    throw ConfigError("config: bad hook '" + s + "', expected layer index or R0/R1");
  }
  if (j.is_number_integer()) return HookPoint::layer(j.get<int>());
  throw ConfigError("config: hooks must be integers or R0/R1");
}

template <std::size_t N, typename T>
std::array<T, N> array_from_json(const nlohmann::json& j, const std::string& what) {
  check_config(j.is_array() && j.size() == N,
               "config: " + what + " must be an array of " + std::to_string(N));
  std::array<T, N> out{};
  for (std::size_t i = 0; i < N; ++i) out[i] = j[i].get<T>();
  return out;
}

}  // namespace detail

// Accepts either a bare preset name or a JSON document (optionally based on a
// preset via the "preset" key) and returns a validated config.
inline DptConfig parse_config(const std::string& text) {
  if (is_preset_name(text)) return preset(text);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  check_config(j.is_object(), "config: document must be a JSON object");
  DptConfig c;
  if (j.contains("preset")) c = preset(j["preset"].get<std::string>());
  static const std::vector<std::string> known = {
      "preset",      "name",   "patch_size", "embed_dim",       "layers",  "heads",
      "mlp_ratio",   "hooks",  "readout",    "feature_dim",     "scales",  "embedder",
      "hybrid",      "head",   "pos_grid",   "normalize",       "dropout", "aux_loss_weight"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(known.begin(), known.end(), it.key()) == known.end())
      throw ConfigError("config: unknown field '" + it.key() + "'");
  }
  if (j.contains("name")) c.name = j["name"].get<std::string>();
  if (j.contains("patch_size")) c.patch_size = j["patch_size"].get<std::size_t>();
  if (j.contains("embed_dim")) c.embed_dim = j["embed_dim"].get<std::size_t>();
  if (j.contains("layers")) c.layers = j["layers"].get<std::size_t>();
  if (j.contains("heads")) c.heads = j["heads"].get<std::size_t>();
  if (j.contains("mlp_ratio")) c.mlp_ratio = j["mlp_ratio"].get<double>();
  if (j.contains("hooks")) {
    const auto& h = j["hooks"];
    check_config(h.is_array() && h.size() == 4, "config: hooks must list exactly 4 tap points");
    for (std::size_t i = 0; i < 4; ++i) c.hooks[i] = detail::hook_from_json(h[i]);
  }
  if (j.contains("readout")) {
    std::string r = j["readout"].get<std::string>();
    if (r == "ignore")
      c.readout = ReadoutMode::Ignore;
    else if (r == "add")
      c.readout = ReadoutMode::Add;
    else if (r == "project")
      c.readout = ReadoutMode::Project;
    else
      throw ConfigError("config: readout must be ignore|add|project, got '" + r + "'");
  }
  if (j.contains("feature_dim")) c.feature_dim = j["feature_dim"].get<std::size_t>();
  if (j.contains("scales"))
    c.scales = detail::array_from_json<4, std::size_t>(j["scales"], "scales");
  if (j.contains("embedder")) {
    std::string e = j["embedder"].get<std::string>();
    if (e == "patch")
      c.embedder = EmbedderKind::Patch;
    else if (e == "hybrid")
      c.embedder = EmbedderKind::Hybrid;
    else
      throw ConfigError("config: embedder must be patch|hybrid, got '" + e + "'");
  }
  if (j.contains("hybrid")) {
    const auto& h = j["hybrid"];
    if (h.contains("stem_channels")) c.hybrid.stem_channels = h["stem_channels"].get<std::size_t>();
    if (h.contains("stage_channels"))
      c.hybrid.stage_channels =
          detail::array_from_json<4, std::size_t>(h["stage_channels"], "hybrid.stage_channels");
    if (h.contains("stage_blocks"))
      c.hybrid.stage_blocks =
          detail::array_from_json<4, std::size_t>(h["stage_blocks"], "hybrid.stage_blocks");
    if (h.contains("gn_groups")) c.hybrid.gn_groups = h["gn_groups"].get<std::size_t>();
  }
  if (j.contains("head")) {
    const auto& h = j["head"];
    std::string type = h.is_string() ? h.get<std::string>() : h.at("type").get<std::string>();
    if (type == "depth")
      c.head = HeadKind::Depth;
    else if (type == "segmentation") {
      c.head = HeadKind::Segmentation;
      if (h.is_object() && h.contains("num_classes"))
        c.num_classes = h["num_classes"].get<std::size_t>();
    } else
      throw ConfigError("config: head type must be depth|segmentation, got '" + type + "'");
  }
  if (j.contains("pos_grid")) {
    auto g = detail::array_from_json<2, std::size_t>(j["pos_grid"], "pos_grid");
    c.pos_grid_h = g[0];
    c.pos_grid_w = g[1];
  }
  if (j.contains("normalize")) {
    const auto& n = j["normalize"];
    if (n.contains("mean"))
      c.norm_mean = detail::array_from_json<3, double>(n["mean"], "normalize.mean");
    if (n.contains("std"))
      c.norm_std = detail::array_from_json<3, double>(n["std"], "normalize.std");
  }
  if (j.contains("dropout")) c.dropout_rate = j["dropout"].get<double>();
  if (j.contains("aux_loss_weight")) c.aux_loss_weight = j["aux_loss_weight"].get<double>();
  c.validate();
  return c;
}

inline nlohmann::json to_json(const DptConfig& c) {
  nlohmann::json j;
  j["name"] = c.name;
  j["patch_size"] = c.patch_size;
  j["embed_dim"] = c.embed_dim;
  j["layers"] = c.layers;
  j["heads"] = c.heads;
  j["mlp_ratio"] = c.mlp_ratio;
  nlohmann::json hooks = nlohmann::json::array();
  for (const auto& h : c.hooks) {
    if (h.kind == HookPoint::Kind::ResnetStage)
      hooks.push_back("R" + std::to_string(h.index));
    else
      hooks.push_back(h.index);
  }
  j["hooks"] = hooks;
  j["readout"] = c.readout == ReadoutMode::Ignore ? "ignore"
                 : c.readout == ReadoutMode::Add  ? "add"
                                                  : "project";
  j["feature_dim"] = c.feature_dim;
  j["scales"] = c.scales;
  j["embedder"] = c.embedder == EmbedderKind::Hybrid ? "hybrid" : "patch";
  if (c.embedder == EmbedderKind::Hybrid) {
    j["hybrid"] = {{"stem_channels", c.hybrid.stem_channels},
                   {"stage_channels", c.hybrid.stage_channels},
                   {"stage_blocks", c.hybrid.stage_blocks},
                   {"gn_groups", c.hybrid.gn_groups}};
  }
  if (c.head == HeadKind::Segmentation)
    j["head"] = {{"type", "segmentation"}, {"num_classes", c.num_classes}};
  else
    j["head"] = {{"type", "depth"}};
  j["pos_grid"] = {c.pos_grid_h, c.pos_grid_w};
  j["normalize"] = {{"mean", c.norm_mean}, {"std", c.norm_std}};
  j["dropout"] = c.dropout_rate;
  j["aux_loss_weight"] = c.aux_loss_weight;
  return j;
}

inline DptConfig load_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("config: cannot open '" + path + "'");
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_config(text);
}

}  // namespace dpt
