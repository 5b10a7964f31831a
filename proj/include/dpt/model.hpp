#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "dpt/config.hpp"
#include "dpt/fusion.hpp"
#include "dpt/heads.hpp"
#include "dpt/reassemble.hpp"
#include "dpt/vit.hpp"
#include "dpt/weights.hpp"

namespace dpt {

template <typename T>
struct DptModel {
  DptConfig cfg;
  EncoderWeights<T> encoder;
  std::array<ReassembleWeights<T>, 4> reassemble;
  std::array<FusionBlockWeights<T>, 4> fusion;  // fusion[0] fuses the shallowest map
  DepthHeadWeights<T> depth;
  SegHeadWeights<T> seg;
  SegHeadWeights<T> aux;

  DptModel() = default;
  explicit DptModel(DptConfig config) : cfg(std::move(config)) {
    cfg.validate();
    encoder.layers.resize(cfg.layers);
    if (cfg.embedder == EmbedderKind::Hybrid) {
      for (std::size_t s = 0; s < 3; ++s) {
        encoder.hybrid.stages[s].resize(cfg.hybrid.stage_blocks[s]);
        for (std::size_t b = 0; b < cfg.hybrid.stage_blocks[s]; ++b)
          encoder.hybrid.stages[s][b].downsample = (b == 0);
      }
    }
  }

  bool use_bn() const { return cfg.head == HeadKind::Segmentation; }
};

// Walks every parameter slot of a model in a fixed order, reporting its spec.
// This single walker backs initialization, counting, serialization and tape
// registration, so they cannot drift apart.
template <typename T, typename F>
void for_each_param(DptModel<T>& m, F&& fn) {
  const DptConfig& c = m.cfg;
  std::size_t d = c.embed_dim;
  std::size_t dh = c.feature_dim;
  auto learn = [&](const std::string& name, Shape shape, ParamInit init, Tensor<T>& slot) {
    fn(ParamSpec{name, std::move(shape), ParamKind::Learnable, init}, slot);
  };
  auto buffer = [&](const std::string& name, Shape shape, ParamInit init, Tensor<T>& slot) {
    fn(ParamSpec{name, std::move(shape), ParamKind::Buffer, init}, slot);
  };
  auto norm = [&](const std::string& prefix, std::size_t n, NormWeights<T>& w) {
    learn(prefix + ".gamma", {n}, ParamInit::One, w.gamma);
    learn(prefix + ".beta", {n}, ParamInit::Zero, w.beta);
  };
  auto bnorm = [&](const std::string& prefix, std::size_t n, BatchNormWeights<T>& w) {
    learn(prefix + ".gamma", {n}, ParamInit::One, w.gamma);
    learn(prefix + ".beta", {n}, ParamInit::Zero, w.beta);
    buffer(prefix + ".running_mean", {n}, ParamInit::Zero, w.running_mean);
    buffer(prefix + ".running_var", {n}, ParamInit::One, w.running_var);
  };
  auto conv = [&](const std::string& prefix, Shape shape, bool with_bias, ConvWeights<T>& w) {
    std::size_t out_ch = shape[0];
    learn(prefix + ".weight", std::move(shape), ParamInit::TruncNormal, w.weight);
    if (with_bias) learn(prefix + ".bias", {out_ch}, ParamInit::Zero, w.bias);
  };
  auto lin = [&](const std::string& prefix, std::size_t in, std::size_t out,
                 LinearWeights<T>& w) {
    learn(prefix + ".weight", {in, out}, ParamInit::TruncNormal, w.weight);
    learn(prefix + ".bias", {out}, ParamInit::Zero, w.bias);
  };

  if (c.embedder == EmbedderKind::Patch) {
    lin("embed.patch", 3 * c.patch_size * c.patch_size, d, m.encoder.patch.patch_proj);
    learn("embed.pos", {c.pos_grid_h * c.pos_grid_w + 1, d}, ParamInit::TruncNormal,
          m.encoder.patch.pos);
    learn("embed.readout", {d}, ParamInit::TruncNormal, m.encoder.patch.readout);
  } else {
    auto& hy = m.encoder.hybrid;
    conv("embed.stem", {c.hybrid.stem_channels, 3, 3, 3}, true, hy.stem);
    std::size_t in_ch = c.hybrid.stem_channels;
    for (std::size_t s = 0; s < 3; ++s) {
      std::size_t out_ch = c.hybrid.stage_channels[s];
      for (std::size_t b = 0; b < c.hybrid.stage_blocks[s]; ++b) {
        std::string prefix = "embed.stage" + std::to_string(s) + ".block" + std::to_string(b);
        std::size_t bin = b == 0 ? in_ch : out_ch;
        auto& blk = hy.stages[s][b];
        norm(prefix + ".gn1", bin, blk.gn1);
        conv(prefix + ".conv1", {out_ch, bin, 3, 3}, true, blk.conv1);
        norm(prefix + ".gn2", out_ch, blk.gn2);
        conv(prefix + ".conv2", {out_ch, out_ch, 3, 3}, true, blk.conv2);
        if (b == 0) conv(prefix + ".proj", {out_ch, bin, 1, 1}, true, blk.proj);
      }
      in_ch = out_ch;
    }
    lin("embed.token_proj", c.hybrid.stage_channels[2], d, hy.token_proj);
    learn("embed.pos", {c.pos_grid_h * c.pos_grid_w + 1, d}, ParamInit::TruncNormal, hy.pos);
    learn("embed.readout", {d}, ParamInit::TruncNormal, hy.readout);
  }

  for (std::size_t l = 1; l <= c.layers; ++l) {
    std::string prefix = "encoder.layer" + std::to_string(l);
    auto& lw = m.encoder.layers[l - 1];
    norm(prefix + ".ln1", d, lw.ln1);
    lin(prefix + ".attn.qkv", d, 3 * d, lw.attn.qkv);
    lin(prefix + ".attn.out", d, d, lw.attn.out);
    norm(prefix + ".ln2", d, lw.ln2);
    lin(prefix + ".mlp.fc1", d, c.mlp_hidden(), lw.fc1);
    lin(prefix + ".mlp.fc2", c.mlp_hidden(), d, lw.fc2);
  }

  for (std::size_t i = 0; i < 4; ++i) {
    std::string prefix = "reassemble" + std::to_string(i);
    bool token_hook = c.hooks[i].kind == HookPoint::Kind::Layer;
    if (c.readout == ReadoutMode::Project && token_hook)
      lin(prefix + ".readout_proj", 2 * d, d, m.reassemble[i].readout_proj);
    std::size_t in_ch = token_hook ? d : c.hybrid.stage_channels[c.hooks[i].index];
    conv(prefix + ".project", {dh, in_ch, 1, 1}, true, m.reassemble[i].resample.project);
    conv(prefix + ".resize", {dh, dh, 3, 3}, true, m.reassemble[i].resample.resize);
  }

  bool bn = m.use_bn();
  for (std::size_t i = 0; i < 4; ++i) {
    std::string prefix = "fusion" + std::to_string(i + 1);
    auto& fw = m.fusion[i];
    for (int r = 1; r <= 2; ++r) {
      auto& rcu = r == 1 ? fw.rcu1 : fw.rcu2;
      std::string rp = prefix + ".rcu" + std::to_string(r);
      conv(rp + ".conv1", {dh, dh, 3, 3}, !bn, rcu.conv1);
      if (bn) bnorm(rp + ".bn1", dh, rcu.bn1);
      conv(rp + ".conv2", {dh, dh, 3, 3}, !bn, rcu.conv2);
      if (bn) bnorm(rp + ".bn2", dh, rcu.bn2);
    }
    conv(prefix + ".project", {dh, dh, 1, 1}, true, fw.project);
  }

  if (c.head == HeadKind::Depth) {
    conv("head.conv1", {dh / 2, dh, 3, 3}, true, m.depth.conv1);
    conv("head.conv2", {32, dh / 2, 3, 3}, true, m.depth.conv2);
    conv("head.conv3", {1, 32, 1, 1}, true, m.depth.conv3);
  } else {
    auto seg_head = [&](const std::string& prefix, SegHeadWeights<T>& w) {
      conv(prefix + ".conv1", {dh, dh, 3, 3}, false, w.conv1);
      bnorm(prefix + ".bn", dh, w.bn);
      conv(prefix + ".classify", {c.num_classes, dh, 1, 1}, true, w.classify);
    };
    seg_head("head", m.seg);
    seg_head("aux_head", m.aux);
  }
}

// The full parameter inventory implied by a config; nothing is materialized.
inline ParameterPlan plan_parameters(const DptConfig& cfg) {
  DptModel<float> hollow(cfg);
  ParameterPlan plan;
  for_each_param(hollow, [&](const ParamSpec& spec, Tensor<float>&) { plan.push_back(spec); });
  return plan;
}

// Materializes a model with reproducible initialization: truncated normal
// (std 0.02) for weights and embeddings, zeros for biases, ones for norm
// gains.
template <typename T>
DptModel<T> build_model(const DptConfig& cfg, std::uint64_t seed) {
  DptModel<T> m(cfg);
  std::mt19937_64 rng(seed);
  for_each_param(m, [&](const ParamSpec& spec, Tensor<T>& slot) {
    Tensor<T> t(spec.shape);
    T* data = t.mutable_data();
    switch (spec.init) {
      case ParamInit::TruncNormal:
        for (std::size_t i = 0; i < t.numel(); ++i) data[i] = truncated_normal<T>(rng, 0.02);
        break;
      case ParamInit::One:
        for (std::size_t i = 0; i < t.numel(); ++i) data[i] = T(1);
        break;
      case ParamInit::Zero:
        break;
    }
    slot = std::move(t);
  });
  return m;
}

// Alternative initialization with fan-in-scaled weight variance and small
// random biases. The default (std 0.02) keeps desk-scale channel counts so
// narrow that activations collapse toward zero; use this when the model must
// actually train or be probed at O(1) activation scale.
template <typename T>
void fan_in_initialize(DptModel<T>& m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> small(-0.1, 0.1);
  std::uniform_real_distribution<double> gain(0.8, 1.2);
  for_each_param(m, [&](const ParamSpec& spec, Tensor<T>& slot) {
    if (spec.kind != ParamKind::Learnable) return;
    Tensor<T> t(spec.shape);
    T* d = t.mutable_data();
    if (spec.init == ParamInit::One) {
      for (std::size_t i = 0; i < t.numel(); ++i) d[i] = static_cast<T>(gain(rng));
    } else if (spec.shape.size() >= 2) {
      std::size_t fan_in = spec.shape.size() == 2
                               ? spec.shape[0]
                               : spec.shape[1] * spec.shape[2] * spec.shape[3];
      double stddev = std::sqrt(1.5 / static_cast<double>(fan_in));
      for (std::size_t i = 0; i < t.numel(); ++i) d[i] = truncated_normal<T>(rng, stddev);
    } else {
      for (std::size_t i = 0; i < t.numel(); ++i) d[i] = static_cast<T>(small(rng));
    }
    slot = std::move(t);
  });
}

template <typename T>
WeightArchive save_weights(DptModel<T>& m) {
  WeightArchive archive;
  for_each_param(m, [&](const ParamSpec& spec, Tensor<T>& slot) {
    check_shape(slot.shape() == spec.shape, "save_weights: unmaterialized model");
    archive.put(spec.name, slot);
  });
  return archive;
}

// Rebuilds a model from an archive, rejecting missing, extra, or misshapen
// records by name.
template <typename T>
DptModel<T> load_weights(const WeightArchive& archive, const DptConfig& cfg) {
  DptModel<T> m(cfg);
  std::size_t expected = 0;
  for_each_param(m, [&](const ParamSpec& spec, Tensor<T>& slot) {
    ++expected;
    if (!archive.contains(spec.name))
      throw ConfigError("load_weights: archive is missing record '" + spec.name + "'");
    Tensor<T> t = archive.get<T>(spec.name);
    if (t.shape() != spec.shape)
      throw ConfigError("load_weights: record '" + spec.name + "' has shape " +
                        shape_str(t.shape()) + ", config expects " + shape_str(spec.shape));
    slot = std::move(t);
  });
  if (archive.size() != expected) {
    std::set<std::string> known;
    for (const auto& spec : plan_parameters(cfg)) known.insert(spec.name);
    for (const auto& r : archive.records())
      if (!known.count(r.name))
        throw ConfigError("load_weights: archive has unexpected record '" + r.name + "'");
  }
  return m;
}

// Registers all learnable parameters as tape leaves; buffers stay untracked.
template <typename T>
void watch_parameters(DptModel<T>& m, GradTape<T>& tape) {
  for_each_param(m, [&](const ParamSpec& spec, Tensor<T>& slot) {
    if (spec.kind == ParamKind::Learnable) slot = tape.leaf(slot);
  });
}

template <typename T>
struct ForwardOutput {
  Tensor<T> prediction;  // depth: 1xHxW inverse depth; seg: CxHxW logits
  Tensor<T> aux_logits;  // populated for segmentation in training mode
  DecodeResult<T> decoded;
};

template <typename T>
ForwardOutput<T> forward(DptModel<T>& m, const Tensor<T>& image, bool train = false,
                         std::uint64_t dropout_seed = 0) {
  check_shape(image.rank() == 3 && image.extent(0) == 3, "forward: expected 3xHxW image");
  std::size_t h = image.extent(1), w = image.extent(2);
  check_shape(h % 32 == 0 && w % 32 == 0,
              "forward: image extents must be divisible by 32 (decoder stride), got " +
                  std::to_string(h) + "x" + std::to_string(w));
  auto taps = encode(image, m.cfg, m.encoder);
  auto maps = reassemble_all(taps, m.cfg, m.reassemble);
  ForwardOutput<T> out;
  out.decoded = decode(maps, m.fusion, m.use_bn(), train);
  if (m.cfg.head == HeadKind::Depth) {
    out.prediction = depth_head(out.decoded.final, m.depth);
  } else {
    std::mt19937_64 rng(dropout_seed);
    out.prediction = segmentation_head(out.decoded.final, m.seg, train, rng,
                                       m.cfg.dropout_rate, h, w);
    if (train)
      out.aux_logits = aux_segmentation_head(out.decoded.penultimate, m.aux, train, rng,
                                             m.cfg.dropout_rate, h, w);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape report and analytic FLOP estimate (2 FLOPs per multiply-accumulate).

struct StageShape {
  std::string name;
  Shape shape;
};

inline std::vector<StageShape> describe_shapes(const DptConfig& cfg, std::size_t h,
                                               std::size_t w) {
  check_config(h % 32 == 0 && w % 32 == 0, "describe: input must be divisible by 32");
  std::vector<StageShape> out;
  std::size_t stride = cfg.token_stride();
  std::size_t gh = h / stride, gw = w / stride;
  if (cfg.embedder == EmbedderKind::Hybrid) {
    out.push_back({"embed.R0", {cfg.hybrid.stage_channels[0], h / 4, w / 4}});
    out.push_back({"embed.R1", {cfg.hybrid.stage_channels[1], h / 8, w / 8}});
  }
  out.push_back({"encoder.tokens", {gh * gw + 1, cfg.embed_dim}});
  for (std::size_t i = 0; i < 4; ++i) {
    std::size_t s = cfg.scales[i];
    out.push_back({"reassemble" + std::to_string(i) + " (hook " + cfg.hooks[i].str() + ")",
                   {cfg.feature_dim, h / s, w / s}});
  }
  out.push_back({"decode.penultimate", {cfg.feature_dim, h / 4, w / 4}});
  out.push_back({"decode.final", {cfg.feature_dim, h / 2, w / 2}});
  if (cfg.head == HeadKind::Depth)
    out.push_back({"head.depth", {1, h, w}});
  else
    out.push_back({"head.logits", {cfg.num_classes, h, w}});
  return out;
}

// Forward-pass FLOPs of the dominant linear/conv/attention terms.
inline double estimate_flops(const DptConfig& cfg, std::size_t h, std::size_t w) {
  double macs = 0;
  std::size_t d = cfg.embed_dim, dh = cfg.feature_dim;
  std::size_t stride = cfg.token_stride();
  double gh = static_cast<double>(h) / stride, gw = static_cast<double>(w) / stride;
  double n = gh * gw + 1;
  if (cfg.embedder == EmbedderKind::Patch) {
    macs += gh * gw * (3.0 * cfg.patch_size * cfg.patch_size) * d;
  } else {
    double sh = h / 2.0, sw = w / 2.0;
    macs += sh * sw * cfg.hybrid.stem_channels * 3 * 9;
    std::size_t in_ch = cfg.hybrid.stem_channels;
    for (std::size_t s = 0; s < 3; ++s) {
      sh /= 2;
      sw /= 2;
      std::size_t out_ch = cfg.hybrid.stage_channels[s];
      for (std::size_t b = 0; b < cfg.hybrid.stage_blocks[s]; ++b) {
        std::size_t bin = b == 0 ? in_ch : out_ch;
        macs += sh * sw * out_ch * bin * 9;     // conv1
        macs += sh * sw * out_ch * out_ch * 9;  // conv2
        if (b == 0) macs += sh * sw * out_ch * bin;
      }
      in_ch = out_ch;
    }
    macs += gh * gw * in_ch * d;  // token projection
  }
  double per_layer = n * d * (3.0 * d)      // qkv
                     + 2.0 * n * n * d      // attention scores + weighted sum
                     + n * d * d            // output projection
                     + 2.0 * n * d * cfg.mlp_hidden();
  macs += per_layer * cfg.layers;
  for (std::size_t i = 0; i < 4; ++i) {
    std::size_t in_scale = stride;
    double in_ch = d;
    if (cfg.hooks[i].kind == HookPoint::Kind::ResnetStage) {
      in_scale = cfg.hooks[i].index == 0 ? 4 : 8;
      in_ch = static_cast<double>(cfg.hybrid.stage_channels[cfg.hooks[i].index]);
    } else if (cfg.readout == ReadoutMode::Project) {
      macs += gh * gw * (2.0 * d) * d;
    }
    double sp_in = (static_cast<double>(h) / in_scale) * (static_cast<double>(w) / in_scale);
    double sp_out = (static_cast<double>(h) / cfg.scales[i]) *
                    (static_cast<double>(w) / cfg.scales[i]);
    macs += sp_in * in_ch * dh;                        // 1x1 projection
    macs += std::max(sp_in, sp_out) * 9.0 * dh * dh;   // resize conv
  }
  for (std::size_t i = 0; i < 4; ++i) {
    double sp = (static_cast<double>(h) / cfg.scales[i]) *
                (static_cast<double>(w) / cfg.scales[i]);
    macs += 4.0 * sp * 9.0 * dh * dh;  // two RCUs, two convs each
    macs += 4.0 * sp * dh * dh;        // 1x1 projection at 2x resolution
  }
  double half = (h / 2.0) * (w / 2.0);
  if (cfg.head == HeadKind::Depth) {
    macs += half * dh * (dh / 2.0) * 9;
    macs += 4.0 * half * (dh / 2.0) * 32 * 9;
    macs += 4.0 * half * 32;
  } else {
    macs += half * dh * dh * 9;
    macs += half * dh * cfg.num_classes;
    macs += 4.0 * half * cfg.num_classes;  // bilinear taps on the logits
  }
  return 2.0 * macs;
}

}  // namespace dpt
