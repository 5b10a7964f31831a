#pragma once

#include <cmath>
#include <cstddef>
#include <variant>
#include <vector>

#include "dpt/config.hpp"
#include "dpt/features.hpp"
#include "dpt/hybrid.hpp"

namespace dpt {

template <typename T>
struct AttentionWeights {
  LinearWeights<T> qkv;  // [D, 3D]
  LinearWeights<T> out;  // [D, D]
};

template <typename T>
struct TransformerLayerWeights {
  NormWeights<T> ln1, ln2;
  AttentionWeights<T> attn;
  LinearWeights<T> fc1, fc2;
};

template <typename T>
struct VitEmbedWeights {
  LinearWeights<T> patch_proj;  // [3p^2, D]
  Tensor<T> pos;                // [(grid_h*grid_w)+1, D]
  Tensor<T> readout;            // [D]
};

// Rearranges a 3xHxW image into (HW/p^2) rows of flattened p x p patches.
// Row (py*wp + px) holds the patch features in (channel, y, x) order.
template <typename T>
Tensor<T> extract_patches(const Tensor<T>& image, std::size_t p) {
  check_shape(image.rank() == 3 && image.extent(0) == 3, "extract_patches: expected 3xHxW");
  std::size_t h = image.extent(1), w = image.extent(2);
  check_shape(p >= 1 && h % p == 0 && w % p == 0,
              "extract_patches: image " + std::to_string(h) + "x" + std::to_string(w) +
                  " not divisible by patch size " + std::to_string(p));
  std::size_t hp = h / p, wp = w / p, cols = 3 * p * p;
  std::vector<T> out(hp * wp * cols);
  for (std::size_t py = 0; py < hp; ++py)
    for (std::size_t px = 0; px < wp; ++px) {
      T* row = out.data() + (py * wp + px) * cols;
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < p; ++y)
          for (std::size_t x = 0; x < p; ++x)
            row[(c * p + y) * p + x] = image.at(c, py * p + y, px * p + x);
    }
  int ni = image.node();
  return detail::finish_op<T>(
      "extract_patches", Shape{hp * wp, cols}, std::move(out), {&image},
      [ni, h, w, p, hp, wp, cols](const std::vector<T>& g, GradTape<T>& tape) {
        auto& di = tape.grad_buffer(ni);
        for (std::size_t py = 0; py < hp; ++py)
          for (std::size_t px = 0; px < wp; ++px) {
            const T* row = g.data() + (py * wp + px) * cols;
            for (std::size_t c = 0; c < 3; ++c)
              for (std::size_t y = 0; y < p; ++y)
                for (std::size_t x = 0; x < p; ++x)
                  di[(c * h + py * p + y) * w + px * p + x] += row[(c * p + y) * p + x];
          }
      });
}

template <typename T>
TokenSet<T> embed_patches(const Tensor<T>& image, const DptConfig& cfg,
                          const VitEmbedWeights<T>& w) {
  std::size_t p = cfg.patch_size;
  auto rows = linear(extract_patches(image, p), w.patch_proj);
  return assemble_tokens(rows, image.extent(1) / p, image.extent(2) / p, w.pos, cfg.pos_grid_h,
                         cfg.pos_grid_w, w.readout);
}

// Multi-headed self-attention sublayer (qkv + output projections, no
// residual). Token count and grid are preserved.
template <typename T>
TokenSet<T> mhsa(const TokenSet<T>& ts, const AttentionWeights<T>& w, std::size_t heads) {
  std::size_t d = ts.dim();
  check_shape(heads >= 1 && d % heads == 0,
              "mhsa: dim " + std::to_string(d) + " not divisible by " + std::to_string(heads) +
                  " heads");
  std::size_t dh = d / heads;
  T att_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  auto qkv = linear(ts.tokens, w.qkv);
  std::vector<Tensor<T>> ctx;
  ctx.reserve(heads);
  for (std::size_t hd = 0; hd < heads; ++hd) {
    auto q = slice_cols(qkv, hd * dh, (hd + 1) * dh);
    auto k = slice_cols(qkv, d + hd * dh, d + (hd + 1) * dh);
    auto v = slice_cols(qkv, 2 * d + hd * dh, 2 * d + (hd + 1) * dh);
    auto att = softmax(scale(matmul(q, transpose(k)), att_scale));
    ctx.push_back(matmul(att, v));
  }
  TokenSet<T> out = ts;
  out.tokens = linear(hstack(ctx), w.out);
  return out;
}

// Pre-norm residual block: t + MHSA(LN(t)), then + MLP(LN(.)).
template <typename T>
TokenSet<T> transformer_layer(const TokenSet<T>& ts, const TransformerLayerWeights<T>& w,
                              std::size_t heads) {
  ts.validate();
  TokenSet<T> normed = ts;
  normed.tokens = layer_norm(ts.tokens, w.ln1.gamma, w.ln1.beta);
  auto h = add(ts.tokens, mhsa(normed, w.attn, heads).tokens);
  auto h2 = layer_norm(h, w.ln2.gamma, w.ln2.beta);
  auto mlp = linear(gelu(linear(h2, w.fc1)), w.fc2);
  TokenSet<T> out = ts;
  out.tokens = add(h, mlp);
  out.layer_tag = ts.layer_tag + 1;
  return out;
}

template <typename T>
using HookOutput = std::variant<TokenSet<T>, FeatureMap<T>>;

template <typename T>
struct EncoderWeights {
  VitEmbedWeights<T> patch;     // populated when cfg.embedder == Patch
  HybridEmbedWeights<T> hybrid;  // populated when cfg.embedder == Hybrid
  std::vector<TransformerLayerWeights<T>> layers;
};

// Runs the embedding and all L transformer layers, capturing the configured
// taps. Outputs are ordered shallow -> deep (R0/R1 first for hybrid).
template <typename T>
std::vector<HookOutput<T>> encode(const Tensor<T>& image, const DptConfig& cfg,
                                  const EncoderWeights<T>& w) {
  std::vector<HookOutput<T>> taps(4);
  TokenSet<T> ts;
  if (cfg.embedder == EmbedderKind::Hybrid) {
    auto emb = embed_hybrid(image, cfg, w.hybrid);
    ts = emb.tokens;
    for (std::size_t i = 0; i < 4; ++i) {
      if (cfg.hooks[i].kind != HookPoint::Kind::ResnetStage) continue;
      taps[i] = cfg.hooks[i].index == 0 ? emb.r0 : emb.r1;
    }
  } else {
    ts = embed_patches(image, cfg, w.patch);
  }
  check_shape(w.layers.size() == cfg.layers, "encode: layer weight count mismatch");
  for (std::size_t l = 1; l <= cfg.layers; ++l) {
    ts = transformer_layer(ts, w.layers[l - 1], cfg.heads);
    for (std::size_t i = 0; i < 4; ++i)
      if (cfg.hooks[i].kind == HookPoint::Kind::Layer &&
          cfg.hooks[i].index == static_cast<int>(l))
        taps[i] = ts;
  }
  return taps;
}

}  // namespace dpt
