#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "dpt/config.hpp"
#include "dpt/features.hpp"

namespace dpt {

// Normalizes each output-channel filter to zero mean / unit variance over its
// fan-in (population statistics).
template <typename T>
Tensor<T> weight_standardize(const Tensor<T>& w, double eps = 1e-10) {
  check_shape(w.rank() == 4, "weight_standardize: expected CoxCixkxk weights");
  std::size_t co = w.extent(0);
  std::size_t m = w.numel() / co;
  std::vector<T> out(w.numel());
  std::vector<T> hat(w.numel());
  std::vector<T> inv_std(co);
  for (std::size_t oc = 0; oc < co; ++oc) {
    const T* f = w.data() + oc * m;
    double mu = 0.0;
    for (std::size_t i = 0; i < m; ++i) mu += f[i];
    mu /= m;
    double var = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      double c = f[i] - mu;
      var += c * c;
    }
    var /= m;
    double inv = 1.0 / std::sqrt(var + eps);
    inv_std[oc] = static_cast<T>(inv);
    for (std::size_t i = 0; i < m; ++i) {
      T h = static_cast<T>((f[i] - mu) * inv);
      hat[oc * m + i] = h;
      out[oc * m + i] = h;
    }
  }
  auto phat = std::make_shared<std::vector<T>>(std::move(hat));
  auto pinv = std::make_shared<std::vector<T>>(std::move(inv_std));
  int nw = w.node();
  return detail::finish_op<T>(
      "weight_standardize", w.shape(), std::move(out), {&w},
      [nw, phat, pinv, co, m](const std::vector<T>& g, GradTape<T>& tape) {
        auto& dw = tape.grad_buffer(nw);
        for (std::size_t oc = 0; oc < co; ++oc) {
          const T* gr = g.data() + oc * m;
          const T* h = phat->data() + oc * m;
          double mean_g = 0.0, mean_gh = 0.0;
          for (std::size_t i = 0; i < m; ++i) {
            mean_g += gr[i];
            mean_gh += static_cast<double>(gr[i]) * h[i];
          }
          mean_g /= m;
          mean_gh /= m;
          for (std::size_t i = 0; i < m; ++i)
            dw[oc * m + i] += static_cast<T>((*pinv)[oc] * (gr[i] - mean_g - h[i] * mean_gh));
        }
      });
}

// Normalizes over (channels-per-group x spatial) per group, then applies a
// per-channel affine.
template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, std::size_t groups, const Tensor<T>& gamma,
                     const Tensor<T>& beta, double eps = 1e-5) {
  check_shape(x.rank() == 3, "group_norm: expected CxHxW input");
  std::size_t c = x.extent(0), spatial = x.extent(1) * x.extent(2);
  check_shape(groups >= 1 && c % groups == 0,
              "group_norm: " + std::to_string(c) + " channels not divisible by " +
                  std::to_string(groups) + " groups");
  check_shape(gamma.numel() == c && beta.numel() == c,
              "group_norm: gamma/beta must have one entry per channel");
  std::size_t cpg = c / groups;
  std::size_t m = cpg * spatial;
  std::vector<T> out(x.numel());
  std::vector<T> hat(x.numel());
  std::vector<T> inv_std(groups);
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const T* base = x.data() + gi * m;
    double mu = 0.0;
    for (std::size_t i = 0; i < m; ++i) mu += base[i];
    mu /= m;
    double var = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      double d = base[i] - mu;
      var += d * d;
    }
    var /= m;
    double inv = 1.0 / std::sqrt(var + eps);
    inv_std[gi] = static_cast<T>(inv);
    for (std::size_t i = 0; i < m; ++i) {
      std::size_t ch = gi * cpg + i / spatial;
      T h = static_cast<T>((base[i] - mu) * inv);
      hat[gi * m + i] = h;
      out[gi * m + i] = gamma.at(ch) * h + beta.at(ch);
    }
  }
  auto phat = std::make_shared<std::vector<T>>(std::move(hat));
  auto pinv = std::make_shared<std::vector<T>>(std::move(inv_std));
  auto pgamma = gamma.shared_values();
  int nx = x.node(), ng = gamma.node(), nb = beta.node();
  bool tx = x.tracked(), tg = gamma.tracked(), tb = beta.tracked();
  return detail::finish_op<T>(
      "group_norm", x.shape(), std::move(out), {&x, &gamma, &beta},
      [=](const std::vector<T>& g, GradTape<T>& tape) {
        if (tg) {
          auto& dg = tape.grad_buffer(ng);
          for (std::size_t i = 0; i < g.size(); ++i) dg[i / spatial] += g[i] * (*phat)[i];
        }
        if (tb) {
          auto& db = tape.grad_buffer(nb);
          for (std::size_t i = 0; i < g.size(); ++i) db[i / spatial] += g[i];
        }
        if (tx) {
          auto& dx = tape.grad_buffer(nx);
          for (std::size_t gi = 0; gi < groups; ++gi) {
            const T* gr = g.data() + gi * m;
            const T* h = phat->data() + gi * m;
            double mean_dh = 0.0, mean_dh_h = 0.0;
            for (std::size_t i = 0; i < m; ++i) {
              std::size_t ch = gi * cpg + i / spatial;
              double dh = static_cast<double>(gr[i]) * (*pgamma)[ch];
              mean_dh += dh;
              mean_dh_h += dh * h[i];
            }
            mean_dh /= m;
            mean_dh_h /= m;
            for (std::size_t i = 0; i < m; ++i) {
              std::size_t ch = gi * cpg + i / spatial;
              double dh = static_cast<double>(gr[i]) * (*pgamma)[ch];
              dx[gi * m + i] +=
                  static_cast<T>((*pinv)[gi] * (dh - mean_dh - h[i] * mean_dh_h));
            }
          }
        }
      });
}

// Pre-activation residual block: GN -> ReLU -> WS-conv, twice. The first
// block of a stage downsamples (stride 2) and projects the skip path.
template <typename T>
struct PreActBlockWeights {
  NormWeights<T> gn1, gn2;
  ConvWeights<T> conv1, conv2;  // 3x3, weight-standardized at use
  ConvWeights<T> proj;          // 1x1 skip projection, first block only
  bool downsample = false;
};

template <typename T>
struct HybridEmbedWeights {
  ConvWeights<T> stem;  // 3x3 stride-2 WS-conv
  std::array<std::vector<PreActBlockWeights<T>>, 3> stages;  // to 1/4, 1/8, 1/16
  LinearWeights<T> token_proj;  // 1/16-stage channels -> D
  Tensor<T> pos;
  Tensor<T> readout;
};

template <typename T>
Tensor<T> preact_block(const Tensor<T>& x, const PreActBlockWeights<T>& w,
                       const HybridConfig& cfg) {
  std::size_t in_ch = x.extent(0);
  std::size_t stride = w.downsample ? 2 : 1;
  auto h = relu(group_norm(x, cfg.groups_for(in_ch), w.gn1.gamma, w.gn1.beta));
  auto skip = w.downsample ? conv2d(h, w.proj.weight, w.proj.bias, stride, 0) : x;
  auto z = conv2d(h, weight_standardize(w.conv1.weight), w.conv1.bias, stride, 1);
  std::size_t out_ch = z.extent(0);
  z = relu(group_norm(z, cfg.groups_for(out_ch), w.gn2.gamma, w.gn2.beta));
  z = conv2d(z, weight_standardize(w.conv2.weight), w.conv2.bias, 1, 1);
  return add(z, skip);
}

template <typename T>
struct HybridOut {
  FeatureMap<T> r0;  // 1/4 resolution
  FeatureMap<T> r1;  // 1/8 resolution
  TokenSet<T> tokens;
};

// Convolutional embedding: stem (1/2) then three downsampling stages giving
// R0 (1/4), R1 (1/8) and the 1/16 token source. The config's fourth stage is
// declared for structural completeness but sits outside this forward path.
template <typename T>
HybridOut<T> embed_hybrid(const Tensor<T>& image, const DptConfig& cfg,
                          const HybridEmbedWeights<T>& w) {
  check_shape(image.rank() == 3 && image.extent(0) == 3,
              "embed_hybrid: expected 3xHxW image");
  std::size_t h = image.extent(1), wd = image.extent(2);
  check_shape(h % 16 == 0 && wd % 16 == 0,
              "embed_hybrid: image extents must be divisible by 16, got " +
                  std::to_string(h) + "x" + std::to_string(wd));
  auto x = conv2d(image, weight_standardize(w.stem.weight), w.stem.bias, 2, 1);
  HybridOut<T> out;
  for (std::size_t s = 0; s < 3; ++s) {
    for (const auto& block : w.stages[s]) x = preact_block(x, block, cfg.hybrid);
    if (s == 0) out.r0 = FeatureMap<T>(x);
    if (s == 1) out.r1 = FeatureMap<T>(x);
  }
  std::size_t gh = x.extent(1), gw = x.extent(2), c = x.extent(0);
  auto rows = transpose(reshape(x, {c, gh * gw}));
  auto tok = linear(rows, w.token_proj);
  out.tokens = assemble_tokens(tok, gh, gw, w.pos, cfg.pos_grid_h, cfg.pos_grid_w, w.readout);
  return out;
}

}  // namespace dpt
