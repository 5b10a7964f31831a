#pragma once

#include <array>
#include <cstddef>

#include "dpt/features.hpp"
#include "dpt/hybrid.hpp"

namespace dpt {

// Batch normalization for a single CxHxW map. Training mode normalizes with
// the per-channel batch statistics (group_norm with one group per channel)
// and updates the running buffers in place; inference applies the stored
// running statistics as a per-channel affine.
template <typename T>
Tensor<T> batch_norm2d_train(const Tensor<T>& x, BatchNormWeights<T>& w, double momentum = 0.1,
                             double eps = 1e-5) {
  std::size_t c = x.extent(0), spatial = x.extent(1) * x.extent(2);
  auto y = group_norm(x, c, w.gamma, w.beta, eps);
  T* rm = w.running_mean.mutable_data();
  T* rv = w.running_var.mutable_data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mu = 0.0, var = 0.0;
    const T* plane = x.data() + ch * spatial;
    for (std::size_t i = 0; i < spatial; ++i) mu += plane[i];
    mu /= spatial;
    for (std::size_t i = 0; i < spatial; ++i) var += (plane[i] - mu) * (plane[i] - mu);
    var /= spatial;
    rm[ch] = static_cast<T>((1.0 - momentum) * rm[ch] + momentum * mu);
    rv[ch] = static_cast<T>((1.0 - momentum) * rv[ch] + momentum * var);
  }
  return y;
}

template <typename T>
Tensor<T> batch_norm2d_infer(const Tensor<T>& x, const BatchNormWeights<T>& w,
                             double eps = 1e-5) {
  std::size_t c = x.extent(0), spatial = x.extent(1) * x.extent(2);
  check_shape(w.gamma.numel() == c, "batch_norm: gamma length mismatch");
  std::vector<T> out(x.numel());
  std::vector<T> ch_scale(c), ch_shift(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double inv = 1.0 / std::sqrt(static_cast<double>(w.running_var.at(ch)) + eps);
    ch_scale[ch] = static_cast<T>(w.gamma.at(ch) * inv);
    ch_shift[ch] = static_cast<T>(w.beta.at(ch) - w.running_mean.at(ch) * w.gamma.at(ch) * inv);
  }
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < spatial; ++i)
      out[ch * spatial + i] = ch_scale[ch] * x.at(ch * spatial + i) + ch_shift[ch];
  auto px = x.shared_values();
  auto prm = w.running_mean.shared_values();
  auto pscale = std::make_shared<std::vector<T>>(std::move(ch_scale));
  int nx = x.node(), ng = w.gamma.node(), nb = w.beta.node();
  bool tx = x.tracked(), tg = w.gamma.tracked(), tb = w.beta.tracked();
  auto pinv = std::make_shared<std::vector<T>>(c);
  for (std::size_t ch = 0; ch < c; ++ch)
    (*pinv)[ch] =
        static_cast<T>(1.0 / std::sqrt(static_cast<double>(w.running_var.at(ch)) + eps));
  return detail::finish_op<T>(
      "batch_norm2d_infer", x.shape(), std::move(out),
      {&x, &w.gamma, &w.beta},
      [=](const std::vector<T>& g, GradTape<T>& tape) {
        if (tx) {
          auto& dx = tape.grad_buffer(nx);
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < spatial; ++i)
              dx[ch * spatial + i] += g[ch * spatial + i] * (*pscale)[ch];
        }
        if (tg) {
          auto& dg = tape.grad_buffer(ng);
          for (std::size_t ch = 0; ch < c; ++ch) {
            T acc = T(0);
            for (std::size_t i = 0; i < spatial; ++i)
              acc += g[ch * spatial + i] *
                     ((*px)[ch * spatial + i] - (*prm)[ch]) * (*pinv)[ch];
            dg[ch] += acc;
          }
        }
        if (tb) {
          auto& db = tape.grad_buffer(nb);
          for (std::size_t ch = 0; ch < c; ++ch) {
            T acc = T(0);
            for (std::size_t i = 0; i < spatial; ++i) acc += g[ch * spatial + i];
            db[ch] += acc;
          }
        }
      });
}

template <typename T>
struct RcuWeights {
  ConvWeights<T> conv1, conv2;  // 3x3; biases absent when batch norm follows
  BatchNormWeights<T> bn1, bn2;
};

// Residual convolutional unit: ReLU -> conv (-> BN) -> ReLU -> conv (-> BN),
// plus the identity skip. Shape preserving.
template <typename T>
FeatureMap<T> residual_conv_unit(const FeatureMap<T>& x, RcuWeights<T>& w, bool use_bn,
                                 bool train) {
  auto bn = [&](const Tensor<T>& z, BatchNormWeights<T>& b) {
    return train ? batch_norm2d_train(z, b) : batch_norm2d_infer(z, b);
  };
  auto z = conv2d(relu(x.data), w.conv1.weight, w.conv1.bias, 1, 1);
  if (use_bn) z = bn(z, w.bn1);
  z = conv2d(relu(z), w.conv2.weight, w.conv2.bias, 1, 1);
  if (use_bn) z = bn(z, w.bn2);
  return FeatureMap<T>(add(z, x.data));
}

template <typename T>
struct FusionBlockWeights {
  RcuWeights<T> rcu1, rcu2;
  ConvWeights<T> project;  // 1x1 after upsampling
};

// Combines the deeper path with an optional skip at the same resolution,
// refines, upsamples x2 and projects.
template <typename T>
FeatureMap<T> fusion_block(const FeatureMap<T>& deeper, const FeatureMap<T>* skip,
                           FusionBlockWeights<T>& w, bool use_bn, bool train) {
  Tensor<T> h = deeper.data;
  if (skip != nullptr) {
    check_shape(skip->channels() == deeper.channels() && skip->height() == deeper.height() &&
                    skip->width() == deeper.width(),
                "fusion_block: skip map " + shape_str(skip->data.shape()) +
                    " does not match deeper map " + shape_str(deeper.data.shape()));
    h = add(h, residual_conv_unit(*skip, w.rcu1, use_bn, train).data);
  }
  h = residual_conv_unit(FeatureMap<T>(h), w.rcu2, use_bn, train).data;
  h = bilinear_resize(h, 2 * deeper.height(), 2 * deeper.width());
  h = conv2d(h, w.project.weight, w.project.bias, 1, 0);
  return FeatureMap<T>(std::move(h));
}

template <typename T>
struct DecodeResult {
  FeatureMap<T> final;        // 1/2 of the input resolution
  FeatureMap<T> penultimate;  // tap for the auxiliary head, 1/4 resolution
};

// Chains the four fusion blocks from the 1/32 map upward. maps are ordered
// shallow -> deep (1/4 ... 1/32); weights[i] fuses maps[i].
template <typename T>
DecodeResult<T> decode(const std::array<FeatureMap<T>, 4>& maps,
                       std::array<FusionBlockWeights<T>, 4>& w, bool use_bn, bool train) {
  for (std::size_t i = 0; i + 1 < 4; ++i) {
    check_shape(maps[i].height() == 2 * maps[i + 1].height() &&
                    maps[i].width() == 2 * maps[i + 1].width() &&
                    maps[i].channels() == maps[i + 1].channels(),
                "decode: inconsistent feature pyramid between levels " + std::to_string(i) +
                    " and " + std::to_string(i + 1));
  }
  DecodeResult<T> out;
  auto x = fusion_block<T>(maps[3], nullptr, w[3], use_bn, train);
  x = fusion_block<T>(x, &maps[2], w[2], use_bn, train);
  x = fusion_block<T>(x, &maps[1], w[1], use_bn, train);
  out.penultimate = x;
  out.final = fusion_block<T>(x, &maps[0], w[0], use_bn, train);
  return out;
}

}  // namespace dpt
