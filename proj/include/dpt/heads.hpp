#pragma once

#include <cstddef>
#include <random>

#include "dpt/features.hpp"
#include "dpt/fusion.hpp"
#include "dpt/metrics.hpp"

namespace dpt {

template <typename T>
struct DepthHeadWeights {
  ConvWeights<T> conv1;  // 3x3, halves the feature dimension
  ConvWeights<T> conv2;  // 3x3, to 32 channels
  ConvWeights<T> conv3;  // 1x1, to the scalar inverse-depth channel
};

// Maps the half-resolution decoder output to a full-resolution, non-negative
// inverse-depth map. Upsampling happens right after the first convolution.
template <typename T>
Tensor<T> depth_head(const FeatureMap<T>& f, const DepthHeadWeights<T>& w) {
  auto z = conv2d(f.data, w.conv1.weight, w.conv1.bias, 1, 1);
  z = bilinear_resize(z, 2 * f.height(), 2 * f.width());
  z = relu(conv2d(z, w.conv2.weight, w.conv2.bias, 1, 1));
  z = relu(conv2d(z, w.conv3.weight, w.conv3.bias, 1, 0));
  return z;
}

template <typename T>
struct SegHeadWeights {
  ConvWeights<T> conv1;  // 3x3, feature-preserving, no bias (BN follows)
  BatchNormWeights<T> bn;
  ConvWeights<T> classify;  // 1x1 to num_classes
};

// Per-pixel class logits, predicted at the decoder resolution and bilinearly
// upsampled to (out_h, out_w). Dropout runs only in training mode.
template <typename T>
Tensor<T> segmentation_head(const FeatureMap<T>& f, SegHeadWeights<T>& w, bool train,
                            std::mt19937_64& rng, double dropout_rate, std::size_t out_h,
                            std::size_t out_w) {
  auto z = conv2d(f.data, w.conv1.weight, w.conv1.bias, 1, 1);
  z = train ? batch_norm2d_train(z, w.bn) : batch_norm2d_infer(z, w.bn);
  z = relu(z);
  if (train) z = dropout(z, dropout_rate, rng);
  z = conv2d(z, w.classify.weight, w.classify.bias, 1, 0);
  return bilinear_resize(z, out_h, out_w);
}

// The auxiliary head shares the structure of the main head and consumes the
// penultimate fusion tap.
template <typename T>
Tensor<T> aux_segmentation_head(const FeatureMap<T>& penultimate, SegHeadWeights<T>& w,
                                bool train, std::mt19937_64& rng, double dropout_rate,
                                std::size_t out_h, std::size_t out_w) {
  return segmentation_head(penultimate, w, train, rng, dropout_rate, out_h, out_w);
}

// Training objective: main cross-entropy plus `aux_weight` times the
// auxiliary cross-entropy.
template <typename T>
Tensor<T> combined_seg_loss(const Tensor<T>& main_logits, const Tensor<T>& aux_logits,
                            const std::vector<int>& labels, int ignore_label, T aux_weight) {
  auto main_loss = cross_entropy_loss(main_logits, labels, ignore_label);
  if (aux_weight == T(0)) return main_loss;
  auto aux_loss = cross_entropy_loss(aux_logits, labels, ignore_label);
  return add(main_loss, scale(aux_loss, aux_weight));
}

}  // namespace dpt
