#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "dpt/tensor.hpp"

namespace dpt {

// Prediction/ground-truth pair for depth evaluation. Predictions are
// affine-ambiguous inverse depth; the ground truth may be stored either as
// depth or as inverse depth.
struct DepthEvalPair {
  Tensor<double> prediction;    // H x W
  Tensor<double> ground_truth;  // H x W
  std::vector<std::uint8_t> valid_mask;
  bool gt_is_inverse_depth = false;

  void validate() const {
    check_shape(prediction.shape() == ground_truth.shape(),
                "depth pair: prediction/ground-truth shape mismatch");
    check_shape(valid_mask.size() == prediction.numel(), "depth pair: mask size mismatch");
    for (std::size_t i = 0; i < valid_mask.size(); ++i)
      if (valid_mask[i])
        check_shape(ground_truth.at(i) > 0.0,
                    "depth pair: masked-in ground truth must be strictly positive");
  }
};

struct AffineFit {
  double scale = 1.0;
  double shift = 0.0;
  bool degenerate = false;
};

// Closed-form least squares for min_{s,t} sum_mask (s*p + t - g)^2 via the
// 2x2 normal equations. Flags a degenerate system (constant prediction).
inline AffineFit align_affine_lsq(const DepthEvalPair& pair) {
  pair.validate();
  double spp = 0, sp = 0, sg = 0, spg = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < pair.prediction.numel(); ++i) {
    if (!pair.valid_mask[i]) continue;
    double p = pair.prediction.at(i);
    double g = pair.gt_is_inverse_depth ? pair.ground_truth.at(i)
                                        : 1.0 / pair.ground_truth.at(i);
    spp += p * p;
    sp += p;
    sg += g;
    spg += p * g;
    ++n;
  }
  check_shape(n >= 2, "align_affine_lsq: needs at least 2 masked-in pixels");
  double det = spp * static_cast<double>(n) - sp * sp;
  AffineFit fit;
  if (std::abs(det) <= 1e-12 * std::max(1.0, spp * static_cast<double>(n))) {
    fit.degenerate = true;
    return fit;
  }
  fit.scale = (spg * static_cast<double>(n) - sp * sg) / det;
  fit.shift = (spp * sg - sp * spg) / det;
  return fit;
}

// Mean of the per-pair scales and shifts.
inline AffineFit batch_align_average(const std::vector<DepthEvalPair>& pairs) {
  check_shape(!pairs.empty(), "batch_align_average: empty pair list");
  AffineFit acc;
  acc.scale = 0.0;
  for (const auto& pair : pairs) {
    AffineFit f = align_affine_lsq(pair);
    check_shape(!f.degenerate, "batch_align_average: degenerate pair");
    acc.scale += f.scale;
    acc.shift += f.shift;
  }
  acc.scale /= static_cast<double>(pairs.size());
  acc.shift /= static_cast<double>(pairs.size());
  return acc;
}

struct DepthMetrics {
  double abs_rel = 0;
  double rmse = 0;
  double rmse_log = 0;
  double log10 = 0;
  // delta_acc[k]: fraction with max(p/g, g/p) < 1.25^(k+1)  (higher better)
  // delta_err[k]: 100 * (1 - delta_acc[k])                  (lower better, %)
  std::array<double, 3> delta_acc{};
  std::array<double, 3> delta_err{};
  std::size_t pixel_count = 0;
};

// Metrics in the ground-truth *depth* domain over the mask. With
// `aligned == true` the prediction is least-squares aligned in inverse-depth
// space, clamped at `floor`, and inverted first; otherwise it is compared
// as-is.
inline DepthMetrics depth_metrics(const DepthEvalPair& pair, bool aligned,
                                  double floor = 1e-8) {
  pair.validate();
  double s = 1.0, t = 0.0;
  if (aligned) {
    AffineFit fit = align_affine_lsq(pair);
    check_shape(!fit.degenerate, "depth_metrics: degenerate alignment (constant prediction)");
    s = fit.scale;
    t = fit.shift;
  }
  DepthMetrics m;
  double se = 0, se_log = 0;
  for (std::size_t i = 0; i < pair.prediction.numel(); ++i) {
    if (!pair.valid_mask[i]) continue;
    double g =
        pair.gt_is_inverse_depth ? 1.0 / pair.ground_truth.at(i) : pair.ground_truth.at(i);
    double p = pair.prediction.at(i);
    if (aligned) p = 1.0 / std::max(s * p + t, floor);
    double pc = std::max(p, floor);
    m.abs_rel += std::abs(p - g) / g;
    se += (p - g) * (p - g);
    se_log += (std::log(pc) - std::log(g)) * (std::log(pc) - std::log(g));
    m.log10 += std::abs(std::log10(pc) - std::log10(g));
    double delta = std::max(p / g, g / p);
    double thresh = 1.25;
    for (int k = 0; k < 3; ++k) {
      if (delta < thresh) m.delta_acc[k] += 1.0;
      thresh *= 1.25;
    }
    ++m.pixel_count;
  }
  check_shape(m.pixel_count > 0, "depth_metrics: empty mask");
  double n = static_cast<double>(m.pixel_count);
  m.abs_rel /= n;
  m.rmse = std::sqrt(se / n);
  m.rmse_log = std::sqrt(se_log / n);
  m.log10 /= n;
  for (int k = 0; k < 3; ++k) {
    m.delta_acc[k] /= n;
    m.delta_err[k] = 100.0 * (1.0 - m.delta_acc[k]);
  }
  return m;
}

// Ordinal depth relation between two pixels, for WHDR.
struct OrdinalPair {
  std::size_t ax = 0, ay = 0;
  std::size_t bx = 0, by = 0;
  enum class Relation { ACloser, BCloser } relation = Relation::ACloser;
};

// Disagreement rate between predicted and annotated ordinal relations. The
// prediction is an inverse-depth map (larger = closer); the predicted
// relation uses a multiplicative margin on the ratio, and an inconclusive
// ratio counts as a disagreement.
inline double whdr(const Tensor<double>& pred, const std::vector<OrdinalPair>& pairs,
                   double margin = 0.03, double floor = 1e-8) {
  check_shape(pred.rank() == 2, "whdr: prediction must be HxW");
  check_shape(!pairs.empty(), "whdr: empty pair list");
  std::size_t h = pred.extent(0), w = pred.extent(1);
  std::size_t disagree = 0;
  for (const auto& pr : pairs) {
    check_shape(pr.ax < w && pr.ay < h && pr.bx < w && pr.by < h,
                "whdr: pair outside the image");
    double pa = std::max(pred.at(pr.ay, pr.ax), floor);
    double pb = std::max(pred.at(pr.by, pr.bx), floor);
    double ratio = pa / pb;
    int predicted = 0;  // 1: a closer, -1: b closer, 0: inconclusive
    if (ratio > 1.0 + margin)
      predicted = 1;
    else if (ratio < 1.0 / (1.0 + margin))
      predicted = -1;
    int labeled = pr.relation == OrdinalPair::Relation::ACloser ? 1 : -1;
    if (predicted != labeled) ++disagree;
  }
  return static_cast<double>(disagree) / static_cast<double>(pairs.size());
}

struct SegMetrics {
  double pixel_acc = 0;
  double miou = 0;
  std::vector<double> per_class_iou;  // -1 for classes absent from gt and pred
};

// Pixel accuracy and IoU from the confusion counts over non-ignored pixels.
// mIoU averages classes with a nonzero union.
inline SegMetrics seg_metrics(const std::vector<int>& pred, const std::vector<int>& gt,
                              std::size_t num_classes, int ignore_label = -1) {
  check_shape(pred.size() == gt.size(), "seg_metrics: size mismatch");
  std::vector<std::size_t> tp(num_classes, 0), fp(num_classes, 0), fn(num_classes, 0);
  std::size_t correct = 0, total = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (gt[i] == ignore_label) continue;
    check_shape(gt[i] >= 0 && gt[i] < static_cast<int>(num_classes) && pred[i] >= 0 &&
                    pred[i] < static_cast<int>(num_classes),
                "seg_metrics: label outside [0, num_classes)");
    ++total;
    if (pred[i] == gt[i]) {
      ++correct;
      ++tp[gt[i]];
    } else {
      ++fp[pred[i]];
      ++fn[gt[i]];
    }
  }
  check_shape(total > 0, "seg_metrics: no valid pixels");
  SegMetrics m;
  m.pixel_acc = static_cast<double>(correct) / static_cast<double>(total);
  m.per_class_iou.assign(num_classes, -1.0);
  double iou_sum = 0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::size_t uni = tp[c] + fp[c] + fn[c];
    if (uni == 0) continue;
    m.per_class_iou[c] = static_cast<double>(tp[c]) / static_cast<double>(uni);
    iou_sum += m.per_class_iou[c];
    ++present;
  }
  m.miou = present ? iou_sum / static_cast<double>(present) : 0.0;
  return m;
}

// 100 * (new - baseline) / baseline; negative is an improvement for
// lower-better metrics.
inline double relative_improvement(double new_value, double baseline) {
  check_config(baseline != 0.0, "relative_improvement: zero baseline");
  return 100.0 * (new_value - baseline) / baseline;
}

// ---------------------------------------------------------------------------
// Differentiable losses.

// Mean negative log-softmax of the true class over non-ignored pixels.
// logits: num_classes x H x W, labels: row-major H*W.
template <typename T>
Tensor<T> cross_entropy_loss(const Tensor<T>& logits, const std::vector<int>& labels,
                             int ignore_label = -1) {
  check_shape(logits.rank() == 3, "cross_entropy: logits must be CxHxW");
  std::size_t c = logits.extent(0), spatial = logits.extent(1) * logits.extent(2);
  check_shape(labels.size() == spatial, "cross_entropy: label map size mismatch");
  auto probs = std::make_shared<std::vector<T>>(logits.numel());
  double loss = 0.0;
  std::size_t valid = 0;
  for (std::size_t i = 0; i < spatial; ++i) {
    if (labels[i] == ignore_label) continue;
    check_shape(labels[i] >= 0 && labels[i] < static_cast<int>(c),
                "cross_entropy: label outside [0, num_classes)");
    T mx = logits.at(i);
    for (std::size_t ch = 1; ch < c; ++ch) mx = std::max(mx, logits.at(ch * spatial + i));
    double denom = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch)
      denom += std::exp(static_cast<double>(logits.at(ch * spatial + i) - mx));
    for (std::size_t ch = 0; ch < c; ++ch)
      (*probs)[ch * spatial + i] = static_cast<T>(
          std::exp(static_cast<double>(logits.at(ch * spatial + i) - mx)) / denom);
    loss -= std::log(
        std::max(static_cast<double>((*probs)[labels[i] * spatial + i]), 1e-300));
    ++valid;
  }
  check_shape(valid > 0, "cross_entropy: all pixels ignored");
  loss /= static_cast<double>(valid);
  int nl = logits.node();
  auto plabels = std::make_shared<std::vector<int>>(labels);
  return detail::finish_op<T>(
      "cross_entropy_loss", Shape{1}, std::vector<T>{static_cast<T>(loss)}, {&logits},
      [nl, probs, plabels, c, spatial, valid, ignore_label](const std::vector<T>& g,
                                                            GradTape<T>& tape) {
        auto& dl = tape.grad_buffer(nl);
        T inv = g[0] / static_cast<T>(valid);
        for (std::size_t i = 0; i < spatial; ++i) {
          int lab = (*plabels)[i];
          if (lab == ignore_label) continue;
          for (std::size_t ch = 0; ch < c; ++ch) {
            T p = (*probs)[ch * spatial + i];
            dl[ch * spatial + i] += inv * (p - (static_cast<int>(ch) == lab ? T(1) : T(0)));
          }
        }
      });
}

// Mean squared error over masked-in pixels.
template <typename T>
Tensor<T> masked_mse_loss(const Tensor<T>& pred, const Tensor<T>& gt,
                          const std::vector<std::uint8_t>& mask) {
  check_shape(pred.shape() == gt.shape(), "masked_mse: shape mismatch");
  check_shape(mask.size() == pred.numel(), "masked_mse: mask size mismatch");
  std::size_t valid = 0;
  double loss = 0.0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    if (!mask[i]) continue;
    double d = static_cast<double>(pred.at(i)) - static_cast<double>(gt.at(i));
    loss += d * d;
    ++valid;
  }
  check_shape(valid > 0, "masked_mse: empty mask");
  loss /= static_cast<double>(valid);
  auto pp = pred.shared_values();
  auto pg = gt.shared_values();
  auto pm = std::make_shared<std::vector<std::uint8_t>>(mask);
  int np = pred.node(), ng = gt.node();
  bool tp = pred.tracked(), tg = gt.tracked();
  return detail::finish_op<T>(
      "masked_mse_loss", Shape{1}, std::vector<T>{static_cast<T>(loss)}, {&pred, &gt},
      [=](const std::vector<T>& g, GradTape<T>& tape) {
        T inv = g[0] * T(2) / static_cast<T>(valid);
        if (tp) {
          auto& dp = tape.grad_buffer(np);
          for (std::size_t i = 0; i < pp->size(); ++i)
            if ((*pm)[i]) dp[i] += inv * ((*pp)[i] - (*pg)[i]);
        }
        if (tg) {
          auto& dg = tape.grad_buffer(ng);
          for (std::size_t i = 0; i < pp->size(); ++i)
            if ((*pm)[i]) dg[i] -= inv * ((*pp)[i] - (*pg)[i]);
        }
      });
}

// ---------------------------------------------------------------------------
// Report emission: line-oriented key=value text and JSON.

inline nlohmann::json to_json(const DepthMetrics& m) {
  nlohmann::json j;
  j["abs_rel"] = m.abs_rel;
  j["rmse"] = m.rmse;
  j["rmse_log"] = m.rmse_log;
  j["log10"] = m.log10;
  j["pixels"] = m.pixel_count;
  for (int k = 0; k < 3; ++k) {
    j["delta_acc_" + std::to_string(k + 1)] = m.delta_acc[k];
    j["delta_err_" + std::to_string(k + 1)] = m.delta_err[k];
  }
  return j;
}

inline nlohmann::json to_json(const SegMetrics& m) {
  nlohmann::json j;
  j["pix_acc"] = m.pixel_acc;
  j["miou"] = m.miou;
  nlohmann::json per = nlohmann::json::object();
  for (std::size_t c = 0; c < m.per_class_iou.size(); ++c)
    if (m.per_class_iou[c] >= 0.0) per[std::to_string(c)] = m.per_class_iou[c];
  j["per_class_iou"] = per;
  return j;
}

inline std::string to_kv_text(const nlohmann::json& j, const std::string& prefix = "") {
  std::string out;
  for (auto it = j.begin(); it != j.end(); ++it) {
    std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it->is_object()) {
      out += to_kv_text(*it, key);
    } else {
      out += key + "=" + it->dump() + "\n";
    }
  }
  return out;
}

}  // namespace dpt
