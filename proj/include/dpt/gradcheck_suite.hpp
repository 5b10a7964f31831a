#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "dpt/fusion.hpp"
#include "dpt/gradcheck.hpp"
#include "dpt/heads.hpp"
#include "dpt/model.hpp"

namespace dpt {

struct GradcheckSuiteEntry {
  std::string name;
  GradcheckReport report;
};

struct GradcheckSuiteResult {
  std::vector<GradcheckSuiteEntry> entries;
  bool all_pass = true;

  void add(const std::string& name, GradcheckReport rep) {
    all_pass = all_pass && rep.pass;
    entries.push_back({name, std::move(rep)});
  }
};

namespace detail {

inline Tensor<double> suite_rand(Shape shape, std::mt19937_64& rng, double lo = -1.0,
                                 double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  double* d = t.mutable_data();
  for (std::size_t i = 0; i < t.numel(); ++i) d[i] = dist(rng);
  return t;
}

}  // namespace detail

// Finite-difference checks for every differentiable primitive, on small
// fixtures. Each output is scalarized through random positive weights so no
// output element can hide.
inline GradcheckSuiteResult run_primitive_gradchecks(double h = 1e-5, double tol = 1e-4) {
  using detail::suite_rand;
  std::mt19937_64 rng(20240811);
  GradcheckSuiteResult result;
  auto weigh = [&](const Shape& s) { return suite_rand(s, rng, 0.5, 1.5); };
  auto check1 = [&](const std::string& name,
                    std::function<Tensor<double>(const std::vector<Tensor<double>>&)> f,
                    std::vector<Tensor<double>> leaves) {
    result.add(name, gradcheck(f, leaves, h, tol));
  };

  auto a = suite_rand({3, 4}, rng), b = suite_rand({3, 4}, rng);
  auto wab = weigh({3, 4});
  check1("add", [wab](const auto& in) { return sum(mul(add(in[0], in[1]), wab)); }, {a, b});
  check1("sub", [wab](const auto& in) { return sum(mul(sub(in[0], in[1]), wab)); }, {a, b});
  check1("mul", [](const auto& in) { return sum(mul(in[0], in[1])); }, {a, b});
  check1("scale", [wab](const auto& in) { return sum(mul(scale(in[0], -1.7), wab)); }, {a});
  check1("add_scalar", [wab](const auto& in) { return sum(mul(add_scalar(in[0], 0.3), wab)); },
         {a});

  auto x1 = suite_rand({24}, rng, -2.0, 2.0);
  auto w1 = weigh({24});
  check1("relu", [w1](const auto& in) { return sum(mul(relu(in[0]), w1)); }, {x1});
  check1("gelu", [w1](const auto& in) { return sum(mul(gelu(in[0]), w1)); }, {x1});

  auto ma = suite_rand({4, 5}, rng), mb = suite_rand({5, 3}, rng);
  auto wm = weigh({4, 3});
  check1("matmul", [wm](const auto& in) { return sum(mul(matmul(in[0], in[1]), wm)); },
         {ma, mb});
  auto wt = weigh({5, 4});
  check1("transpose", [wt](const auto& in) { return sum(mul(transpose(in[0]), wt)); }, {ma});
  auto wr = weigh({20});
  check1("reshape", [wr](const auto& in) { return sum(mul(reshape(in[0], {20}), wr)); }, {ma});
  check1("sum", [](const auto& in) { return sum(in[0]); }, {ma});
  check1("mean", [](const auto& in) { return mean(in[0]); }, {ma});

  auto v = suite_rand({5}, rng);
  auto wrv = weigh({4, 5});
  check1("add_rowvec", [wrv](const auto& in) { return sum(mul(add_rowvec(in[0], in[1]), wrv)); },
         {ma, v});
  auto wtr = weigh({3, 5});
  check1("tile_row", [wtr](const auto& in) { return sum(mul(tile_row(in[0], 3), wtr)); }, {v});

  auto h1 = suite_rand({3, 2}, rng), h2 = suite_rand({3, 3}, rng);
  auto wh = weigh({3, 5});
  check1("hstack",
         [wh](const auto& in) { return sum(mul(hstack<double>({in[0], in[1]}), wh)); },
         {h1, h2});
  auto v1 = suite_rand({1, 4}, rng), v2 = suite_rand({2, 4}, rng);
  auto wv = weigh({3, 4});
  check1("vstack", [wv](const auto& in) { return sum(mul(vstack(in[0], in[1]), wv)); },
         {v1, v2});
  auto wsc = weigh({4, 2});
  check1("slice_cols", [wsc](const auto& in) { return sum(mul(slice_cols(in[0], 1, 3), wsc)); },
         {ma});
  auto wsr = weigh({2, 5});
  check1("slice_rows", [wsr](const auto& in) { return sum(mul(slice_rows(in[0], 1, 3), wsr)); },
         {ma});

  auto sx = suite_rand({2, 6}, rng, -2.0, 2.0);
  auto ws = weigh({2, 6});
  check1("softmax", [ws](const auto& in) { return sum(mul(softmax(in[0]), ws)); }, {sx});
  auto gamma = suite_rand({6}, rng, 0.5, 1.5);
  auto beta = suite_rand({6}, rng);
  check1("layer_norm",
         [ws](const auto& in) { return sum(mul(layer_norm(in[0], in[1], in[2]), ws)); },
         {sx, gamma, beta});

  auto img = suite_rand({2, 5, 5}, rng);
  auto cw = suite_rand({3, 2, 3, 3}, rng);
  auto cb = suite_rand({3}, rng);
  auto wc = weigh({3, 3, 3});
  check1("conv2d",
         [wc](const auto& in) { return sum(mul(conv2d(in[0], in[1], in[2], 2, 1), wc)); },
         {img, cw, cb});
  auto tw = suite_rand({2, 3, 3, 3}, rng);
  auto wct = weigh({3, 10, 10});
  check1("conv_transpose2d",
         [wct](const auto& in) {
           return sum(mul(conv_transpose2d(in[0], in[1], in[2], 2, 1, 1), wct));
         },
         {img, tw, cb});
  auto wbr = weigh({2, 8, 7});
  check1("bilinear_resize",
         [wbr](const auto& in) { return sum(mul(bilinear_resize(in[0], 8, 7), wbr)); }, {img});

  auto full_img = suite_rand({3, 8, 8}, rng);
  auto wep = weigh({4, 48});
  check1("extract_patches",
         [wep](const auto& in) { return sum(mul(extract_patches(in[0], 4), wep)); },
         {full_img});

  auto gx = suite_rand({4, 3, 3}, rng);
  auto ggamma = suite_rand({4}, rng, 0.5, 1.5);
  auto gbeta = suite_rand({4}, rng);
  auto wg = weigh({4, 3, 3});
  check1("group_norm",
         [wg](const auto& in) { return sum(mul(group_norm(in[0], 2, in[1], in[2]), wg)); },
         {gx, ggamma, gbeta});
  auto wsw = suite_rand({2, 2, 3, 3}, rng);
  auto wws = weigh({2, 2, 3, 3});
  check1("weight_standardize",
         [wws](const auto& in) { return sum(mul(weight_standardize(in[0]), wws)); }, {wsw});

  check1("batch_norm2d_train",
         [wg, gx](const auto& in) {
           BatchNormWeights<double> bn;
           bn.gamma = in[1];
           bn.beta = in[2];
           bn.running_mean = Tensor<double>::zeros({4});
           bn.running_var = Tensor<double>::ones({4});
           return sum(mul(batch_norm2d_train(in[0], bn), wg));
         },
         {gx, ggamma, gbeta});
  check1("batch_norm2d_infer",
         [wg](const auto& in) {
           BatchNormWeights<double> bn;
           bn.gamma = in[1];
           bn.beta = in[2];
           bn.running_mean = Tensor<double>({4}, {0.1, -0.2, 0.3, 0.0});
           bn.running_var = Tensor<double>({4}, {1.1, 0.9, 1.3, 0.7});
           return sum(mul(batch_norm2d_infer(in[0], bn), wg));
         },
         {gx, ggamma, gbeta});

  check1("dropout",
         [wg](const auto& in) {
           std::mt19937_64 drop_rng(7);  // fixed mask across FD evaluations
           return sum(mul(dropout(in[0], 0.4, drop_rng), wg));
         },
         {gx});

  auto logits = suite_rand({3, 2, 2}, rng);
  std::vector<int> labels = {0, 2, -1, 1};
  check1("cross_entropy_loss",
         [labels](const auto& in) { return cross_entropy_loss(in[0], labels, -1); }, {logits});
  auto mse_pred = suite_rand({3, 3}, rng);
  auto mse_gt = suite_rand({3, 3}, rng);
  std::vector<std::uint8_t> mask = {1, 0, 1, 1, 1, 0, 1, 1, 1};
  check1("masked_mse_loss",
         [mask](const auto& in) { return masked_mse_loss(in[0], in[1], mask); },
         {mse_pred, mse_gt});

  return result;
}

namespace detail {

// Collect learnable leaves in walker order; rebuild a model from a perturbed
// or tracked copy of that list (buffers come from the prototype).
template <typename T>
std::vector<Tensor<T>> collect_learnable(DptModel<T>& m) {
  std::vector<Tensor<T>> out;
  for_each_param(m, [&](const ParamSpec& spec, Tensor<T>& slot) {
    if (spec.kind == ParamKind::Learnable) out.push_back(slot);
  });
  return out;
}

template <typename T>
DptModel<T> rebind_learnable(const DptModel<T>& prototype,
                             const std::vector<Tensor<T>>& leaves) {
  DptModel<T> m = prototype;
  std::size_t i = 0;
  for_each_param(m, [&](const ParamSpec& spec, Tensor<T>& slot) {
    if (spec.kind == ParamKind::Learnable) slot = leaves[i++];
  });
  return m;
}

}  // namespace detail

// End-to-end checks through toy models: depth with masked MSE, segmentation
// with cross-entropy plus the 0.2-weighted auxiliary loss. `sample_stride`
// spot-checks every n-th parameter element (1 = exhaustive).
inline GradcheckSuiteResult run_end_to_end_gradchecks(const DptConfig& depth_cfg,
                                                      const DptConfig& seg_cfg,
                                                      std::size_t image_hw = 32,
                                                      std::size_t sample_stride = 1,
                                                      double h = 1e-5, double tol = 1e-4) {
  GradcheckSuiteResult result;
  std::mt19937_64 rng(99);
  auto image = detail::suite_rand({3, image_hw, image_hw}, rng, -0.5, 0.5);

  {
    check_config(depth_cfg.head == HeadKind::Depth, "gradcheck: expected a depth config");
    auto proto = build_model<double>(depth_cfg, 7);
    fan_in_initialize(proto, 17);
    auto leaves = detail::collect_learnable(proto);
    auto gt = detail::suite_rand({1, image_hw, image_hw}, rng, 0.1, 0.9);
    std::vector<std::uint8_t> mask(image_hw * image_hw, 1);
    mask[3] = 0;
    auto rep = gradcheck(
        [&](const std::vector<Tensor<double>>& in) {
          auto m = detail::rebind_learnable(proto, in);
          auto out = forward(m, image, /*train=*/false);
          return masked_mse_loss(out.prediction, gt, mask);
        },
        leaves, h, tol, sample_stride);
    result.add("end_to_end.depth_masked_mse", rep);
  }
  {
    check_config(seg_cfg.head == HeadKind::Segmentation,
                 "gradcheck: expected a segmentation config");
    auto proto = build_model<double>(seg_cfg, 11);
    fan_in_initialize(proto, 29);
    auto leaves = detail::collect_learnable(proto);
    std::vector<int> labels(image_hw * image_hw);
    std::uniform_int_distribution<int> lab(0, static_cast<int>(seg_cfg.num_classes) - 1);
    for (auto& l : labels) l = lab(rng);
    labels[5] = -1;  // one ignored pixel
    auto rep = gradcheck(
        [&](const std::vector<Tensor<double>>& in) {
          auto m = detail::rebind_learnable(proto, in);
          auto out = forward(m, image, /*train=*/true, /*dropout_seed=*/1234);
          return combined_seg_loss(out.prediction, out.aux_logits, labels, -1,
                                   seg_cfg.aux_loss_weight);
        },
        leaves, h, tol, sample_stride);
    result.add("end_to_end.seg_cross_entropy_with_aux", rep);
  }
  return result;
}

// Micro configs small enough for exhaustive end-to-end checking.
inline DptConfig micro_gradcheck_config(HeadKind head) {
  DptConfig c = preset("toy");
  c.name = "micro";
  c.embed_dim = 8;
  c.heads = 2;
  c.feature_dim = 4;
  c.pos_grid_h = c.pos_grid_w = 2;
  c.head = head;
  if (head == HeadKind::Segmentation) c.num_classes = 3;
  c.validate();
  return c;
}

}  // namespace dpt
