#include <gtest/gtest.h>

#include <random>

#include "dpt/gradcheck.hpp"
#include "dpt/heads.hpp"
#include "dpt/model.hpp"

namespace {

using dpt::DepthHeadWeights;
using dpt::FeatureMap;
using dpt::SegHeadWeights;
using dpt::Shape;
using dpt::Tensor;

Tensor<double> rnd(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(shape);
  std::uniform_real_distribution<double> dist(lo, hi);
  double* d = t.mutable_data();
  for (std::size_t i = 0; i < t.numel(); ++i) d[i] = dist(rng);
  return t;
}

DepthHeadWeights<double> depth_weights(std::size_t dh, std::mt19937_64& rng, bool zero = false) {
  DepthHeadWeights<double> w;
  auto make = [&](Shape s) { return zero ? Tensor<double>::zeros(s) : rnd(s, rng, -0.5, 0.5); };
  w.conv1.weight = make({dh / 2, dh, 3, 3});
  w.conv1.bias = make({dh / 2});
  w.conv2.weight = make({32, dh / 2, 3, 3});
  w.conv2.bias = make({32});
  w.conv3.weight = make({1, 32, 1, 1});
  w.conv3.bias = make({1});
  return w;
}

SegHeadWeights<double> seg_weights(std::size_t dh, std::size_t classes, std::mt19937_64& rng) {
  SegHeadWeights<double> w;
  w.conv1.weight = rnd({dh, dh, 3, 3}, rng, -0.3, 0.3);
  w.bn.gamma = Tensor<double>::ones({dh});
  w.bn.beta = Tensor<double>::zeros({dh});
  w.bn.running_mean = Tensor<double>::zeros({dh});
  w.bn.running_var = Tensor<double>::ones({dh});
  w.classify.weight = rnd({classes, dh, 1, 1}, rng, -0.3, 0.3);
  w.classify.bias = rnd({classes}, rng);
  return w;
}

TEST(DepthHead, FullResolutionNonNegativeOutput) {
  std::mt19937_64 rng(1);
  auto w = depth_weights(8, rng);
  FeatureMap<double> f(rnd({8, 16, 16}, rng));
  auto out = dpt::depth_head(f, w);
  ASSERT_EQ(out.shape(), (Shape{1, 32, 32}));
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_GE(out.at(i), 0.0);
}

TEST(DepthHead, NonNegativityForArbitraryWeights) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    auto w = depth_weights(4, rng);
    FeatureMap<double> f(rnd({4, 8, 8}, rng, -3.0, 3.0));
    auto out = dpt::depth_head(f, w);
    for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_GE(out.at(i), 0.0);
  }
}

TEST(DepthHead, ZeroWeightsGiveZeroPrediction) {
  std::mt19937_64 rng(3);
  auto w = depth_weights(8, rng, true);
  FeatureMap<double> f(rnd({8, 4, 4}, rng));
  auto out = dpt::depth_head(f, w);
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_DOUBLE_EQ(out.at(i), 0.0);
}

TEST(DepthHead, Gradcheck) {
  std::mt19937_64 rng(4);
  auto w = depth_weights(4, rng);
  auto f = rnd({4, 4, 4}, rng);
  auto weigh = rnd({1, 8, 8}, rng, 0.5, 1.5);
  auto rep = dpt::gradcheck(
      [&](const std::vector<Tensor<double>>& in) {
        DepthHeadWeights<double> hw;
        hw.conv1 = {in[1], in[2]};
        hw.conv2 = {in[3], in[4]};
        hw.conv3 = {in[5], in[6]};
        auto out = dpt::depth_head(FeatureMap<double>(in[0]), hw);
        return dpt::sum(dpt::mul(out, weigh));
      },
      {f, w.conv1.weight, w.conv1.bias, w.conv2.weight, w.conv2.bias, w.conv3.weight,
       w.conv3.bias});
  EXPECT_TRUE(rep.pass) << rep.summary();
}

TEST(SegmentationHead, LogitShapeMatchesTarget) {
  std::mt19937_64 rng(5);
  auto w = seg_weights(8, 150, rng);
  FeatureMap<double> f(rnd({8, 8, 8}, rng));
  std::mt19937_64 drop_rng(0);
  auto out = dpt::segmentation_head(f, w, false, drop_rng, 0.1, 16, 16);
  EXPECT_EQ(out.shape(), (Shape{150, 16, 16}));
}

TEST(SegmentationHead, InferenceIsDeterministicDropoutDisabled) {
  std::mt19937_64 rng(6);
  auto w = seg_weights(4, 3, rng);
  FeatureMap<double> f(rnd({4, 6, 6}, rng));
  std::mt19937_64 r1(111), r2(999);
  auto a = dpt::segmentation_head(f, w, false, r1, 0.1, 12, 12);
  auto b = dpt::segmentation_head(f, w, false, r2, 0.1, 12, 12);
  EXPECT_EQ(a.values(), b.values());
}

TEST(SegmentationHead, TrainingDropoutIsSeedReproducible) {
  std::mt19937_64 rng(7);
  auto w = seg_weights(4, 3, rng);
  FeatureMap<double> f(rnd({4, 6, 6}, rng));
  auto w2 = w;
  std::mt19937_64 r1(42), r2(42), r3(43);
  auto a = dpt::segmentation_head(f, w, true, r1, 0.5, 12, 12);
  auto b = dpt::segmentation_head(f, w2, true, r2, 0.5, 12, 12);
  EXPECT_EQ(a.values(), b.values());
  auto w3 = w;
  auto c = dpt::segmentation_head(f, w3, true, r3, 0.5, 12, 12);
  EXPECT_NE(a.values(), c.values());
}

TEST(SegmentationHead, PerPixelSoftmaxSumsToOne) {
  std::mt19937_64 rng(8);
  auto w = seg_weights(4, 5, rng);
  FeatureMap<double> f(rnd({4, 4, 4}, rng));
  std::mt19937_64 drop_rng(0);
  auto logits = dpt::segmentation_head(f, w, false, drop_rng, 0.1, 8, 8);
  auto probs = dpt::softmax(dpt::transpose(dpt::reshape(logits, {5, 64})));
  for (std::size_t p = 0; p < 64; ++p) {
    double s = 0;
    for (std::size_t c = 0; c < 5; ++c) s += probs.at(p, c);
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(AuxHead, UniformLogitsGiveLogC) {
  auto logits = Tensor<double>::zeros({7, 2, 2});
  std::vector<int> labels = {0, 1, 2, 3};
  auto loss = dpt::cross_entropy_loss(logits, labels, -1);
  EXPECT_NEAR(loss.at(0), std::log(7.0), 1e-9);
}

TEST(AuxHead, CombinedLossWithZeroWeightEqualsMain) {
  std::mt19937_64 rng(9);
  auto main_logits = rnd({3, 2, 2}, rng);
  auto aux_logits = rnd({3, 2, 2}, rng);
  std::vector<int> labels = {0, 2, 1, 0};
  auto combined = dpt::combined_seg_loss(main_logits, aux_logits, labels, -1, 0.0);
  auto main_only = dpt::cross_entropy_loss(main_logits, labels, -1);
  EXPECT_DOUBLE_EQ(combined.at(0), main_only.at(0));
}

TEST(AuxHead, CombinedLossAddsWeightedAux) {
  std::mt19937_64 rng(10);
  auto main_logits = rnd({3, 2, 2}, rng);
  auto aux_logits = rnd({3, 2, 2}, rng);
  std::vector<int> labels = {0, 2, 1, 0};
  auto combined = dpt::combined_seg_loss(main_logits, aux_logits, labels, -1, 0.2);
  auto main_only = dpt::cross_entropy_loss(main_logits, labels, -1);
  auto aux_only = dpt::cross_entropy_loss(aux_logits, labels, -1);
  EXPECT_NEAR(combined.at(0), main_only.at(0) + 0.2 * aux_only.at(0), 1e-12);
}

}  // namespace
