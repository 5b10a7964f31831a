#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "dpt/gradcheck.hpp"
#include "dpt/model.hpp"
#include "dpt/reassemble.hpp"

namespace {

using dpt::DptConfig;
using dpt::FeatureMap;
using dpt::ReadoutMode;
using dpt::Shape;
using dpt::Tensor;
using dpt::TokenSet;

Tensor<double> rnd(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(shape);
  std::uniform_real_distribution<double> dist(lo, hi);
  double* d = t.mutable_data();
  for (std::size_t i = 0; i < t.numel(); ++i) d[i] = dist(rng);
  return t;
}

TokenSet<double> token_set(Tensor<double> tokens, std::size_t gh, std::size_t gw) {
  TokenSet<double> ts;
  ts.tokens = std::move(tokens);
  ts.grid_h = gh;
  ts.grid_w = gw;
  return ts;
}

TEST(ReadTokens, AddEqualsIgnoreForZeroReadout) {
  std::mt19937_64 rng(1);
  auto patches = rnd({6, 4}, rng);
  auto tokens = dpt::vstack(Tensor<double>::zeros({1, 4}), patches);
  auto ts = token_set(tokens, 2, 3);
  auto ign = dpt::read_tokens(ts, ReadoutMode::Ignore);
  auto added = dpt::read_tokens(ts, ReadoutMode::Add);
  ASSERT_EQ(ign.shape(), added.shape());
  for (std::size_t i = 0; i < ign.numel(); ++i) EXPECT_DOUBLE_EQ(added.at(i), ign.at(i));
}

TEST(ReadTokens, IgnoreDropsRowZero) {
  Tensor<double> tokens({2, 3}, {9, 9, 9, 1, 2, 3});
  auto ts = token_set(tokens, 1, 1);
  auto out = dpt::read_tokens(ts, ReadoutMode::Ignore);
  ASSERT_EQ(out.shape(), (Shape{1, 3}));
  EXPECT_DOUBLE_EQ(out.at(0), 1);
  EXPECT_DOUBLE_EQ(out.at(2), 3);
}

TEST(ReadTokens, ProjectMatchesHandSteppedMlp) {
  // D = 2, two patch tokens; mlp = linear(2D -> D) then GELU.
  Tensor<double> tokens({3, 2}, {0.5, -0.25, 0.3, 0.8, -0.6, 0.1});
  auto ts = token_set(tokens, 2, 1);
  dpt::LinearWeights<double> proj;
  proj.weight = Tensor<double>({4, 2}, {0.4, -0.3, 0.2, 0.9, -0.7, 0.5, 0.1, 0.6});
  proj.bias = Tensor<double>({2}, {0.05, -0.1});
  auto out = dpt::read_tokens(ts, ReadoutMode::Project, &proj);
  ASSERT_EQ(out.shape(), (Shape{2, 2}));
  for (int r = 0; r < 2; ++r) {
    double cat[4] = {tokens.at(r + 1, 0), tokens.at(r + 1, 1), tokens.at(0, 0),
                     tokens.at(0, 1)};
    for (int j = 0; j < 2; ++j) {
      double pre = proj.bias.at(j);
      for (int p = 0; p < 4; ++p) pre += cat[p] * proj.weight.at(p, j);
      double expect = pre * 0.5 * (1.0 + std::erf(pre / std::sqrt(2.0)));
      EXPECT_NEAR(out.at(r, j), expect, 1e-12);
    }
  }
}

TEST(ReadTokens, ProjectWithoutWeightsThrows) {
  auto ts = token_set(Tensor<double>::ones({3, 2}), 2, 1);
  EXPECT_THROW(dpt::read_tokens<double>(ts, ReadoutMode::Project, nullptr), dpt::ConfigError);
  dpt::LinearWeights<double> empty;
  EXPECT_THROW(dpt::read_tokens(ts, ReadoutMode::Project, &empty), dpt::ConfigError);
}

TEST(ReadTokens, RowCountIsAlwaysPatchCount) {
  std::mt19937_64 rng(3);
  auto ts = token_set(rnd({7, 4}, rng), 2, 3);
  dpt::LinearWeights<double> proj;
  proj.weight = rnd({8, 4}, rng);
  proj.bias = rnd({4}, rng);
  for (auto mode : {ReadoutMode::Ignore, ReadoutMode::Add, ReadoutMode::Project}) {
    auto out = dpt::read_tokens(ts, mode, &proj);
    EXPECT_EQ(out.extent(0), 6u);
    EXPECT_EQ(out.extent(1), 4u);
  }
}

TEST(ReadTokens, PermutationEquivariantOverPatchRows) {
  std::mt19937_64 rng(5);
  auto ts = token_set(rnd({7, 4}, rng), 2, 3);
  dpt::LinearWeights<double> proj;
  proj.weight = rnd({8, 4}, rng);
  proj.bias = rnd({4}, rng);
  std::vector<std::size_t> patch_perm = {3, 0, 5, 1, 4, 2};
  std::vector<std::size_t> token_perm(7);
  token_perm[0] = 0;
  for (std::size_t i = 0; i < 6; ++i) token_perm[i + 1] = patch_perm[i] + 1;
  auto permuted = token_set(dpt::permute_rows(ts.tokens, token_perm), 2, 3);
  for (auto mode : {ReadoutMode::Ignore, ReadoutMode::Add, ReadoutMode::Project}) {
    auto direct = dpt::read_tokens(permuted, mode, &proj);
    auto expect = dpt::permute_rows(dpt::read_tokens(ts, mode, &proj), patch_perm);
    for (std::size_t i = 0; i < expect.numel(); ++i)
      EXPECT_NEAR(direct.at(i), expect.at(i), 1e-12);
  }
}

TEST(ConcatenateTokens, RowMajorPlacement) {
  Tensor<double> rows({4, 1}, {1, 2, 3, 4});
  auto map = dpt::concatenate_tokens(rows, 2, 2);
  ASSERT_EQ(map.data.shape(), (Shape{1, 2, 2}));
  EXPECT_DOUBLE_EQ(map.data.at(0, 0, 0), 1);
  EXPECT_DOUBLE_EQ(map.data.at(0, 0, 1), 2);
  EXPECT_DOUBLE_EQ(map.data.at(0, 1, 0), 3);
  EXPECT_DOUBLE_EQ(map.data.at(0, 1, 1), 4);
}

TEST(ConcatenateTokens, FlattenRoundTrip) {
  std::mt19937_64 rng(7);
  auto rows = rnd({12, 5}, rng);
  auto map = dpt::concatenate_tokens(rows, 3, 4);
  // Re-flatten row-major: channel c at (y, x) goes back to rows[y*w+x, c].
  auto back = dpt::transpose(dpt::reshape(map.data, {5, 12}));
  EXPECT_EQ(back.values(), rows.values());
}

TEST(ConcatenateTokens, GridMismatchThrows) {
  Tensor<double> rows({5, 2});
  EXPECT_THROW(dpt::concatenate_tokens(rows, 2, 2), dpt::ShapeError);
}

TEST(ConcatenateTokens, FullScaleGridShape) {
  std::mt19937_64 rng(9);
  auto rows = rnd({576, 3}, rng);
  auto map = dpt::concatenate_tokens(rows, 24, 24);
  EXPECT_EQ(map.data.shape(), (Shape{3, 24, 24}));
}

dpt::ResampleWeights<double> resample_weights(std::size_t in_ch, std::size_t d_hat,
                                              std::mt19937_64& rng) {
  dpt::ResampleWeights<double> w;
  w.project.weight = rnd({d_hat, in_ch, 1, 1}, rng);
  w.project.bias = rnd({d_hat}, rng);
  w.resize.weight = rnd({d_hat, d_hat, 3, 3}, rng);
  w.resize.bias = rnd({d_hat}, rng);
  return w;
}

TEST(Resample, StridePreservingPath) {
  std::mt19937_64 rng(11);
  auto w = resample_weights(6, 5, rng);
  FeatureMap<double> f(rnd({6, 24, 24}, rng));
  auto out = dpt::resample(f, 16, 16, w);
  EXPECT_EQ(out.data.shape(), (Shape{5, 24, 24}));
}

TEST(Resample, UpsamplePathTransposeGeometry) {
  std::mt19937_64 rng(13);
  auto w = resample_weights(6, 5, rng);
  FeatureMap<double> f(rnd({6, 24, 24}, rng));
  // stride 4, kernel 3, pad 1, output padding 3: (24-1)*4 - 2 + 3 + 3 = 96.
  auto out = dpt::resample(f, 16, 4, w);
  EXPECT_EQ(out.data.shape(), (Shape{5, 96, 96}));
}

TEST(Resample, DownsamplePathConvGeometry) {
  std::mt19937_64 rng(17);
  auto w = resample_weights(6, 5, rng);
  FeatureMap<double> f(rnd({6, 24, 24}, rng));
  // floor((24 + 2 - 3) / 2) + 1 = 12.
  auto out = dpt::resample(f, 16, 32, w);
  EXPECT_EQ(out.data.shape(), (Shape{5, 12, 12}));
}

TEST(Resample, RejectsBadScale) {
  std::mt19937_64 rng(19);
  auto w = resample_weights(4, 4, rng);
  FeatureMap<double> f(rnd({4, 8, 8}, rng));
  EXPECT_THROW(dpt::resample(f, 16, 5, w), dpt::ConfigError);
}

TEST(ReassembleAll, ToyShapesAcrossScales) {
  auto cfg = dpt::preset("toy");
  auto m = dpt::build_model<double>(cfg, 21);
  std::mt19937_64 rng(23);
  auto image = rnd({3, 64, 64}, rng);
  auto taps = dpt::encode(image, cfg, m.encoder);
  auto maps = dpt::reassemble_all(taps, cfg, m.reassemble);
  EXPECT_EQ(maps[0].data.shape(), (Shape{cfg.feature_dim, 16, 16}));
  EXPECT_EQ(maps[1].data.shape(), (Shape{cfg.feature_dim, 8, 8}));
  EXPECT_EQ(maps[2].data.shape(), (Shape{cfg.feature_dim, 4, 4}));
  EXPECT_EQ(maps[3].data.shape(), (Shape{cfg.feature_dim, 2, 2}));
}

TEST(ReassembleAll, AllZeroTokensZeroWeightsGiveZeroMaps) {
  auto cfg = dpt::preset("toy");
  dpt::DptModel<double> m(cfg);
  for_each_param(m, [&](const dpt::ParamSpec& spec, Tensor<double>& slot) {
    slot = Tensor<double>::zeros(spec.shape);
  });
  std::vector<dpt::HookOutput<double>> taps;
  for (int i = 0; i < 4; ++i)
    taps.push_back(token_set(Tensor<double>::zeros({17, cfg.embed_dim}), 4, 4));
  auto maps = dpt::reassemble_all(taps, cfg, m.reassemble);
  for (const auto& map : maps)
    for (std::size_t i = 0; i < map.data.numel(); ++i) EXPECT_DOUBLE_EQ(map.data.at(i), 0.0);
}

TEST(ReassembleAll, HybridHooksEnterAtProjection) {
  auto cfg = dpt::preset("toy-hybrid");
  auto m = dpt::build_model<double>(cfg, 31);
  std::mt19937_64 rng(37);
  auto image = rnd({3, 64, 64}, rng);
  auto taps = dpt::encode(image, cfg, m.encoder);
  auto maps = dpt::reassemble_all(taps, cfg, m.reassemble);
  // R0 is natively 1/4 and target scale 4: shape-preserving conv path.
  EXPECT_EQ(maps[0].data.shape(), (Shape{cfg.feature_dim, 16, 16}));
  EXPECT_EQ(maps[1].data.shape(), (Shape{cfg.feature_dim, 8, 8}));
  EXPECT_EQ(maps[2].data.shape(), (Shape{cfg.feature_dim, 4, 4}));
  EXPECT_EQ(maps[3].data.shape(), (Shape{cfg.feature_dim, 2, 2}));
}

TEST(ReassemblePipeline, GradcheckEndToEnd) {
  // read(project) -> concatenate -> resample(upsample) on toy dims.
  std::mt19937_64 rng(41);
  auto tokens = rnd({5, 4}, rng);
  dpt::LinearWeights<double> proj{rnd({8, 4}, rng), rnd({4}, rng)};
  dpt::ResampleWeights<double> rw;
  rw.project.weight = rnd({3, 4, 1, 1}, rng);
  rw.project.bias = rnd({3}, rng);
  rw.resize.weight = rnd({3, 3, 3, 3}, rng);
  rw.resize.bias = rnd({3}, rng);
  auto weigh = rnd({3, 8, 8}, rng, 0.5, 1.5);
  auto rep = dpt::gradcheck(
      [&](const std::vector<Tensor<double>>& in) {
        dpt::LinearWeights<double> p{in[1], in[2]};
        dpt::ResampleWeights<double> r;
        r.project = {in[3], in[4]};
        r.resize = {in[5], in[6]};
        TokenSet<double> ts;
        ts.tokens = in[0];
        ts.grid_h = ts.grid_w = 2;
        auto rows = dpt::read_tokens(ts, ReadoutMode::Project, &p);
        auto map = dpt::concatenate_tokens(rows, 2, 2);
        auto out = dpt::resample(map, 16, 4, r);
        return dpt::sum(dpt::mul(out.data, weigh));
      },
      {tokens, proj.weight, proj.bias, rw.project.weight, rw.project.bias, rw.resize.weight,
       rw.resize.bias});
  EXPECT_TRUE(rep.pass) << rep.summary();
}

}  // namespace
