#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "dpt/gradcheck.hpp"
#include "dpt/model.hpp"
#include "dpt/vit.hpp"

namespace {

using dpt::DptConfig;
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

DptConfig tiny_cfg(std::size_t d = 8, std::size_t layers = 2, std::size_t heads = 2) {
  DptConfig c = dpt::preset("toy");
  c.embed_dim = d;
  c.layers = layers;
  c.heads = heads;
  c.feature_dim = 8;
  c.hooks = {dpt::HookPoint::layer(1), dpt::HookPoint::layer(2),
             dpt::HookPoint::layer(std::max<std::size_t>(layers - 1, 1)),
             dpt::HookPoint::layer(layers)};
  if (layers < 4) {
    // keep hooks strictly ascending for short stacks
    c.layers = 4;
    c.hooks = {dpt::HookPoint::layer(1), dpt::HookPoint::layer(2), dpt::HookPoint::layer(3),
               dpt::HookPoint::layer(4)};
  }
  c.pos_grid_h = c.pos_grid_w = 2;
  c.validate();
  return c;
}

TEST(EmbedPatches, TokenArithmetic384) {
  DptConfig c = tiny_cfg();
  c.pos_grid_h = c.pos_grid_w = 24;
  auto m = dpt::build_model<double>(c, 1);
  std::mt19937_64 rng(2);
  auto image = rnd({3, 384, 384}, rng);
  auto ts = dpt::embed_patches(image, c, m.encoder.patch);
  EXPECT_EQ(ts.patch_count(), 576u);
  EXPECT_EQ(ts.tokens.shape(), (Shape{577, c.embed_dim}));
}

TEST(EmbedPatches, SinglePatchImage) {
  DptConfig c = tiny_cfg();
  c.pos_grid_h = c.pos_grid_w = 1;
  auto m = dpt::build_model<double>(c, 1);
  std::mt19937_64 rng(3);
  auto image = rnd({3, 16, 16}, rng);
  auto ts = dpt::embed_patches(image, c, m.encoder.patch);
  EXPECT_EQ(ts.patch_count(), 1u);
  EXPECT_EQ(ts.tokens.shape(), (Shape{2, c.embed_dim}));
}

TEST(EmbedPatches, ZeroEverythingLeavesBias) {
  DptConfig c = tiny_cfg();
  auto m = dpt::build_model<double>(c, 1);
  // zero image, zero pos-embed, zero readout: patch tokens equal the bias.
  m.encoder.patch.pos = Tensor<double>::zeros(m.encoder.patch.pos.shape());
  m.encoder.patch.readout = Tensor<double>::zeros({c.embed_dim});
  double* bias = m.encoder.patch.patch_proj.bias.mutable_data();
  for (std::size_t i = 0; i < c.embed_dim; ++i) bias[i] = 0.25 * static_cast<double>(i + 1);
  auto image = Tensor<double>::zeros({3, 32, 32});
  auto ts = dpt::embed_patches(image, c, m.encoder.patch);
  for (std::size_t r = 1; r < ts.tokens.extent(0); ++r)
    for (std::size_t j = 0; j < c.embed_dim; ++j)
      EXPECT_DOUBLE_EQ(ts.tokens.at(r, j), 0.25 * static_cast<double>(j + 1));
  for (std::size_t j = 0; j < c.embed_dim; ++j) EXPECT_DOUBLE_EQ(ts.tokens.at(0, j), 0.0);
}

TEST(EmbedPatches, IndivisibleImageThrows) {
  DptConfig c = tiny_cfg();
  auto m = dpt::build_model<double>(c, 1);
  Tensor<double> image({3, 20, 32});
  EXPECT_THROW(dpt::embed_patches(image, c, m.encoder.patch), dpt::ShapeError);
}

TEST(InterpolatePosEmbed, SameGridIsIdentity) {
  std::mt19937_64 rng(5);
  auto pos = rnd({5, 6}, rng);
  auto out = dpt::interpolate_pos_embed(pos, 2, 2, 2, 2);
  EXPECT_EQ(out.values(), pos.values());
}

TEST(InterpolatePosEmbed, BilinearOraclePerChannel) {
  // 2x2 grid with a single scalar channel [1,2,3,4] -> 3x3 grid.
  Tensor<double> pos({5, 1}, {9.0, 1, 2, 3, 4});
  auto out = dpt::interpolate_pos_embed(pos, 2, 2, 3, 3);
  ASSERT_EQ(out.shape(), (Shape{10, 1}));
  EXPECT_DOUBLE_EQ(out.at(0), 9.0);  // readout row unchanged
  std::vector<double> expect = {1, 1.5, 2, 2, 2.5, 3, 3, 3.5, 4};
  for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(out.at(i + 1, 0), expect[i], 1e-12);
}

TEST(InterpolatePosEmbed, ConstantStaysConstant) {
  auto pos = Tensor<double>::full({10, 4}, 0.3);
  auto out = dpt::interpolate_pos_embed(pos, 3, 3, 5, 7);
  ASSERT_EQ(out.shape(), (Shape{36, 4}));
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out.at(i), 0.3, 1e-12);
}

TEST(InterpolatePosEmbed, GridMismatchThrows) {
  Tensor<double> pos({5, 2});
  EXPECT_THROW(dpt::interpolate_pos_embed(pos, 3, 3, 2, 2), dpt::ShapeError);
}

TEST(Mhsa, AttentionRowsSumToOne) {
  // With the value projection zeroed, out = bias for every token.
  DptConfig c = tiny_cfg();
  auto m = dpt::build_model<double>(c, 7);
  auto& attn = m.encoder.layers[0].attn;
  double* qkv = attn.qkv.weight.mutable_data();
  std::size_t d = c.embed_dim;
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 2 * d; j < 3 * d; ++j) qkv[i * 3 * d + j] = 0.0;
  double* qb = attn.qkv.bias.mutable_data();
  for (std::size_t j = 2 * d; j < 3 * d; ++j) qb[j] = 0.0;
  attn.out.weight = Tensor<double>::zeros({d, d});
  double* ob = attn.out.bias.mutable_data();
  for (std::size_t j = 0; j < d; ++j) ob[j] = 0.5 + static_cast<double>(j);
  std::mt19937_64 rng(11);
  TokenSet<double> ts;
  ts.tokens = rnd({2, d}, rng);
  ts.grid_h = ts.grid_w = 1;
  auto out = dpt::mhsa(ts, attn, c.heads);
  ASSERT_EQ(out.tokens.shape(), ts.tokens.shape());
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t j = 0; j < d; ++j)
      EXPECT_NEAR(out.tokens.at(r, j), 0.5 + static_cast<double>(j), 1e-12);
}

TEST(Mhsa, MatchesHandSteppedOracle) {
  // 3 tokens, D = 2, single head, hand-set weights.
  dpt::AttentionWeights<double> w;
  w.qkv.weight = Tensor<double>({2, 6}, {0.2, -0.1, 0.4, 0.3, 1.0, 0.0,  //
                                         0.5, 0.7, -0.2, 0.1, 0.0, 1.0});
  w.qkv.bias = Tensor<double>({6}, {0.01, -0.02, 0.03, 0.04, 0.0, 0.0});
  w.out.weight = Tensor<double>({2, 2}, {1.0, 0.5, -0.5, 1.0});
  w.out.bias = Tensor<double>({2}, {0.1, -0.1});
  TokenSet<double> ts;
  ts.tokens = Tensor<double>({3, 2}, {0.3, -0.6, 1.1, 0.2, -0.4, 0.9});
  ts.grid_h = 2;
  ts.grid_w = 1;
  auto out = dpt::mhsa(ts, w, 1);

  // Oracle: qkv, scores / sqrt(d), softmax, weighted sum, output projection.
  double q[3][2], k[3][2], v[3][2];
  for (int r = 0; r < 3; ++r)
    for (int j = 0; j < 6; ++j) {
      double acc = w.qkv.bias.at(j);
      for (int p = 0; p < 2; ++p) acc += ts.tokens.at(r, p) * w.qkv.weight.at(p, j);
      if (j < 2)
        q[r][j] = acc;
      else if (j < 4)
        k[r][j - 2] = acc;
      else
        v[r][j - 4] = acc;
    }
  double scale = 1.0 / std::sqrt(2.0);
  for (int r = 0; r < 3; ++r) {
    double s[3], mx = -1e300;
    for (int cidx = 0; cidx < 3; ++cidx) {
      s[cidx] = scale * (q[r][0] * k[cidx][0] + q[r][1] * k[cidx][1]);
      mx = std::max(mx, s[cidx]);
    }
    double denom = 0;
    for (int cidx = 0; cidx < 3; ++cidx) denom += std::exp(s[cidx] - mx);
    double ctx[2] = {0, 0};
    for (int cidx = 0; cidx < 3; ++cidx) {
      double a = std::exp(s[cidx] - mx) / denom;
      ctx[0] += a * v[cidx][0];
      ctx[1] += a * v[cidx][1];
    }
    for (int j = 0; j < 2; ++j) {
      double expect =
          w.out.bias.at(j) + ctx[0] * w.out.weight.at(0, j) + ctx[1] * w.out.weight.at(1, j);
      EXPECT_NEAR(out.tokens.at(r, j), expect, 1e-12) << "token " << r << " dim " << j;
    }
  }
}

TEST(Mhsa, HeadDivisibilityViolationThrows) {
  DptConfig c = tiny_cfg();
  auto m = dpt::build_model<double>(c, 1);
  TokenSet<double> ts;
  ts.tokens = Tensor<double>({2, c.embed_dim});
  ts.grid_h = ts.grid_w = 1;
  EXPECT_THROW(dpt::mhsa(ts, m.encoder.layers[0].attn, 3), dpt::ShapeError);
}

TEST(TransformerLayer, ZeroOutputProjectionsGiveIdentity) {
  DptConfig c = tiny_cfg();
  auto m = dpt::build_model<double>(c, 13);
  auto& lw = m.encoder.layers[0];
  lw.attn.out.weight = Tensor<double>::zeros(lw.attn.out.weight.shape());
  lw.attn.out.bias = Tensor<double>::zeros(lw.attn.out.bias.shape());
  lw.fc2.weight = Tensor<double>::zeros(lw.fc2.weight.shape());
  lw.fc2.bias = Tensor<double>::zeros(lw.fc2.bias.shape());
  std::mt19937_64 rng(17);
  TokenSet<double> ts;
  ts.tokens = rnd({5, c.embed_dim}, rng);
  ts.grid_h = 2;
  ts.grid_w = 2;
  auto out = dpt::transformer_layer(ts, lw, c.heads);
  for (std::size_t i = 0; i < ts.tokens.numel(); ++i)
    EXPECT_DOUBLE_EQ(out.tokens.at(i), ts.tokens.at(i));
}

TEST(TransformerLayer, TokenCountConserved) {
  DptConfig c = tiny_cfg();
  auto m = dpt::build_model<double>(c, 19);
  std::mt19937_64 rng(23);
  TokenSet<double> ts;
  ts.tokens = rnd({10, c.embed_dim}, rng);
  ts.grid_h = 3;
  ts.grid_w = 3;
  auto out = dpt::transformer_layer(ts, m.encoder.layers[0], c.heads);
  EXPECT_EQ(out.tokens.extent(0), ts.tokens.extent(0));
  EXPECT_EQ(out.layer_tag, ts.layer_tag + 1);
}

TEST(TransformerLayer, Gradcheck) {
  DptConfig c = tiny_cfg(8, 4, 2);
  auto m = dpt::build_model<double>(c, 29);
  auto& lw = m.encoder.layers[0];
  std::mt19937_64 rng(31);
  auto tokens = rnd({5, 8}, rng);
  std::vector<Tensor<double>> leaves = {tokens,         lw.ln1.gamma,       lw.ln1.beta,
                                        lw.attn.qkv.weight, lw.attn.qkv.bias,
                                        lw.attn.out.weight, lw.attn.out.bias,
                                        lw.ln2.gamma,   lw.ln2.beta,        lw.fc1.weight,
                                        lw.fc1.bias,    lw.fc2.weight,      lw.fc2.bias};
  auto rep = dpt::gradcheck(
      [&](const std::vector<Tensor<double>>& in) {
        dpt::TransformerLayerWeights<double> w;
        w.ln1 = {in[1], in[2]};
        w.attn.qkv = {in[3], in[4]};
        w.attn.out = {in[5], in[6]};
        w.ln2 = {in[7], in[8]};
        w.fc1 = {in[9], in[10]};
        w.fc2 = {in[11], in[12]};
        TokenSet<double> ts;
        ts.tokens = in[0];
        ts.grid_h = 2;
        ts.grid_w = 2;
        return dpt::sum(dpt::gelu(dpt::transformer_layer(ts, w, 2).tokens));
      },
      leaves);
  EXPECT_TRUE(rep.pass) << rep.summary();
  EXPECT_LT(rep.max_rel_err, 1e-4);
}

TEST(Encode, PresetHookPlacement) {
  auto base = dpt::preset("base");
  EXPECT_EQ(base.hooks[0], dpt::HookPoint::layer(3));
  EXPECT_EQ(base.hooks[3], dpt::HookPoint::layer(12));
  auto large = dpt::preset("large");
  EXPECT_EQ(large.embed_dim, 1024u);
  EXPECT_EQ(large.layers, 24u);
  EXPECT_EQ(large.hooks[0], dpt::HookPoint::layer(5));
  EXPECT_EQ(large.hooks[1], dpt::HookPoint::layer(12));
  EXPECT_EQ(large.hooks[2], dpt::HookPoint::layer(18));
  EXPECT_EQ(large.hooks[3], dpt::HookPoint::layer(24));
}

TEST(Encode, ToyHooksProduceFourTokenSets) {
  DptConfig c = tiny_cfg(8, 4, 2);
  auto m = dpt::build_model<double>(c, 37);
  std::mt19937_64 rng(41);
  auto image = rnd({3, 64, 64}, rng);
  auto taps = dpt::encode(image, c, m.encoder);
  ASSERT_EQ(taps.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    ASSERT_TRUE(std::holds_alternative<TokenSet<double>>(taps[i]));
    const auto& ts = std::get<TokenSet<double>>(taps[i]);
    EXPECT_EQ(ts.tokens.shape(), (Shape{17, 8}));
    EXPECT_EQ(ts.layer_tag, static_cast<int>(i + 1));
  }
}

TEST(Encode, ResolutionGeneralityTracksTokenCount) {
  DptConfig c = tiny_cfg(8, 4, 2);
  auto m = dpt::build_model<double>(c, 43);
  std::mt19937_64 rng(47);
  for (std::size_t hw : {32u, 48u, 96u}) {
    auto image = rnd({3, hw, hw}, rng);
    auto taps = dpt::encode(image, c, m.encoder);
    const auto& ts = std::get<TokenSet<double>>(taps[3]);
    EXPECT_EQ(ts.patch_count(), (hw / 16) * (hw / 16));
  }
}

TEST(Encode, PermutationEquivarianceWithZeroPosEmbed) {
  DptConfig c = tiny_cfg(8, 4, 2);
  auto m = dpt::build_model<double>(c, 53);
  m.encoder.patch.pos = Tensor<double>::zeros(m.encoder.patch.pos.shape());
  std::mt19937_64 rng(59);
  auto image = rnd({3, 64, 64}, rng);

  auto taps = dpt::encode(image, c, m.encoder);
  auto ts_out = std::get<TokenSet<double>>(taps[3]).tokens;

  // Permute patch tokens after embedding, run the stack, and compare against
  // the permuted straight-through output.
  auto ts0 = dpt::embed_patches(image, c, m.encoder.patch);
  std::vector<std::size_t> perm(ts0.tokens.extent(0));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin() + 1, perm.end(), rng);  // readout row stays put
  TokenSet<double> permuted = ts0;
  permuted.tokens = dpt::permute_rows(ts0.tokens, perm);
  for (std::size_t l = 0; l < c.layers; ++l)
    permuted = dpt::transformer_layer(permuted, m.encoder.layers[l], c.heads);
  auto expect = dpt::permute_rows(ts_out, perm);
  for (std::size_t i = 0; i < expect.numel(); ++i)
    EXPECT_NEAR(permuted.tokens.at(i), expect.at(i), 1e-9);
}

}  // namespace
