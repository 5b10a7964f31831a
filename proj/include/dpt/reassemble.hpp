#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "dpt/config.hpp"
#include "dpt/vit.hpp"

namespace dpt {

// Read: map N_p + 1 tokens to N_p rows, resolving the readout token by
// dropping it, adding it to every patch token, or projecting the
// concatenation back to D through a linear + GELU.
template <typename T>
Tensor<T> read_tokens(const TokenSet<T>& ts, ReadoutMode mode,
                      const LinearWeights<T>* proj = nullptr) {
  ts.validate();
  std::size_t n = ts.patch_count(), d = ts.dim();
  auto patches = slice_rows(ts.tokens, 1, n + 1);
  switch (mode) {
    case ReadoutMode::Ignore:
      return patches;
    case ReadoutMode::Add: {
      auto readout = reshape(slice_rows(ts.tokens, 0, 1), {d});
      return add_rowvec(patches, readout);
    }
    case ReadoutMode::Project: {
      check_config(proj != nullptr && proj->weight.numel() != 0,
                   "read: project mode requires projection weights");
      check_shape(proj->weight.extent(0) == 2 * d && proj->weight.extent(1) == d,
                  "read: projection must map 2D -> D");
      auto readout = reshape(slice_rows(ts.tokens, 0, 1), {d});
      auto cat = hstack<T>({patches, tile_row(readout, n)});
      return gelu(linear(cat, *proj));
    }
  }
  throw ConfigError("read: unknown readout mode");
}

// Concatenate: place token rows on the patch grid, channel-major.
// Channel c at (y, x) equals rows[y*w + x, c].
template <typename T>
FeatureMap<T> concatenate_tokens(const Tensor<T>& rows, std::size_t grid_h, std::size_t grid_w) {
  check_shape(rows.rank() == 2 && rows.extent(0) == grid_h * grid_w,
              "concatenate_tokens: " + std::to_string(rows.extent(0)) + " rows do not fill a " +
                  std::to_string(grid_h) + "x" + std::to_string(grid_w) + " grid");
  std::size_t d = rows.extent(1);
  return FeatureMap<T>(reshape(transpose(rows), {d, grid_h, grid_w}));
}

template <typename T>
struct ResampleWeights {
  ConvWeights<T> project;  // 1x1 to the decoder width
  ConvWeights<T> resize;   // 3x3 conv (s >= in) or 3x3 transpose conv (s < in)
};

inline void check_reassemble_scale(std::size_t s) {
  check_config(s == 4 || s == 8 || s == 16 || s == 32,
               "resample: scale " + std::to_string(s) + " not in {4, 8, 16, 32}");
}

// Resample: 1x1 projection to the decoder width, then move from the source
// scale (1/in_scale of the image) to the target scale 1/out_scale:
//   out > in  -> strided 3x3 convolution (downsample),
//   out == in -> 3x3 convolution, stride 1,
//   out < in  -> strided 3x3 transpose convolution (upsample).
template <typename T>
FeatureMap<T> resample(const FeatureMap<T>& f, std::size_t in_scale, std::size_t out_scale,
                       const ResampleWeights<T>& w) {
  check_reassemble_scale(out_scale);
  auto z = conv2d(f.data, w.project.weight, w.project.bias, 1, 0);
  if (out_scale > in_scale) {
    check_config(out_scale % in_scale == 0, "resample: non-integer downsample ratio");
    z = conv2d(z, w.resize.weight, w.resize.bias, out_scale / in_scale, 1);
  } else if (out_scale == in_scale) {
    z = conv2d(z, w.resize.weight, w.resize.bias, 1, 1);
  } else {
    check_config(in_scale % out_scale == 0, "resample: non-integer upsample ratio");
    std::size_t stride = in_scale / out_scale;
    z = conv_transpose2d(z, w.resize.weight, w.resize.bias, stride, 1, stride - 1);
  }
  return FeatureMap<T>(std::move(z));
}

template <typename T>
struct ReassembleWeights {
  LinearWeights<T> readout_proj;  // project mode, token hooks only
  ResampleWeights<T> resample;
};

// Full Reassemble for one hook: Read -> Concatenate -> Resample for token
// taps. Hybrid R0/R1 maps are already image-like and skip straight to the
// Resample projection; `in_scale` is the tap's own stride (p for tokens,
// 4/8 for R0/R1).
template <typename T>
FeatureMap<T> reassemble_hook(const HookOutput<T>& hook, std::size_t in_scale,
                              std::size_t out_scale, ReadoutMode mode,
                              const ReassembleWeights<T>& w) {
  if (std::holds_alternative<FeatureMap<T>>(hook))
    return resample(std::get<FeatureMap<T>>(hook), in_scale, out_scale, w.resample);
  const auto& ts = std::get<TokenSet<T>>(hook);
  auto rows = read_tokens(ts, mode, &w.readout_proj);
  auto map = concatenate_tokens(rows, ts.grid_h, ts.grid_w);
  return resample(map, in_scale, out_scale, w.resample);
}

// Reassembles all four taps shallow -> deep at the configured scales.
template <typename T>
std::array<FeatureMap<T>, 4> reassemble_all(const std::vector<HookOutput<T>>& hooks,
                                            const DptConfig& cfg,
                                            const std::array<ReassembleWeights<T>, 4>& w) {
  check_shape(hooks.size() == 4, "reassemble_all: expected 4 hook outputs");
  std::array<FeatureMap<T>, 4> out;
  for (std::size_t i = 0; i < 4; ++i) {
    std::size_t in_scale = cfg.token_stride();
    if (cfg.hooks[i].kind == HookPoint::Kind::ResnetStage)
      in_scale = cfg.hooks[i].index == 0 ? 4 : 8;
    out[i] = reassemble_hook(hooks[i], in_scale, cfg.scales[i], cfg.readout, w[i]);
  }
  return out;
}

}  // namespace dpt
