#pragma once

#include <cstddef>

#include "dpt/conv.hpp"
#include "dpt/tensor.hpp"

namespace dpt {

// (N_p + 1) x D token matrix; row 0 is the readout token, patch rows follow in
// row-major grid order.
template <typename T>
struct TokenSet {
  Tensor<T> tokens;
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  int layer_tag = 0;  // 0 = embedding output, l = output of layer l

  static constexpr std::size_t readout_index = 0;

  std::size_t patch_count() const { return grid_h * grid_w; }
  std::size_t dim() const { return tokens.extent(1); }

  void validate() const {
    check_shape(tokens.rank() == 2 && tokens.extent(0) == patch_count() + 1,
                "token set: expected " + std::to_string(patch_count() + 1) + " rows, got " +
                    shape_str(tokens.shape()));
  }
};

// Image-like C x H x W map exchanged between decoder stages.
template <typename T>
struct FeatureMap {
  Tensor<T> data;

  FeatureMap() = default;
  explicit FeatureMap(Tensor<T> t) : data(std::move(t)) {
    check_shape(data.rank() == 3, "feature map: expected CxHxW, got " + shape_str(data.shape()));
  }

  std::size_t channels() const { return data.extent(0); }
  std::size_t height() const { return data.extent(1); }
  std::size_t width() const { return data.extent(2); }
};

template <typename T>
struct LinearWeights {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]
};

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const LinearWeights<T>& w) {
  return add_rowvec(matmul(x, w.weight), w.bias);
}

template <typename T>
struct ConvWeights {
  Tensor<T> weight;
  Tensor<T> bias;  // may be empty when a norm layer follows
};

template <typename T>
struct NormWeights {
  Tensor<T> gamma;
  Tensor<T> beta;
};

template <typename T>
struct BatchNormWeights {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
};

// Resizes a stored (N_src + 1) x D position embedding to a new patch grid.
// The readout row passes through unchanged; patch rows are treated as a
// src_h x src_w image per channel and resized with align-corners bilinear
// sampling, so a same-grid call returns the input bit-exactly.
template <typename T>
Tensor<T> interpolate_pos_embed(const Tensor<T>& pos, std::size_t src_h, std::size_t src_w,
                                std::size_t dst_h, std::size_t dst_w) {
  check_shape(pos.rank() == 2 && pos.extent(0) == src_h * src_w + 1,
              "interpolate_pos_embed: expected " + std::to_string(src_h * src_w + 1) +
                  " rows for a " + std::to_string(src_h) + "x" + std::to_string(src_w) +
                  " grid, got " + shape_str(pos.shape()));
  if (src_h == dst_h && src_w == dst_w) return pos;
  std::size_t d = pos.extent(1);
  auto readout_row = slice_rows(pos, 0, 1);
  auto patch_rows = slice_rows(pos, 1, src_h * src_w + 1);
  auto grid = reshape(transpose(patch_rows), {d, src_h, src_w});
  auto resized = bilinear_resize(grid, dst_h, dst_w);
  auto rows = transpose(reshape(resized, {d, dst_h * dst_w}));
  return vstack(readout_row, rows);
}

// Prepends the readout token and adds the (grid-matched) position embedding.
template <typename T>
TokenSet<T> assemble_tokens(const Tensor<T>& patch_rows, std::size_t grid_h, std::size_t grid_w,
                            const Tensor<T>& pos, std::size_t pos_grid_h, std::size_t pos_grid_w,
                            const Tensor<T>& readout) {
  std::size_t d = patch_rows.extent(1);
  check_shape(patch_rows.extent(0) == grid_h * grid_w,
              "assemble_tokens: row count does not match grid");
  auto with_readout = vstack(reshape(readout, {1, d}), patch_rows);
  auto pos_fit = interpolate_pos_embed(pos, pos_grid_h, pos_grid_w, grid_h, grid_w);
  TokenSet<T> ts;
  ts.tokens = add(with_readout, pos_fit);
  ts.grid_h = grid_h;
  ts.grid_w = grid_w;
  ts.layer_tag = 0;
  return ts;
}

}  // namespace dpt
