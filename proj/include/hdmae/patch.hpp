#pragma once

#include <vector>

#include "hdmae/tensor.hpp"

namespace hdmae {

// Square grayscale image, row-major, intensities in [0, 1].
struct ImageGray {
  int side = 0;
  std::vector<float> pixels;

  float at(int row, int col) const {
    return pixels[static_cast<std::size_t>(row) * static_cast<std::size_t>(side) +
                  static_cast<std::size_t>(col)];
  }
  // Throws ContractError when the pixel count or value range is wrong.
  void validate() const;
};

struct PatchConfig {
  int image_side = 64;
  int patch_side = 8;
  int embed_dim = 64;

  int grid_side() const { return image_side / patch_side; }
  int token_count() const { return grid_side() * grid_side(); }
  int patch_pixels() const { return patch_side * patch_side; }
  // Throws ConfigError.
  void validate() const;

  bool operator==(const PatchConfig&) const = default;
};

// [N, P*P]; row k is patch (k / grid_side, k % grid_side) flattened row-major.
template <typename T>
Tensor<T> patchify(const ImageGray& img, const PatchConfig& cfg);

// Inverse of patchify. Values are clamped into [0, 1].
template <typename T>
ImageGray unpatchify(const Tensor<T>& patches, const PatchConfig& cfg);

// patches @ proj_w + proj_b; the stride-P convolution written as a matmul.
template <typename T>
Tensor<T> embed_patches(const Tensor<T>& patches, const Tensor<T>& proj_w,
                        const Tensor<T>& proj_b);

// Fixed 2D sine-cosine table of shape [grid_side^2, dim].
//
// Channels [0, dim/2) encode the patch row, [dim/2, dim) the column. Within
// each half, channel 2k holds sin(p * w_k) and 2k+1 holds cos(p * w_k) with
// w_k = 10000^(-k / (dim/4)), k = 0 .. dim/4 - 1.
template <typename T>
Tensor<T> sincos_pos_embed(int grid_side, int dim);

template <typename T>
Tensor<T> sincos_pos_embed(const PatchConfig& cfg) {
  return sincos_pos_embed<T>(cfg.grid_side(), cfg.embed_dim);
}

}  // namespace hdmae
