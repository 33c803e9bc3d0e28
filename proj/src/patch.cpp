#include "hdmae/patch.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "hdmae/errors.hpp"

namespace hdmae {

void ImageGray::validate() const {
  if (side <= 0 || pixels.size() != static_cast<std::size_t>(side) *
                                        static_cast<std::size_t>(side)) {
    throw ContractError("image: " + std::to_string(pixels.size()) +
                        " pixels for side " + std::to_string(side));
  }
  for (float v : pixels) {
    if (!(v >= 0.0f && v <= 1.0f)) {
      throw ContractError("image: pixel value " + std::to_string(v) +
                          " outside [0, 1]");
    }
  }
}

void PatchConfig::validate() const {
  if (image_side <= 0 || patch_side <= 0 || embed_dim <= 0) {
    throw ConfigError("patch config: sizes must be positive");
  }
  if (image_side % patch_side != 0) {
    throw ConfigError("patch config: image_side " + std::to_string(image_side) +
                      " is not divisible by patch_side " +
                      std::to_string(patch_side));
  }
}

template <typename T>
Tensor<T> patchify(const ImageGray& img, const PatchConfig& cfg) {
  cfg.validate();
  if (img.side != cfg.image_side) {
    throw DimensionError("patchify: image side " + std::to_string(img.side) +
                         " != configured " + std::to_string(cfg.image_side));
  }
  const int g = cfg.grid_side();
  const int p = cfg.patch_side;
  std::vector<T> out(static_cast<std::size_t>(cfg.token_count()) *
                     static_cast<std::size_t>(cfg.patch_pixels()));
  std::size_t o = 0;
  for (int gr = 0; gr < g; ++gr)
    for (int gc = 0; gc < g; ++gc)
      for (int r = 0; r < p; ++r)
        for (int c = 0; c < p; ++c)
          out[o++] = static_cast<T>(img.at(gr * p + r, gc * p + c));
  return Tensor<T>({cfg.token_count(), cfg.patch_pixels()}, std::move(out));
}

template <typename T>
ImageGray unpatchify(const Tensor<T>& patches, const PatchConfig& cfg) {
  cfg.validate();
  if (patches.shape() != Shape{cfg.token_count(), cfg.patch_pixels()}) {
    throw DimensionError("unpatchify: got " + shape_str(patches.shape()) +
                         ", expected " +
                         shape_str({cfg.token_count(), cfg.patch_pixels()}));
  }
  const int g = cfg.grid_side();
  const int p = cfg.patch_side;
  ImageGray img;
  img.side = cfg.image_side;
  img.pixels.resize(static_cast<std::size_t>(img.side) * static_cast<std::size_t>(img.side));
  auto src = patches.data();
  std::size_t o = 0;
  for (int gr = 0; gr < g; ++gr)
    for (int gc = 0; gc < g; ++gc)
      for (int r = 0; r < p; ++r)
        for (int c = 0; c < p; ++c) {
          const float v = static_cast<float>(src[o++]);
          img.pixels[static_cast<std::size_t>(gr * p + r) * static_cast<std::size_t>(img.side) +
                     static_cast<std::size_t>(gc * p + c)] = std::clamp(v, 0.0f, 1.0f);
        }
  return img;
}

template <typename T>
Tensor<T> embed_patches(const Tensor<T>& patches, const Tensor<T>& proj_w,
                        const Tensor<T>& proj_b) {
  return add_bias(matmul(patches, proj_w), proj_b);
}

template <typename T>
Tensor<T> sincos_pos_embed(int grid_side, int dim) {
  if (dim <= 0 || dim % 4 != 0) {
    throw ConfigError("sincos_pos_embed: dim " + std::to_string(dim) +
                      " must be a positive multiple of 4");
  }
  if (grid_side <= 0) {
    throw ConfigError("sincos_pos_embed: grid_side must be positive");
  }
  const int quarter = dim / 4;
  const int half = dim / 2;
  std::vector<double> freq(static_cast<std::size_t>(quarter));
  for (int k = 0; k < quarter; ++k) {
    freq[static_cast<std::size_t>(k)] =
        std::pow(10000.0, -static_cast<double>(k) / quarter);
  }
  const int n = grid_side * grid_side;
  std::vector<T> out(static_cast<std::size_t>(n) * static_cast<std::size_t>(dim));
  for (int t = 0; t < n; ++t) {
    const double pos[2] = {static_cast<double>(t / grid_side),
                           static_cast<double>(t % grid_side)};
    T* row = out.data() + static_cast<std::size_t>(t) * static_cast<std::size_t>(dim);
    for (int h = 0; h < 2; ++h) {
      for (int k = 0; k < quarter; ++k) {
        const double a = pos[h] * freq[static_cast<std::size_t>(k)];
        row[h * half + 2 * k] = static_cast<T>(std::sin(a));
        row[h * half + 2 * k + 1] = static_cast<T>(std::cos(a));
      }
    }
  }
  return Tensor<T>({n, dim}, std::move(out));
}

#define HDMAE_INSTANTIATE(T)                                                 \
  template Tensor<T> patchify<T>(const ImageGray&, const PatchConfig&);      \
  template ImageGray unpatchify<T>(const Tensor<T>&, const PatchConfig&);    \
  template Tensor<T> embed_patches<T>(const Tensor<T>&, const Tensor<T>&,    \
                                      const Tensor<T>&);                     \
  template Tensor<T> sincos_pos_embed<T>(int, int);

HDMAE_INSTANTIATE(float)
HDMAE_INSTANTIATE(double)

#undef HDMAE_INSTANTIATE

}  // namespace hdmae
