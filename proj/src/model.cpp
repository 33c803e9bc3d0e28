#include "hdmae/model.hpp"

#include <cmath>
#include <string>

#include "hdmae/errors.hpp"

namespace hdmae {

namespace {
constexpr double kNormEps = 1e-6;
constexpr double kInitStd = 0.02;
}  // namespace

void ViTConfig::validate() const {
  patch.validate();
  if (patch.embed_dim != enc_dim) {
    throw ConfigError("patch embed_dim " + std::to_string(patch.embed_dim) +
                      " must equal enc_dim " + std::to_string(enc_dim));
  }
  if (enc_depth < 0 || dec_depth < 0) {
    throw ConfigError("block depths must be non-negative");
  }
  if (enc_dim <= 0 || dec_dim <= 0 || enc_heads <= 0 || dec_heads <= 0 ||
      mlp_ratio <= 0) {
    throw ConfigError("model widths, head counts and mlp_ratio must be positive");
  }
  if (enc_dim % enc_heads != 0) {
    throw ConfigError("enc_dim " + std::to_string(enc_dim) +
                      " is not divisible by enc_heads " +
                      std::to_string(enc_heads));
  }
  if (dec_dim % dec_heads != 0) {
    throw ConfigError("dec_dim " + std::to_string(dec_dim) +
                      " is not divisible by dec_heads " +
                      std::to_string(dec_heads));
  }
  if (enc_dim % 4 != 0 || dec_dim % 4 != 0) {
    throw ConfigError("enc_dim and dec_dim must be multiples of 4 for the "
                      "sine-cosine position table");
  }
  if (patch.token_count() < 2) {
    throw ConfigError("need at least 2 patches per image");
  }
}

std::int64_t ViTConfig::parameter_count() const {
  auto block = [this](std::int64_t d) {
    const std::int64_t h = static_cast<std::int64_t>(mlp_ratio) * d;
    return 2 * d                // ln1
           + 4 * (d * d + d)    // q, k, v, o
           + 2 * d              // ln2
           + (d * h + h)        // mlp in
           + (h * d + d);       // mlp out
  };
  const std::int64_t p2 = patch.patch_pixels();
  const std::int64_t d = enc_dim;
  const std::int64_t dd = dec_dim;
  return (p2 * d + d) + enc_depth * block(d) + 2 * d + (d * dd + dd) + dd +
         dec_depth * block(dd) + 2 * dd + (dd * p2 + p2);
}

ViTConfig ViTConfig::toy() {
  ViTConfig cfg;
  cfg.patch = PatchConfig{64, 8, 64};
  cfg.enc_depth = 4;
  cfg.enc_heads = 4;
  cfg.enc_dim = 64;
  cfg.dec_depth = 2;
  cfg.dec_heads = 4;
  cfg.dec_dim = 32;
  cfg.mlp_ratio = 4;
  return cfg;
}

ViTConfig ViTConfig::full_scale() {
  ViTConfig cfg;
  cfg.patch = PatchConfig{1280, 64, 1024};
  cfg.enc_depth = 24;
  cfg.enc_heads = 16;
  cfg.enc_dim = 1024;
  cfg.dec_depth = 8;
  cfg.dec_heads = 16;
  cfg.dec_dim = 512;
  cfg.mlp_ratio = 4;
  return cfg;
}

namespace {

template <typename T>
BlockParams<T> shaped_block(std::int64_t d, std::int64_t hidden) {
  auto z = [](Shape s) { return Tensor<T>::zeros(std::move(s), true); };
  return BlockParams<T>{z({d}),         z({d}),      z({d, d}),     z({d}),
                        z({d, d}),      z({d}),      z({d, d}),     z({d}),
                        z({d, d}),      z({d}),      z({d}),        z({d}),
                        z({d, hidden}), z({hidden}), z({hidden, d}), z({d})};
}

}  // namespace

template <typename T>
ModelParams<T> zero_params(const ViTConfig& cfg) {
  auto z = [](Shape s) { return Tensor<T>::zeros(std::move(s), true); };
  const std::int64_t p2 = cfg.patch.patch_pixels();
  const std::int64_t d = cfg.enc_dim;
  const std::int64_t dd = cfg.dec_dim;
  ModelParams<T> p;
  p.patch_w = z({p2, d});
  p.patch_b = z({d});
  for (int i = 0; i < cfg.enc_depth; ++i) {
    p.enc.push_back(shaped_block<T>(d, cfg.mlp_ratio * d));
  }
  p.enc_norm_g = z({d});
  p.enc_norm_b = z({d});
  p.dec_embed_w = z({d, dd});
  p.dec_embed_b = z({dd});
  p.mask_token = z({dd});
  for (int i = 0; i < cfg.dec_depth; ++i) {
    p.dec.push_back(shaped_block<T>(dd, cfg.mlp_ratio * dd));
  }
  p.dec_norm_g = z({dd});
  p.dec_norm_b = z({dd});
  p.head_w = z({dd, p2});
  p.head_b = z({p2});
  return p;
}

namespace {

bool is_gain(const std::string& name) {
  return name.size() >= 2 && name.compare(name.size() - 2, 2, ".g") == 0;
}

}  // namespace

template <typename T>
ModelParams<T> init_params(const ViTConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  auto params = zero_params<T>(cfg);
  Rng rng = make_stream(seed, StreamPurpose::kInit);
  params.visit([&](const std::string& name, Tensor<T>& t, bool decays) {
    if (decays || name == "mask_token") {
      t = truncated_normal_init<T>(t.shape(), rng, kInitStd, 2.0, true);
    } else if (is_gain(name)) {
      t = Tensor<T>::full(t.shape(), T(1), true);
    }
  });
  return params;
}

template <typename T>
void check_params(const ModelParams<T>& params, const ViTConfig& cfg) {
  cfg.validate();
  const auto expected = zero_params<T>(cfg);
  if (params.enc.size() != expected.enc.size() ||
      params.dec.size() != expected.dec.size()) {
    throw ContractError("parameters have " + std::to_string(params.enc.size()) +
                        "+" + std::to_string(params.dec.size()) +
                        " blocks, config expects " +
                        std::to_string(expected.enc.size()) + "+" +
                        std::to_string(expected.dec.size()));
  }
  std::vector<Shape> shapes;
  expected.visit([&](const std::string&, const Tensor<T>& t, bool) {
    shapes.push_back(t.shape());
  });
  std::size_t i = 0;
  params.visit([&](const std::string& name, const Tensor<T>& t, bool) {
    if (!t.defined() || t.shape() != shapes[i]) {
      throw ContractError("parameter " + name + " has shape " +
                          (t.defined() ? shape_str(t.shape()) : "<none>") +
                          ", config expects " + shape_str(shapes[i]));
    }
    ++i;
  });
}

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    int heads) {
  if (q.rank() != 2 || k.shape() != q.shape() || v.shape() != q.shape()) {
    throw DimensionError("attention: q/k/v must share one [n, d] shape, got " +
                         shape_str(q.shape()) + ", " + shape_str(k.shape()) +
                         ", " + shape_str(v.shape()));
  }
  const std::int64_t d = q.dim(1);
  if (heads <= 0 || d % heads != 0) {
    throw ConfigError("attention: width " + std::to_string(d) +
                      " is not divisible by " + std::to_string(heads) +
                      " heads");
  }
  const std::int64_t c = d / heads;
  const double inv_sqrt_c = 1.0 / std::sqrt(static_cast<double>(c));
  if (heads == 1) {
    auto w = softmax_lastdim(scale(matmul(q, transpose_last2(k)), inv_sqrt_c));
    return matmul(w, v);
  }
  std::vector<Tensor<T>> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    auto qh = slice_lastdim(q, h * c, c);
    auto kh = slice_lastdim(k, h * c, c);
    auto vh = slice_lastdim(v, h * c, c);
    auto w = softmax_lastdim(scale(matmul(qh, transpose_last2(kh)), inv_sqrt_c));
    outs.push_back(matmul(w, vh));
  }
  return concat<T>(outs, -1);
}

namespace {
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add_bias(matmul(x, w), b);
}
}  // namespace

template <typename T>
Tensor<T> transformer_block(const BlockParams<T>& p, const Tensor<T>& x,
                            int heads) {
  auto h = layer_norm(x, p.ln1_g, p.ln1_b, kNormEps);
  auto a = attention(linear(h, p.wq, p.bq), linear(h, p.wk, p.bk),
                     linear(h, p.wv, p.bv), heads);
  auto x1 = add(x, linear(a, p.wo, p.bo));
  auto h2 = layer_norm(x1, p.ln2_g, p.ln2_b, kNormEps);
  auto m = linear(gelu(linear(h2, p.w1, p.b1)), p.w2, p.b2);
  return add(x1, m);
}

template <typename T>
Tensor<T> encoder_forward(const ModelParams<T>& params, const ViTConfig& cfg,
                          const Tensor<T>& tokens) {
  if (tokens.rank() != 2 || tokens.dim(1) != cfg.enc_dim || tokens.dim(0) < 1) {
    throw DimensionError("encoder_forward: expected [M >= 1, " +
                         std::to_string(cfg.enc_dim) + "], got " +
                         shape_str(tokens.shape()));
  }
  Tensor<T> x = tokens;
  for (const auto& block : params.enc) {
    x = transformer_block(block, x, cfg.enc_heads);
  }
  return layer_norm(x, params.enc_norm_g, params.enc_norm_b, kNormEps);
}

template <typename T>
Tensor<T> encode_visible(const ModelParams<T>& params, const ViTConfig& cfg,
                         const Tensor<T>& patches,
                         std::span<const std::int64_t> visible,
                         const Tensor<T>& enc_pos) {
  auto x = embed_patches(gather_rows(patches, visible), params.patch_w,
                         params.patch_b);
  x = add(x, gather_rows(enc_pos, visible));
  return encoder_forward(params, cfg, x);
}

template <typename T>
Tensor<T> decoder_forward(const ModelParams<T>& params, const ViTConfig& cfg,
                          const Tensor<T>& latents, const MaskPlan& plan,
                          const Tensor<T>& dec_pos) {
  const auto m = static_cast<std::int64_t>(plan.visible.size());
  if (latents.rank() != 2 || latents.dim(0) != m) {
    throw ContractError("decoder_forward: " + shape_str(latents.shape()) +
                        " latents for a plan with " + std::to_string(m) +
                        " visible tokens");
  }
  if (dec_pos.shape() != Shape{plan.n_tokens, cfg.dec_dim}) {
    throw DimensionError("decoder_forward: position table " +
                         shape_str(dec_pos.shape()) + " does not match " +
                         std::to_string(plan.n_tokens) + " tokens");
  }
  // Rows 0..M-1 of the pool are the projected latents, row M the mask token.
  auto projected = linear(latents, params.dec_embed_w, params.dec_embed_b);
  const Tensor<T> pool_parts[] = {
      projected, reshape(params.mask_token, Shape{1, cfg.dec_dim})};
  auto pool = concat<T>(pool_parts, 0);
  std::vector<std::int64_t> source(static_cast<std::size_t>(plan.n_tokens), m);
  for (std::int64_t j = 0; j < m; ++j) {
    source[static_cast<std::size_t>(plan.visible[static_cast<std::size_t>(j)])] = j;
  }
  auto x = add(gather_rows(pool, source), dec_pos);
  for (const auto& block : params.dec) {
    x = transformer_block(block, x, cfg.dec_heads);
  }
  x = layer_norm(x, params.dec_norm_g, params.dec_norm_b, kNormEps);
  return linear(x, params.head_w, params.head_b);
}

template <typename T>
Tensor<T> mae_loss(const Tensor<T>& pred, const Tensor<T>& target,
                   const MaskPlan& plan) {
  if (pred.shape() != target.shape()) {
    throw DimensionError("mae_loss: prediction " + shape_str(pred.shape()) +
                         " vs target " + shape_str(target.shape()));
  }
  if (plan.masked.empty()) {
    throw ContractError("mae_loss: plan has no masked tokens");
  }
  auto diff = sub(gather_rows(pred, plan.masked), gather_rows(target, plan.masked));
  return mean(mul(diff, diff));
}

template <typename T>
PositionTables<T> PositionTables<T>::make(const ViTConfig& cfg) {
  return PositionTables{sincos_pos_embed<T>(cfg.patch.grid_side(), cfg.enc_dim),
                        sincos_pos_embed<T>(cfg.patch.grid_side(), cfg.dec_dim)};
}

template <typename T>
ForwardResult<T> mae_forward(const ModelParams<T>& params, const ViTConfig& cfg,
                             const PositionTables<T>& pos,
                             const Tensor<T>& patches, const MaskPlan& plan) {
  auto latents = encode_visible(params, cfg, patches, plan.visible, pos.enc);
  auto pred = decoder_forward(params, cfg, latents, plan, pos.dec);
  auto loss = mae_loss(pred, patches, plan);
  return {pred, loss};
}

#define HDMAE_INSTANTIATE(T)                                                   \
  template ModelParams<T> zero_params<T>(const ViTConfig&);                   \
  template ModelParams<T> init_params<T>(const ViTConfig&, std::uint64_t);     \
  template void check_params<T>(const ModelParams<T>&, const ViTConfig&);      \
  template Tensor<T> attention<T>(const Tensor<T>&, const Tensor<T>&,          \
                                  const Tensor<T>&, int);                      \
  template Tensor<T> transformer_block<T>(const BlockParams<T>&,               \
                                          const Tensor<T>&, int);              \
  template Tensor<T> encoder_forward<T>(const ModelParams<T>&,                 \
                                        const ViTConfig&, const Tensor<T>&);   \
  template Tensor<T> encode_visible<T>(const ModelParams<T>&,                  \
                                       const ViTConfig&, const Tensor<T>&,     \
                                       std::span<const std::int64_t>,          \
                                       const Tensor<T>&);                      \
  template Tensor<T> decoder_forward<T>(const ModelParams<T>&,                 \
                                        const ViTConfig&, const Tensor<T>&,    \
                                        const MaskPlan&, const Tensor<T>&);    \
  template Tensor<T> mae_loss<T>(const Tensor<T>&, const Tensor<T>&,           \
                                 const MaskPlan&);                             \
  template struct PositionTables<T>;                                           \
  template ForwardResult<T> mae_forward<T>(const ModelParams<T>&,              \
                                           const ViTConfig&,                   \
                                           const PositionTables<T>&,           \
                                           const Tensor<T>&, const MaskPlan&);

HDMAE_INSTANTIATE(float)
HDMAE_INSTANTIATE(double)

#undef HDMAE_INSTANTIATE

}  // namespace hdmae
