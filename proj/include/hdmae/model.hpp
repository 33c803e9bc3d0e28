#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hdmae/masking.hpp"
#include "hdmae/patch.hpp"
#include "hdmae/tensor.hpp"

namespace hdmae {

struct ViTConfig {
  PatchConfig patch;  // patch.embed_dim is kept equal to enc_dim
  int enc_depth = 4;
  int enc_heads = 4;
  int enc_dim = 64;
  int dec_depth = 2;
  int dec_heads = 4;
  int dec_dim = 32;
  int mlp_ratio = 4;

  void validate() const;  // ConfigError

  // Closed-form count of every learnable scalar in ModelParams.
  std::int64_t parameter_count() const;

  // image 64 / patch 8, encoder 64-d x 4 blocks x 4 heads,
  // decoder 32-d x 2 blocks x 4 heads.
  static ViTConfig toy();
  // image 1280 / patch 64, encoder 1024-d x 24 blocks x 16 heads,
  // decoder 512-d x 8 blocks x 16 heads.
  static ViTConfig full_scale();

  bool operator==(const ViTConfig&) const = default;
};

template <typename T>
struct BlockParams {
  Tensor<T> ln1_g, ln1_b;
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<T> ln2_g, ln2_b;
  Tensor<T> w1, b1, w2, b2;
};

template <typename T>
struct ModelParams {
  Tensor<T> patch_w, patch_b;
  std::vector<BlockParams<T>> enc;
  Tensor<T> enc_norm_g, enc_norm_b;
  Tensor<T> dec_embed_w, dec_embed_b;
  Tensor<T> mask_token;
  std::vector<BlockParams<T>> dec;
  Tensor<T> dec_norm_g, dec_norm_b;
  Tensor<T> head_w, head_b;

  // Visits every parameter in canonical order as (name, tensor, decays).
  // `decays` is false for biases, norm gains/biases and the mask token.
  template <typename Fn>
  void visit(Fn&& fn);
  template <typename Fn>
  void visit(Fn&& fn) const;

  std::int64_t numel() const;
  ModelParams clone() const;
  void zero_grad();

  template <typename U>
  ModelParams<U> cast() const;
};

// Zero-filled parameters with the shapes implied by cfg; gradients enabled.
template <typename T>
ModelParams<T> zero_params(const ViTConfig& cfg);

// Truncated normal (std 0.02, cut at 2 std) for weight matrices and the mask
// token; zeros for biases; ones for norm gains. Values are drawn in visit()
// order from the init stream of `seed`.
template <typename T>
ModelParams<T> init_params(const ViTConfig& cfg, std::uint64_t seed);

// Throws ContractError if any parameter shape disagrees with cfg.
template <typename T>
void check_params(const ModelParams<T>& params, const ViTConfig& cfg);

// Multi-head scaled dot-product attention on [n, d] inputs: per head h,
// softmax(q_h k_h^T / sqrt(d / heads)) v_h, heads concatenated. The output
// projection belongs to the caller.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    int heads);

// Pre-norm block: x += Attn(LN(x)); x += MLP(LN(x)).
template <typename T>
Tensor<T> transformer_block(const BlockParams<T>& p, const Tensor<T>& x,
                            int heads);

template <typename T>
Tensor<T> encoder_forward(const ModelParams<T>& params, const ViTConfig& cfg,
                          const Tensor<T>& tokens);

// Embeds the visible patches, adds their positional encodings and runs the
// encoder. Only |visible| tokens enter the Transformer.
template <typename T>
Tensor<T> encode_visible(const ModelParams<T>& params, const ViTConfig& cfg,
                         const Tensor<T>& patches,
                         std::span<const std::int64_t> visible,
                         const Tensor<T>& enc_pos);

template <typename T>
Tensor<T> decoder_forward(const ModelParams<T>& params, const ViTConfig& cfg,
                          const Tensor<T>& latents, const MaskPlan& plan,
                          const Tensor<T>& dec_pos);

// (1/|masked|) sum_{i in masked} (1/P^2) ||pred_i - target_i||^2
template <typename T>
Tensor<T> mae_loss(const Tensor<T>& pred, const Tensor<T>& target,
                   const MaskPlan& plan);

template <typename T>
struct PositionTables {
  Tensor<T> enc;  // [N, enc_dim]
  Tensor<T> dec;  // [N, dec_dim]

  static PositionTables make(const ViTConfig& cfg);
};

template <typename T>
struct ForwardResult {
  Tensor<T> pred;  // [N, P^2]
  Tensor<T> loss;  // scalar
};

// patches -> encode visible -> decode all tokens -> masked L2 loss.
template <typename T>
ForwardResult<T> mae_forward(const ModelParams<T>& params, const ViTConfig& cfg,
                             const PositionTables<T>& pos,
                             const Tensor<T>& patches, const MaskPlan& plan);

// ---- template members --------------------------------------------------------

namespace detail {
template <typename Block, typename Fn>
void visit_block(Block& b, const std::string& prefix, Fn& fn) {
  fn(prefix + "ln1.g", b.ln1_g, false);
  fn(prefix + "ln1.b", b.ln1_b, false);
  fn(prefix + "attn.wq", b.wq, true);
  fn(prefix + "attn.bq", b.bq, false);
  fn(prefix + "attn.wk", b.wk, true);
  fn(prefix + "attn.bk", b.bk, false);
  fn(prefix + "attn.wv", b.wv, true);
  fn(prefix + "attn.bv", b.bv, false);
  fn(prefix + "attn.wo", b.wo, true);
  fn(prefix + "attn.bo", b.bo, false);
  fn(prefix + "ln2.g", b.ln2_g, false);
  fn(prefix + "ln2.b", b.ln2_b, false);
  fn(prefix + "mlp.w1", b.w1, true);
  fn(prefix + "mlp.b1", b.b1, false);
  fn(prefix + "mlp.w2", b.w2, true);
  fn(prefix + "mlp.b2", b.b2, false);
}

template <typename P, typename Fn>
void visit_params(P& p, Fn& fn) {
  fn(std::string("patch.w"), p.patch_w, true);
  fn(std::string("patch.b"), p.patch_b, false);
  for (std::size_t i = 0; i < p.enc.size(); ++i) {
    visit_block(p.enc[i], "enc." + std::to_string(i) + ".", fn);
  }
  fn(std::string("enc_norm.g"), p.enc_norm_g, false);
  fn(std::string("enc_norm.b"), p.enc_norm_b, false);
  fn(std::string("dec_embed.w"), p.dec_embed_w, true);
  fn(std::string("dec_embed.b"), p.dec_embed_b, false);
  fn(std::string("mask_token"), p.mask_token, false);
  for (std::size_t i = 0; i < p.dec.size(); ++i) {
    visit_block(p.dec[i], "dec." + std::to_string(i) + ".", fn);
  }
  fn(std::string("dec_norm.g"), p.dec_norm_g, false);
  fn(std::string("dec_norm.b"), p.dec_norm_b, false);
  fn(std::string("head.w"), p.head_w, true);
  fn(std::string("head.b"), p.head_b, false);
}
}  // namespace detail

template <typename T>
template <typename Fn>
void ModelParams<T>::visit(Fn&& fn) {
  detail::visit_params(*this, fn);
}

template <typename T>
template <typename Fn>
void ModelParams<T>::visit(Fn&& fn) const {
  detail::visit_params(*this, fn);
}

template <typename T>
std::int64_t ModelParams<T>::numel() const {
  std::int64_t n = 0;
  visit([&](const std::string&, const Tensor<T>& t, bool) {
    n += static_cast<std::int64_t>(t.numel());
  });
  return n;
}

template <typename T>
ModelParams<T> ModelParams<T>::clone() const {
  ModelParams<T> out = *this;
  out.visit([](const std::string&, Tensor<T>& t, bool) { t = t.clone(); });
  return out;
}

template <typename T>
void ModelParams<T>::zero_grad() {
  visit([](const std::string&, Tensor<T>& t, bool) { t.zero_grad(); });
}

template <typename T>
template <typename U>
ModelParams<U> ModelParams<T>::cast() const {
  auto conv = [](const Tensor<T>& t) {
    std::vector<U> data(t.data().begin(), t.data().end());
    return Tensor<U>(t.shape(), std::move(data), t.requires_grad());
  };
  auto conv_block = [&](const BlockParams<T>& b) {
    return BlockParams<U>{conv(b.ln1_g), conv(b.ln1_b), conv(b.wq),
                          conv(b.bq),    conv(b.wk),    conv(b.bk),
                          conv(b.wv),    conv(b.bv),    conv(b.wo),
                          conv(b.bo),    conv(b.ln2_g), conv(b.ln2_b),
                          conv(b.w1),    conv(b.b1),    conv(b.w2),
                          conv(b.b2)};
  };
  ModelParams<U> out;
  out.patch_w = conv(patch_w);
  out.patch_b = conv(patch_b);
  for (const auto& b : enc) out.enc.push_back(conv_block(b));
  out.enc_norm_g = conv(enc_norm_g);
  out.enc_norm_b = conv(enc_norm_b);
  out.dec_embed_w = conv(dec_embed_w);
  out.dec_embed_b = conv(dec_embed_b);
  out.mask_token = conv(mask_token);
  for (const auto& b : dec) out.dec.push_back(conv_block(b));
  out.dec_norm_g = conv(dec_norm_g);
  out.dec_norm_b = conv(dec_norm_b);
  out.head_w = conv(head_w);
  out.head_b = conv(head_b);
  return out;
}

}  // namespace hdmae
