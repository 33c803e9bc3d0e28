#include "hdmae/gradcheck_suite.hpp"

#include <cmath>

#include "hdmae/masking.hpp"
#include "hdmae/model.hpp"
#include "hdmae/probe.hpp"

namespace hdmae {
namespace {

using TD = Tensor<double>;
using Inputs = std::span<const TD>;

TD randn(Shape shape, Rng& rng, double stddev = 1.0) {
  return gaussian_init<double>(std::move(shape), rng, 0.0, stddev, true);
}

// Projects an op output onto fixed random weights so every output element
// receives a distinct adjoint.
TD project(const TD& y, std::uint64_t seed) {
  Rng rng(seed);
  const TD w = gaussian_init<double>(y.shape(), rng, 0.0, 1.0, false);
  return sum(mul(y, w));
}

GradCheckCase make_case(std::string name, std::uint64_t seed,
                        std::function<std::vector<TD>(Rng&)> inputs,
                        std::function<TD(Inputs)> op) {
  return {name, [name, seed, inputs, op](const GradCheckOptions& opts) {
            Rng rng(seed);
            auto xs = inputs(rng);
            return gradcheck(name, std::move(xs),
                             [op, seed](Inputs in) { return project(op(in), seed + 77); },
                             opts);
          }};
}

ViTConfig toy_gradcheck_config() {
  ViTConfig cfg;
  cfg.patch = PatchConfig{16, 4, 16};  // 16 tokens of 16 pixels
  cfg.enc_dim = 16;
  cfg.enc_heads = 2;
  cfg.enc_depth = 1;
  cfg.dec_dim = 16;
  cfg.dec_heads = 2;
  cfg.dec_depth = 1;
  cfg.mlp_ratio = 2;
  return cfg;
}

// Random parameters with enough spread that every nonlinearity is exercised.
ModelParams<double> spread_params(const ViTConfig& cfg, Rng& rng) {
  auto params = zero_params<double>(cfg);
  params.visit([&](const std::string& name, TD& t, bool decays) {
    const bool gain = name.size() >= 2 && name.compare(name.size() - 2, 2, ".g") == 0;
    const double mean = gain ? 1.0 : 0.0;
    const double stddev = decays ? 0.3 : 0.1;
    t = gaussian_init<double>(t.shape(), rng, mean, stddev, true);
  });
  return params;
}

std::vector<TD> flatten(const ModelParams<double>& p) {
  std::vector<TD> out;
  p.visit([&](const std::string&, const TD& t, bool) { out.push_back(t); });
  return out;
}

ModelParams<double> unflatten(const ViTConfig& cfg, Inputs in) {
  auto p = zero_params<double>(cfg);
  std::size_t i = 0;
  p.visit([&](const std::string&, TD& t, bool) { t = in[i++]; });
  return p;
}

GradCheckResult run_full_mae(const GradCheckOptions& opts) {
  const ViTConfig cfg = toy_gradcheck_config();
  Rng rng(9001);
  auto params = spread_params(cfg, rng);
  ImageGray img;
  img.side = cfg.patch.image_side;
  for (int i = 0; i < img.side * img.side; ++i) {
    img.pixels.push_back(static_cast<float>(rng.uniform()));
  }
  const auto patches = patchify<double>(img, cfg.patch);
  const auto plan = random_mask(cfg.patch.token_count(), 0.75, rng);
  const auto pos = PositionTables<double>::make(cfg);
  return gradcheck("mae_end_to_end", flatten(params), [&](Inputs in) {
    return mae_forward(unflatten(cfg, in), cfg, pos, patches, plan).loss;
  }, opts);
}

GradCheckResult run_encoder_block(const GradCheckOptions& opts) {
  const ViTConfig cfg = toy_gradcheck_config();
  Rng rng(4242);
  auto params = spread_params(cfg, rng);
  const BlockParams<double>& b = params.enc.at(0);
  std::vector<TD> inputs{b.ln1_g, b.ln1_b, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv,
                         b.wo,    b.bo,    b.ln2_g, b.ln2_b, b.w1, b.b1, b.w2, b.b2};
  inputs.push_back(randn({4, cfg.enc_dim}, rng));
  return gradcheck("encoder_block", std::move(inputs), [&](Inputs in) {
    const BlockParams<double> p{in[0], in[1], in[2],  in[3],  in[4],  in[5],  in[6],  in[7],
                                in[8], in[9], in[10], in[11], in[12], in[13], in[14], in[15]};
    return project(transformer_block(p, in[16], cfg.enc_heads), 4343);
  }, opts);
}

GradCheckResult run_probe(const GradCheckOptions& opts) {
  Rng rng(555);
  FeatureMatrix feats(12, std::vector<double>(5));
  std::vector<int> labels(12);
  for (std::size_t i = 0; i < feats.size(); ++i) {
    for (auto& v : feats[i]) v = rng.normal();
    labels[i] = static_cast<int>(i % 2);
  }
  ProbeHead head{std::vector<double>(5), 0.3};
  for (auto& w : head.weight) w = rng.normal();
  const auto analytic = probe_gradient(head, feats, labels);
  std::vector<double> numeric(analytic.size());
  for (std::size_t j = 0; j < numeric.size(); ++j) {
    double& x = j < 5 ? head.weight[j] : head.bias;
    const double x0 = x;
    const double h = opts.step_scale * std::max(1.0, std::abs(x0));
    x = x0 + h;
    const double up = probe_loss(head, feats, labels);
    x = x0 - h;
    const double down = probe_loss(head, feats, labels);
    x = x0;
    numeric[j] = (up - down) / (2 * h);
  }
  GradCheckResult r;
  r.name = "probe_cross_entropy";
  r.max_rel_err = relative_error(analytic, numeric, opts.zero_floor);
  r.passed = r.max_rel_err < opts.tolerance;
  if (!r.passed) r.detail = "head gradient rel-err " + std::to_string(r.max_rel_err);
  return r;
}

}  // namespace

TD broken_scale(const TD& x) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= 3.0;
  const bool rg = grad_recording_enabled() && x.requires_grad();
  TD y(x.shape(), std::move(out), rg);
  if (rg) {
    auto xn = x.node();
    auto yn = y.node();
    GradTape<double>::current().record("broken_scale", [xn, yn] {
      if (yn->grad.empty()) return;
      if (xn->grad.empty()) xn->grad.assign(xn->data.size(), 0.0);
      for (std::size_t i = 0; i < yn->grad.size(); ++i) xn->grad[i] += 2.0 * yn->grad[i];
    });
  }
  return y;
}

std::vector<std::string> differentiable_op_names() {
  return {"matmul", "softmax_lastdim", "layer_norm", "gelu", "gather_rows",
          "add", "sub", "mul", "scale", "sqrt", "add_bias", "transpose_last2",
          "reshape", "concat", "slice_lastdim", "sum", "mean", "embed_patches"};
}

std::vector<GradCheckCase> gradcheck_registry(bool include_broken) {
  std::vector<GradCheckCase> cases;
  cases.push_back(make_case(
      "matmul", 11,
      [](Rng& r) { return std::vector<TD>{randn({2, 3, 4}, r), randn({2, 4, 5}, r)}; },
      [](Inputs in) { return matmul(in[0], in[1]); }));
  cases.push_back(make_case(
      "softmax_lastdim", 12, [](Rng& r) { return std::vector<TD>{randn({3, 5}, r, 2.0)}; },
      [](Inputs in) { return softmax_lastdim(in[0]); }));
  cases.push_back(make_case(
      "layer_norm", 13,
      [](Rng& r) {
        return std::vector<TD>{randn({3, 6}, r), gaussian_init<double>({6}, r, 1.0, 0.2, true),
                               randn({6}, r, 0.2)};
      },
      [](Inputs in) { return layer_norm(in[0], in[1], in[2], 1e-6); }));
  cases.push_back(make_case(
      "gelu", 14,
      [](Rng& r) {
        auto x = randn({8}, r);
        const double fixed[4] = {-2.0, -0.5, 0.5, 2.0};
        for (int i = 0; i < 4; ++i) x.mutable_data()[static_cast<std::size_t>(i)] = fixed[i];
        return std::vector<TD>{x};
      },
      [](Inputs in) { return gelu(in[0]); }));
  cases.push_back(make_case(
      "gather_rows", 15, [](Rng& r) { return std::vector<TD>{randn({4, 3}, r)}; },
      [](Inputs in) {
        const std::int64_t idx[] = {2, 0, 0, 3};
        return gather_rows(in[0], idx);
      }));
  cases.push_back(make_case(
      "add", 16, [](Rng& r) { return std::vector<TD>{randn({3, 4}, r), randn({3, 4}, r)}; },
      [](Inputs in) { return add(in[0], in[1]); }));
  cases.push_back(make_case(
      "sub", 17, [](Rng& r) { return std::vector<TD>{randn({3, 4}, r), randn({3, 4}, r)}; },
      [](Inputs in) { return sub(in[0], in[1]); }));
  cases.push_back(make_case(
      "mul", 18, [](Rng& r) { return std::vector<TD>{randn({3, 4}, r), randn({3, 4}, r)}; },
      [](Inputs in) { return mul(in[0], in[1]); }));
  cases.push_back(make_case(
      "scale", 19, [](Rng& r) { return std::vector<TD>{randn({3, 4}, r)}; },
      [](Inputs in) { return scale(in[0], -1.7); }));
  cases.push_back(make_case(
      "sqrt", 20,
      [](Rng& r) { return std::vector<TD>{uniform_init<double>({3, 4}, r, 0.5, 2.0, true)}; },
      [](Inputs in) { return sqrt(in[0]); }));
  cases.push_back(make_case(
      "add_bias", 21, [](Rng& r) { return std::vector<TD>{randn({3, 4}, r), randn({4}, r)}; },
      [](Inputs in) { return add_bias(in[0], in[1]); }));
  cases.push_back(make_case(
      "transpose_last2", 22, [](Rng& r) { return std::vector<TD>{randn({2, 3, 4}, r)}; },
      [](Inputs in) { return transpose_last2(in[0]); }));
  cases.push_back(make_case(
      "reshape", 23, [](Rng& r) { return std::vector<TD>{randn({3, 4}, r)}; },
      [](Inputs in) { return reshape(in[0], Shape{2, 6}); }));
  cases.push_back(make_case(
      "concat", 24,
      [](Rng& r) { return std::vector<TD>{randn({2, 3}, r), randn({2, 2}, r)}; },
      [](Inputs in) { return concat<double>(in, 1); }));
  cases.push_back(make_case(
      "slice_lastdim", 25, [](Rng& r) { return std::vector<TD>{randn({3, 6}, r)}; },
      [](Inputs in) { return slice_lastdim(in[0], 2, 3); }));
  cases.push_back(make_case(
      "sum", 26, [](Rng& r) { return std::vector<TD>{randn({3, 4}, r)}; },
      [](Inputs in) { return reshape(sum(in[0]), Shape{1}); }));
  cases.push_back(make_case(
      "mean", 27, [](Rng& r) { return std::vector<TD>{randn({3, 4}, r)}; },
      [](Inputs in) { return reshape(mean(in[0]), Shape{1}); }));
  cases.push_back(make_case(
      "embed_patches", 28,
      [](Rng& r) {
        return std::vector<TD>{uniform_init<double>({4, 9}, r, 0.0, 1.0, true), randn({9, 6}, r),
                               randn({6}, r)};
      },
      [](Inputs in) { return embed_patches(in[0], in[1], in[2]); }));
  cases.push_back(make_case(
      "chain_matmul_softmax_layer_norm", 29,
      [](Rng& r) {
        return std::vector<TD>{randn({3, 4}, r), randn({4, 5}, r),
                               gaussian_init<double>({5}, r, 1.0, 0.2, true), randn({5}, r, 0.2)};
      },
      [](Inputs in) {
        return layer_norm(softmax_lastdim(matmul(in[0], in[1])), in[2], in[3], 1e-6);
      }));
  cases.push_back(make_case(
      "attention", 30,
      [](Rng& r) {
        return std::vector<TD>{randn({5, 8}, r), randn({5, 8}, r), randn({5, 8}, r)};
      },
      [](Inputs in) { return attention(in[0], in[1], in[2], 2); }));
  cases.push_back({"encoder_block", run_encoder_block});
  cases.push_back({"mae_end_to_end", run_full_mae});
  cases.push_back({"probe_cross_entropy", run_probe});
  if (include_broken) {
    cases.push_back(make_case(
        "broken_scale", 31, [](Rng& r) { return std::vector<TD>{randn({3}, r)}; },
        [](Inputs in) { return broken_scale(in[0]); }));
  }
  return cases;
}

}  // namespace hdmae
