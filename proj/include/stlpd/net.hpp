#pragma once

#include <array>
#include <string>
#include <vector>

#include "stlpd/ops.hpp"
#include "stlpd/optim.hpp"
#include "stlpd/rng.hpp"

namespace stlpd {

enum class Backbone { residual, lightweight };

inline const char* backbone_name(Backbone b) {
  return b == Backbone::residual ? "residual" : "lightweight";
}

struct NetConfig {
  Backbone backbone = Backbone::residual;
  bool attention = true;
  std::array<int, 4> stage_channels{8, 16, 32, 64};
  int fpn_dim = 32;
  int anchors_per_cell = 2;
  int input_size = 64;

  void validate() const {
    std::string bad;
    if (input_size <= 0 || input_size % 32 != 0) bad += " input_size(must be a positive multiple of 32)";
    if (fpn_dim <= 0 || fpn_dim % 4 != 0) bad += " fpn_dim(must be positive, divisible by 4)";
    if (anchors_per_cell < 1) bad += " anchors_per_cell(must be >= 1)";
    for (int c : stage_channels)
      if (c <= 0 || c % 4 != 0) {
        bad += " stage_channels(each must be positive, divisible by 4)";
        break;
      }
    if (!bad.empty()) throw std::invalid_argument("invalid NetConfig:" + bad);
  }
};

// Per-level head outputs; levels 0/1/2 carry strides 8/16/32.
struct PyramidMaps {
  std::array<Tensor, 3> score;   // (N,  A, H, W)
  std::array<Tensor, 3> box;     // (N, 4A, H, W)
  std::array<Tensor, 3> corner;  // (N, 8A, H, W)
};

struct Model {
  NetConfig config;
  ParamMap params;

  Tensor& p(const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw std::runtime_error("unknown parameter: " + name);
    return it->second.tensor;
  }
  const Tensor& p(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw std::runtime_error("unknown parameter: " + name);
    return it->second.tensor;
  }
};

namespace detail {

inline void add_param(Model& m, const std::string& name, std::vector<int> shape,
                      std::vector<float> data) {
  Param p;
  p.tensor = Tensor::from_data(std::move(shape), std::move(data), /*requires_grad=*/true);
  p.momentum.assign(p.tensor.data().size(), 0.0f);
  m.params.emplace(name, std::move(p));
}

// He fan-in initialization from the model's seeded generator; init_std >= 0
// overrides (0 for the zero-initialized attention layers, 0.01 for heads).
inline void add_conv(Model& m, Rng& rng, const std::string& name, int oc, int ic, int k,
                     float bias_init = 0.0f, float init_std = -1.0f) {
  std::vector<float> w(size_t(oc) * ic * k * k);
  const float std = init_std >= 0.0f ? init_std : std::sqrt(2.0f / float(ic * k * k));
  for (auto& v : w) v = std == 0.0f ? 0.0f : std * rng.normal();
  add_param(m, name + ".w", {oc, ic, k, k}, std::move(w));
  add_param(m, name + ".b", {oc}, std::vector<float>(size_t(oc), bias_init));
}

inline void add_dwconv(Model& m, Rng& rng, const std::string& name, int c, int k) {
  std::vector<float> w(size_t(c) * k * k);
  const float std = std::sqrt(2.0f / float(k * k));
  for (auto& v : w) v = std * rng.normal();
  add_param(m, name + ".w", {c, 1, k, k}, std::move(w));
  add_param(m, name + ".b", {c}, std::vector<float>(size_t(c), 0.0f));
}

inline void add_linear(Model& m, Rng& rng, const std::string& name, int out, int in,
                       bool zero_weights = false) {
  std::vector<float> w(size_t(out) * in);
  const float std = zero_weights ? 0.0f : std::sqrt(2.0f / float(in));
  for (auto& v : w) v = std == 0.0f ? 0.0f : std * rng.normal();
  add_param(m, name + ".w", {out, in}, std::move(w));
  add_param(m, name + ".b", {out}, std::vector<float>(size_t(out), 0.0f));
}

inline void add_gn(Model& m, const std::string& name, int c) {
  add_param(m, name + ".gamma", {c}, std::vector<float>(size_t(c), 1.0f));
  add_param(m, name + ".beta", {c}, std::vector<float>(size_t(c), 0.0f));
}

constexpr int kGroups = 4;
constexpr int kAttnReduction = 4;

inline Tensor conv_gn_act(const Model& m, const std::string& name, const Tensor& x, int stride) {
  Tensor y = conv2d(x, m.p(name + ".w"), m.p(name + ".b"), stride, 1);
  y = group_norm(y, kGroups, m.p(name + ".gn.gamma"), m.p(name + ".gn.beta"));
  return relu_leaky(y);
}

inline Tensor stage(const Model& m, const std::string& name, const Tensor& x, int out_ch) {
  if (m.config.backbone == Backbone::residual) {
    Tensor d = conv_gn_act(m, name + ".down", x, 2);
    Tensor r = conv_gn_act(m, name + ".r1", d, 1);
    r = conv2d(r, m.p(name + ".r2.w"), m.p(name + ".r2.b"), 1, 1);
    r = group_norm(r, kGroups, m.p(name + ".r2.gn.gamma"), m.p(name + ".r2.gn.beta"));
    return relu_leaky(add(d, r));
  }
  // lightweight: strided depthwise then pointwise
  Tensor y = depthwise_conv2d(x, m.p(name + ".dw.w"), m.p(name + ".dw.b"), 2, 1);
  y = group_norm(y, kGroups, m.p(name + ".dw.gn.gamma"), m.p(name + ".dw.gn.beta"));
  y = relu_leaky(y);
  y = conv2d(y, m.p(name + ".pw.w"), m.p(name + ".pw.b"), 1, 0);
  y = group_norm(y, kGroups, m.p(name + ".pw.gn.gamma"), m.p(name + ".pw.gn.beta"));
  (void)out_ch;
  return relu_leaky(y);
}

}  // namespace detail

// Channel gate: sigmoid(MLP(gap(x)) + MLP(gmp(x))), shared C -> C/r -> C MLP.
inline Tensor channel_attention_gate(const Tensor& x, const Tensor& w1, const Tensor& b1,
                                     const Tensor& w2, const Tensor& b2) {
  if (x.dim(1) % detail::kAttnReduction != 0)
    throw ShapeError("channel_attention: channels not divisible by reduction");
  Tensor a = linear(relu_leaky(linear(global_avg_pool(x), w1, b1)), w2, b2);
  Tensor m = linear(relu_leaky(linear(global_max_pool(x), w1, b1)), w2, b2);
  return sigmoid(add(a, m));  // (N, C)
}

// Spatial gate: sigmoid(conv3x3(concat(channel-mean, channel-max))).
inline Tensor spatial_attention_gate(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor maps = concat_channels(channel_mean(x), channel_max(x));
  return sigmoid(conv2d(maps, w, b, 1, 1));  // (N, 1, H, W)
}

// CBAM-style block: channel gate first, then spatial gate.
inline Tensor cbam(const Model& m, const std::string& name, const Tensor& x) {
  Tensor cg = channel_attention_gate(x, m.p(name + ".mlp1.w"), m.p(name + ".mlp1.b"),
                                     m.p(name + ".mlp2.w"), m.p(name + ".mlp2.b"));
  Tensor y = mul_broadcast(x, cg);
  Tensor sg = spatial_attention_gate(y, m.p(name + ".spatial.w"), m.p(name + ".spatial.b"));
  return mul_broadcast(y, sg);
}

inline Model build(const NetConfig& config, uint64_t seed) {
  config.validate();
  Model m;
  m.config = config;
  Rng rng(hash_combine(seed, 0x6e657477ull));
  const auto& ch = config.stage_channels;
  const int d = config.fpn_dim, a = config.anchors_per_cell;

  detail::add_conv(m, rng, "backbone.stem", ch[0], 3, 3);
  detail::add_gn(m, "backbone.stem.gn", ch[0]);
  const std::array<std::pair<int, int>, 4> io{
      {{ch[0], ch[1]}, {ch[1], ch[2]}, {ch[2], ch[3]}, {ch[3], ch[3]}}};
  for (int s = 0; s < 4; ++s) {
    const std::string name = "backbone.s" + std::to_string(s + 2);
    const auto [in, out] = io[size_t(s)];
    if (config.backbone == Backbone::residual) {
      detail::add_conv(m, rng, name + ".down", out, in, 3);
      detail::add_gn(m, name + ".down.gn", out);
      detail::add_conv(m, rng, name + ".r1", out, out, 3);
      detail::add_gn(m, name + ".r1.gn", out);
      detail::add_conv(m, rng, name + ".r2", out, out, 3);
      detail::add_gn(m, name + ".r2.gn", out);
    } else {
      detail::add_dwconv(m, rng, name + ".dw", in, 3);
      detail::add_gn(m, name + ".dw.gn", in);
      detail::add_conv(m, rng, name + ".pw", out, in, 1);
      detail::add_gn(m, name + ".pw.gn", out);
    }
  }
  if (config.attention) {
    const std::array<int, 3> cc{ch[2], ch[3], ch[3]};
    for (int l = 0; l < 3; ++l) {
      const std::string name = "attn.l" + std::to_string(l + 3);
      const int c = cc[size_t(l)];
      // Zero-initialized so both gates start at exactly 0.5.
      detail::add_linear(m, rng, name + ".mlp1", c / detail::kAttnReduction, c, true);
      detail::add_linear(m, rng, name + ".mlp2", c, c / detail::kAttnReduction, true);
      detail::add_conv(m, rng, name + ".spatial", 1, 2, 3, 0.0f, 0.0f);
    }
  }
  const std::array<int, 3> cc{ch[2], ch[3], ch[3]};
  for (int l = 0; l < 3; ++l) {
    const std::string ls = std::to_string(l + 3);
    detail::add_conv(m, rng, "fpn.lat" + ls, d, cc[size_t(l)], 1);
    detail::add_conv(m, rng, "fpn.smooth" + ls, d, d, 3);
  }
  // Focal prior: fresh-model scores sit near pi = 0.01.
  const float pi = 0.01f;
  const float score_bias = -std::log((1.0f - pi) / pi);
  detail::add_conv(m, rng, "head.score", a, d, 3, score_bias, 0.001f);
  detail::add_conv(m, rng, "head.box", 4 * a, d, 3, 0.0f, 0.01f);
  detail::add_conv(m, rng, "head.corner", 8 * a, d, 3, 0.0f, 0.01f);
  return m;
}

inline PyramidMaps forward(const Model& m, const Tensor& images) {
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != m.config.input_size ||
      images.dim(3) != m.config.input_size)
    throw ShapeError("forward: expected (N,3," + std::to_string(m.config.input_size) + "," +
                     std::to_string(m.config.input_size) + "), got " + shape_str(images.shape()));

  Tensor stem = conv2d(images, m.p("backbone.stem.w"), m.p("backbone.stem.b"), 2, 1);
  stem = group_norm(stem, detail::kGroups, m.p("backbone.stem.gn.gamma"),
                    m.p("backbone.stem.gn.beta"));
  stem = relu_leaky(stem);
  Tensor s2 = detail::stage(m, "backbone.s2", stem, m.config.stage_channels[1]);
  Tensor c3 = detail::stage(m, "backbone.s3", s2, m.config.stage_channels[2]);
  Tensor c4 = detail::stage(m, "backbone.s4", c3, m.config.stage_channels[3]);
  Tensor c5 = detail::stage(m, "backbone.s5", c4, m.config.stage_channels[3]);

  std::array<Tensor, 3> feats{c3, c4, c5};
  if (m.config.attention)
    for (int l = 0; l < 3; ++l)
      feats[size_t(l)] = cbam(m, "attn.l" + std::to_string(l + 3), feats[size_t(l)]);

  std::array<Tensor, 3> lat;
  for (int l = 0; l < 3; ++l) {
    const std::string ls = std::to_string(l + 3);
    lat[size_t(l)] = conv2d(feats[size_t(l)], m.p("fpn.lat" + ls + ".w"),
                            m.p("fpn.lat" + ls + ".b"), 1, 0);
  }
  std::array<Tensor, 3> pyr;
  pyr[2] = lat[2];
  pyr[1] = add(lat[1], upsample_nearest2(pyr[2]));
  pyr[0] = add(lat[0], upsample_nearest2(pyr[1]));
  for (int l = 0; l < 3; ++l) {
    const std::string ls = std::to_string(l + 3);
    pyr[size_t(l)] = relu_leaky(conv2d(pyr[size_t(l)], m.p("fpn.smooth" + ls + ".w"),
                                       m.p("fpn.smooth" + ls + ".b"), 1, 1));
  }

  PyramidMaps out;
  for (int l = 0; l < 3; ++l) {
    out.score[size_t(l)] = conv2d(pyr[size_t(l)], m.p("head.score.w"), m.p("head.score.b"), 1, 1);
    out.box[size_t(l)] = conv2d(pyr[size_t(l)], m.p("head.box.w"), m.p("head.box.b"), 1, 1);
    out.corner[size_t(l)] =
        conv2d(pyr[size_t(l)], m.p("head.corner.w"), m.p("head.corner.b"), 1, 1);
  }
  return out;
}

}  // namespace stlpd
