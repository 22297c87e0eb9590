#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "stlpd/net.hpp"

using namespace stlpd;

namespace {

Tensor random_image(uint64_t seed, int size, int batch = 1) {
  Rng rng(seed);
  Tensor t = Tensor::zeros({batch, 3, size, size});
  for (auto& v : t.data()) v = rng.uniform();
  return t;
}

size_t total_param_count(const Model& m) {
  size_t n = 0;
  for (const auto& [name, p] : m.params) n += p.tensor.data().size();
  return n;
}

float sigmoidf(float x) { return 1.0f / (1.0f + std::exp(-x)); }

}  // namespace

TEST_CASE("build is deterministic in the seed") {
  Model a = build(NetConfig{}, 7);
  Model b = build(NetConfig{}, 7);
  Model c = build(NetConfig{}, 8);
  REQUIRE(a.params.size() == b.params.size());
  for (const auto& [name, p] : a.params) {
    REQUIRE(p.tensor.data() == b.p(name).data());
  }
  bool any_diff = false;
  for (const auto& [name, p] : c.params)
    if (p.tensor.data() != a.p(name).data()) any_diff = true;
  REQUIRE(any_diff);
}

TEST_CASE("default configuration parameter count is pinned") {
  // Hand-computed from the layer list: stem 240, stages 5904 + 23328 + 92736
  // + 111168, attention 4865, fpn 32960, heads 7514.
  Model m = build(NetConfig{}, 1);
  REQUIRE(total_param_count(m) == 278715u);
}

TEST_CASE("fresh model scores sit at the focal prior") {
  for (auto backbone : {Backbone::residual, Backbone::lightweight}) {
    NetConfig cfg;
    cfg.backbone = backbone;
    Model m = build(cfg, 11);
    Tensor img = random_image(21, cfg.input_size);
    PyramidMaps maps = forward(m, img);
    for (int l = 0; l < 3; ++l)
      for (float v : maps.score[size_t(l)].data()) {
        const float p = sigmoidf(v);
        REQUIRE(p == Catch::Approx(0.01).margin(0.002));
      }
  }
}

TEST_CASE("head map shapes follow the input size") {
  for (int size : {32, 64, 128}) {
    NetConfig cfg;
    cfg.input_size = size;
    Model m = build(cfg, 3);
    Tensor img = random_image(100 + uint64_t(size), size, 2);
    PyramidMaps maps = forward(m, img);
    const int a = cfg.anchors_per_cell;
    int cells = 0;
    for (int l = 0; l < 3; ++l) {
      const int stride = 8 << l;
      const int hw = size / stride;
      REQUIRE(maps.score[size_t(l)].shape() == std::vector<int>{2, a, hw, hw});
      REQUIRE(maps.box[size_t(l)].shape() == std::vector<int>{2, 4 * a, hw, hw});
      REQUIRE(maps.corner[size_t(l)].shape() == std::vector<int>{2, 8 * a, hw, hw});
      cells += hw * hw;
    }
    if (size == 64) REQUIRE(cells * a == 168);
  }
}

TEST_CASE("zero-initialized attention gates pass exactly a quarter of the signal") {
  Model m = build(NetConfig{}, 5);
  Rng rng(404);
  Tensor x = Tensor::zeros({1, m.config.stage_channels[2], 8, 8});
  for (auto& v : x.data()) v = rng.normal();
  Tensor y = cbam(m, "attn.l3", x);
  REQUIRE(y.shape() == x.shape());
  for (size_t i = 0; i < x.data().size(); ++i)
    REQUIRE(y.data()[i] == Catch::Approx(0.25 * x.data()[i]).margin(1e-6));
}

TEST_CASE("attention gates only attenuate") {
  Model m = build(NetConfig{}, 5);
  Rng rng(405);
  // Randomize the gate parameters so the gates are no longer exactly 0.5.
  for (auto& [name, p] : m.params)
    if (name.rfind("attn.", 0) == 0)
      for (auto& v : p.tensor.data()) v = 0.5f * rng.normal();
  Tensor x = Tensor::zeros({2, m.config.stage_channels[2], 8, 8});
  for (auto& v : x.data()) v = rng.normal();
  Tensor y = cbam(m, "attn.l3", x);
  for (size_t i = 0; i < x.data().size(); ++i)
    REQUIRE(std::fabs(y.data()[i]) <= std::fabs(x.data()[i]) + 1e-7f);
}

TEST_CASE("attention on and off share the non-attention parameters") {
  NetConfig on, off;
  off.attention = false;
  Model ma = build(on, 9);
  Model mb = build(off, 9);
  for (const auto& [name, p] : mb.params) REQUIRE(p.tensor.data() == ma.p(name).data());
}

TEST_CASE("every parameter receives gradient") {
  for (auto backbone : {Backbone::residual, Backbone::lightweight}) {
    NetConfig cfg;
    cfg.backbone = backbone;
    cfg.input_size = 32;
    Model m = build(cfg, 13);
    // Perturb all parameters so zero-initialized layers do not block flow.
    Rng rng(77);
    for (auto& [name, p] : m.params)
      for (auto& v : p.tensor.data()) v += 0.05f * rng.normal();
    Tensor img = random_image(14, 32);
    PyramidMaps maps = forward(m, img);
    Tensor total = sum_all(maps.score[0]);
    for (int l = 0; l < 3; ++l) {
      if (l > 0) total = add(total, sum_all(maps.score[size_t(l)]));
      total = add(total, sum_all(maps.box[size_t(l)]));
      total = add(total, sum_all(maps.corner[size_t(l)]));
    }
    backward(total);
    for (auto& [name, p] : m.params) {
      auto& g = p.tensor.grad();
      INFO(backbone_name(backbone) << " " << name);
      REQUIRE_FALSE(g.empty());
      bool any = false;
      for (float v : g)
        if (v != 0.0f) any = true;
      REQUIRE(any);
    }
  }
}

TEST_CASE("batch items are processed independently") {
  Model m = build(NetConfig{}, 17);
  Tensor one = random_image(31, 64);
  Tensor two = Tensor::zeros({2, 3, 64, 64});
  for (int i = 0; i < 2; ++i)
    for (size_t j = 0; j < one.data().size(); ++j)
      two.data()[size_t(i) * one.data().size() + j] = one.data()[j];
  PyramidMaps maps = forward(m, two);
  for (int l = 0; l < 3; ++l) {
    for (const Tensor* t : {&maps.score[size_t(l)], &maps.box[size_t(l)],
                            &maps.corner[size_t(l)]}) {
      const size_t half = t->data().size() / 2;
      for (size_t j = 0; j < half; ++j)
        REQUIRE(t->data()[j] == Catch::Approx(t->data()[half + j]).margin(1e-5));
    }
  }
}

TEST_CASE("invalid configurations are rejected with named fields") {
  NetConfig cfg;
  cfg.input_size = 48;
  REQUIRE_THROWS_WITH(build(cfg, 1), Catch::Matchers::ContainsSubstring("input_size"));
  cfg = NetConfig{};
  cfg.fpn_dim = 30;
  REQUIRE_THROWS_WITH(build(cfg, 1), Catch::Matchers::ContainsSubstring("fpn_dim"));
  cfg = NetConfig{};
  cfg.anchors_per_cell = 0;
  REQUIRE_THROWS_WITH(build(cfg, 1), Catch::Matchers::ContainsSubstring("anchors_per_cell"));
  cfg = NetConfig{};
  cfg.stage_channels = {8, 16, 30, 64};
  REQUIRE_THROWS_WITH(build(cfg, 1), Catch::Matchers::ContainsSubstring("stage_channels"));
}

TEST_CASE("forward rejects wrongly shaped input") {
  Model m = build(NetConfig{}, 2);
  REQUIRE_THROWS_AS(forward(m, Tensor::zeros({1, 3, 32, 32})), ShapeError);
  REQUIRE_THROWS_AS(forward(m, Tensor::zeros({1, 1, 64, 64})), ShapeError);
  REQUIRE_THROWS_AS(forward(m, Tensor::zeros({3, 64, 64})), ShapeError);
}
