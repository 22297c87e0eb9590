#pragma once

#include <algorithm>
#include <cmath>

#include "stlpd/tensor.hpp"

namespace stlpd {
namespace detail {

// C(M,N) += A(M,K) * B(K,N), row-major.
inline void matmul_acc(const float* a, const float* b, float* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const float* arow = a + size_t(i) * k;
    float* crow = c + size_t(i) * n;
    for (int p = 0; p < k; ++p) {
      const float av = arow[p];
      if (av == 0.0f) continue;
      const float* brow = b + size_t(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C(M,N) += A^T(K,M)^T... i.e. C += At' * B where At is stored (K,M).
inline void matmul_tn_acc(const float* at, const float* b, float* c, int m, int k, int n) {
  for (int p = 0; p < k; ++p) {
    const float* arow = at + size_t(p) * m;
    const float* brow = b + size_t(p) * n;
    for (int i = 0; i < m; ++i) {
      const float av = arow[i];
      if (av == 0.0f) continue;
      float* crow = c + size_t(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C(M,N) += A(M,K) * Bt(N,K)^T.
inline void matmul_nt_acc(const float* a, const float* bt, float* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const float* arow = a + size_t(i) * k;
    float* crow = c + size_t(i) * n;
    for (int j = 0; j < n; ++j) {
      const float* brow = bt + size_t(j) * k;
      float s = 0.0f;
      for (int p = 0; p < k; ++p) s += arow[p] * brow[p];
      crow[j] += s;
    }
  }
}

inline void im2col(const float* img, int c, int h, int w, int k, int stride, int pad, int ho,
                   int wo, float* col) {
  // col layout: (c*k*k, ho*wo)
  for (int ci = 0; ci < c; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        float* dst = col + size_t((ci * k + ky) * k + kx) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) {
            std::fill(dst + size_t(oy) * wo, dst + size_t(oy + 1) * wo, 0.0f);
            continue;
          }
          const float* src = img + size_t(ci * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + kx - pad;
            dst[size_t(oy) * wo + ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0f;
          }
        }
      }
    }
  }
}

inline void col2im_acc(const float* col, int c, int h, int w, int k, int stride, int pad, int ho,
                       int wo, float* img) {
  for (int ci = 0; ci < c; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const float* src = col + size_t((ci * k + ky) * k + kx) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          float* dst = img + size_t(ci * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + kx - pad;
            if (ix >= 0 && ix < w) dst[ix] += src[size_t(oy) * wo + ox];
          }
        }
      }
    }
  }
}

inline Tensor make_result(std::vector<int> shape, std::vector<std::shared_ptr<TensorNode>> parents,
                          std::function<void(TensorNode&)> backward_fn) {
  Tensor out = Tensor::zeros(std::move(shape));
  bool rg = false;
  for (auto& p : parents) rg = rg || p->requires_grad;
  auto n = out.node();
  n->requires_grad = rg;
  if (rg) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return out;
}

inline void require_rank4(const Tensor& t, const char* op) {
  if (t.rank() != 4)
    throw ShapeError(std::string(op) + ": expected NCHW tensor, got " + shape_str(t.shape()));
}

}  // namespace detail

// Cross-correlation, zero padding. k in {1,3}, stride in {1,2}.
inline Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
                     int pad) {
  detail::require_rank4(input, "conv2d");
  detail::require_rank4(weight, "conv2d");
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int oc = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != c || weight.dim(3) != k)
    throw ShapeError("conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
                     shape_str(input.shape()));
  if (k != 1 && k != 3) throw ShapeError("conv2d: kernel must be 1 or 3");
  if (stride != 1 && stride != 2) throw ShapeError("conv2d: stride must be 1 or 2");
  if (bias.numel() != oc)
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " vs out channels " +
                     std::to_string(oc));
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (w + 2 * pad - k) / stride + 1;
  if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: empty output for input " + shape_str(input.shape()));

  auto in_n = input.node(), w_n = weight.node(), b_n = bias.node();
  const int ckk = c * k * k, hw = ho * wo;
  Tensor out = detail::make_result(
      {n, oc, ho, wo}, {in_n, w_n, b_n},
      [=](TensorNode& self) {
        std::vector<float> col(size_t(ckk) * hw);
        std::vector<float> colg;
        for (int i = 0; i < n; ++i) {
          const float* go = self.grad.data() + size_t(i) * oc * hw;
          if (b_n->requires_grad) {
            float* gb = b_n->grad_buf();
            for (int o = 0; o < oc; ++o)
              for (int j = 0; j < hw; ++j) gb[o] += go[size_t(o) * hw + j];
          }
          if (w_n->requires_grad || in_n->requires_grad)
            detail::im2col(in_n->data.data() + size_t(i) * c * h * w, c, h, w, k, stride, pad, ho,
                           wo, col.data());
          if (w_n->requires_grad)
            detail::matmul_nt_acc(go, col.data(), w_n->grad_buf(), oc, hw, ckk);
          if (in_n->requires_grad) {
            colg.assign(size_t(ckk) * hw, 0.0f);
            detail::matmul_tn_acc(w_n->data.data(), go, colg.data(), ckk, oc, hw);
            detail::col2im_acc(colg.data(), c, h, w, k, stride, pad, ho, wo,
                               in_n->grad_buf() + size_t(i) * c * h * w);
          }
        }
      });

  std::vector<float> col(size_t(ckk) * hw);
  for (int i = 0; i < n; ++i) {
    detail::im2col(in_n->data.data() + size_t(i) * c * h * w, c, h, w, k, stride, pad, ho, wo,
                   col.data());
    float* dst = out.data().data() + size_t(i) * oc * hw;
    for (int o = 0; o < oc; ++o)
      std::fill(dst + size_t(o) * hw, dst + size_t(o + 1) * hw, b_n->data[size_t(o)]);
    detail::matmul_acc(w_n->data.data(), col.data(), dst, oc, ckk, hw);
  }
  check_finite(out, "conv2d");
  return out;
}

// Per-channel convolution (groups = channels); weight shape (C,1,k,k).
inline Tensor depthwise_conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
                               int stride, int pad) {
  detail::require_rank4(input, "depthwise_conv2d");
  detail::require_rank4(weight, "depthwise_conv2d");
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int k = weight.dim(2);
  if (weight.dim(0) != c || weight.dim(1) != 1 || weight.dim(3) != k)
    throw ShapeError("depthwise_conv2d: weight " + shape_str(weight.shape()) +
                     " incompatible with input " + shape_str(input.shape()));
  if (k != 1 && k != 3) throw ShapeError("depthwise_conv2d: kernel must be 1 or 3");
  if (stride != 1 && stride != 2) throw ShapeError("depthwise_conv2d: stride must be 1 or 2");
  if (bias.numel() != c) throw ShapeError("depthwise_conv2d: bias/channel mismatch");
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (w + 2 * pad - k) / stride + 1;

  auto in_n = input.node(), w_n = weight.node(), b_n = bias.node();
  Tensor out = detail::make_result(
      {n, c, ho, wo}, {in_n, w_n, b_n},
      [=](TensorNode& self) {
        for (int i = 0; i < n; ++i)
          for (int ci = 0; ci < c; ++ci) {
            const float* go = self.grad.data() + size_t((i * c + ci) * ho) * wo;
            const float* img = in_n->data.data() + size_t((i * c + ci) * h) * w;
            const float* ker = w_n->data.data() + size_t(ci) * k * k;
            float* gimg = in_n->requires_grad
                              ? in_n->grad_buf() + size_t((i * c + ci) * h) * w
                              : nullptr;
            float* gker = w_n->requires_grad ? w_n->grad_buf() + size_t(ci) * k * k : nullptr;
            float* gb = b_n->requires_grad ? b_n->grad_buf() : nullptr;
            for (int oy = 0; oy < ho; ++oy)
              for (int ox = 0; ox < wo; ++ox) {
                const float g = go[size_t(oy) * wo + ox];
                if (gb) gb[ci] += g;
                for (int ky = 0; ky < k; ++ky) {
                  const int iy = oy * stride + ky - pad;
                  if (iy < 0 || iy >= h) continue;
                  for (int kx = 0; kx < k; ++kx) {
                    const int ix = ox * stride + kx - pad;
                    if (ix < 0 || ix >= w) continue;
                    if (gker) gker[ky * k + kx] += g * img[size_t(iy) * w + ix];
                    if (gimg) gimg[size_t(iy) * w + ix] += g * ker[ky * k + kx];
                  }
                }
              }
          }
      });

  for (int i = 0; i < n; ++i)
    for (int ci = 0; ci < c; ++ci) {
      const float* img = in_n->data.data() + size_t((i * c + ci) * h) * w;
      const float* ker = w_n->data.data() + size_t(ci) * k * k;
      float* dst = out.data().data() + size_t((i * c + ci) * ho) * wo;
      const float bv = b_n->data[size_t(ci)];
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          float s = bv;
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ox * stride + kx - pad;
              if (ix >= 0 && ix < w) s += ker[ky * k + kx] * img[size_t(iy) * w + ix];
            }
          }
          dst[size_t(oy) * wo + ox] = s;
        }
    }
  check_finite(out, "depthwise_conv2d");
  return out;
}

// Per (sample, group) normalization, then per-channel affine.
inline Tensor group_norm(const Tensor& input, int groups, const Tensor& gamma, const Tensor& beta,
                         float eps = 1e-5f) {
  detail::require_rank4(input, "group_norm");
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (groups <= 0 || c % groups != 0)
    throw ShapeError("group_norm: channels " + std::to_string(c) + " not divisible by groups " +
                     std::to_string(groups));
  if (gamma.numel() != c || beta.numel() != c)
    throw ShapeError("group_norm: affine parameters must have C elements");
  const int cg = c / groups, hw = h * w;
  const int m = cg * hw;

  auto in_n = input.node(), g_n = gamma.node(), b_n = beta.node();
  Tensor out = detail::make_result(
      {n, c, h, w}, {in_n, g_n, b_n},
      [=](TensorNode& self) {
        for (int i = 0; i < n; ++i)
          for (int g = 0; g < groups; ++g) {
            const size_t base = size_t((i * c + g * cg) * hw);
            const float* x = in_n->data.data() + base;
            const float* gy = self.grad.data() + base;
            double mean = 0, var = 0;
            for (int j = 0; j < m; ++j) mean += x[j];
            mean /= m;
            for (int j = 0; j < m; ++j) var += (x[j] - mean) * (x[j] - mean);
            var /= m;
            const float istd = 1.0f / std::sqrt(float(var) + eps);
            // dxhat, reductions
            double sum_dxhat = 0, sum_dxhat_xhat = 0;
            for (int j = 0; j < m; ++j) {
              const int ch = g * cg + j / hw;
              const float xhat = (x[j] - float(mean)) * istd;
              const float dxhat = gy[j] * g_n->data[size_t(ch)];
              sum_dxhat += dxhat;
              sum_dxhat_xhat += double(dxhat) * xhat;
              if (g_n->requires_grad) g_n->grad_buf()[ch] += gy[j] * xhat;
              if (b_n->requires_grad) b_n->grad_buf()[ch] += gy[j];
            }
            if (in_n->requires_grad) {
              float* gx = in_n->grad_buf() + base;
              for (int j = 0; j < m; ++j) {
                const int ch = g * cg + j / hw;
                const float xhat = (x[j] - float(mean)) * istd;
                const float dxhat = gy[j] * g_n->data[size_t(ch)];
                gx[j] += istd * (dxhat - float(sum_dxhat) / m - xhat * float(sum_dxhat_xhat) / m);
              }
            }
          }
      });

  for (int i = 0; i < n; ++i)
    for (int g = 0; g < groups; ++g) {
      const size_t base = size_t((i * c + g * cg) * hw);
      const float* x = in_n->data.data() + base;
      float* y = out.data().data() + base;
      double mean = 0, var = 0;
      for (int j = 0; j < m; ++j) mean += x[j];
      mean /= m;
      for (int j = 0; j < m; ++j) var += (x[j] - mean) * (x[j] - mean);
      var /= m;
      const float istd = 1.0f / std::sqrt(float(var) + eps);
      for (int j = 0; j < m; ++j) {
        const int ch = g * cg + j / hw;
        y[j] = g_n->data[size_t(ch)] * (x[j] - float(mean)) * istd + b_n->data[size_t(ch)];
      }
    }
  check_finite(out, "group_norm");
  return out;
}

inline Tensor relu_leaky(const Tensor& input, float slope = 0.1f) {
  auto in_n = input.node();
  Tensor out = detail::make_result(
      input.shape(), {in_n},
      [=](TensorNode& self) {
        if (!in_n->requires_grad) return;
        float* gx = in_n->grad_buf();
        for (size_t j = 0; j < self.grad.size(); ++j)
          gx[j] += self.grad[j] * (in_n->data[j] > 0 ? 1.0f : slope);
      });
  for (size_t j = 0; j < input.data().size(); ++j) {
    const float v = input.data()[j];
    out.data()[j] = v > 0 ? v : slope * v;
  }
  check_finite(out, "relu_leaky");
  return out;
}

inline Tensor sigmoid(const Tensor& input) {
  auto in_n = input.node();
  Tensor out = detail::make_result(input.shape(), {in_n}, [=](TensorNode& self) {
    if (!in_n->requires_grad) return;
    float* gx = in_n->grad_buf();
    for (size_t j = 0; j < self.grad.size(); ++j) {
      const float s = 1.0f / (1.0f + std::exp(-in_n->data[j]));
      gx[j] += self.grad[j] * s * (1.0f - s);
    }
  });
  for (size_t j = 0; j < input.data().size(); ++j)
    out.data()[j] = 1.0f / (1.0f + std::exp(-input.data()[j]));
  check_finite(out, "sigmoid");
  return out;
}

// 2x2 max pooling, stride 2. Requires even spatial extents.
inline Tensor max_pool2(const Tensor& input) {
  detail::require_rank4(input, "max_pool2");
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h % 2 || w % 2) throw ShapeError("max_pool2: spatial extents must be even, got " +
                                       shape_str(input.shape()));
  const int ho = h / 2, wo = w / 2;
  auto in_n = input.node();
  auto argmax_of = [=](int i, int ci, int oy, int ox) {
    const float* img = in_n->data.data() + size_t((i * c + ci) * h) * w;
    int best = (2 * oy) * w + 2 * ox;
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const int idx = (2 * oy + dy) * w + (2 * ox + dx);
        if (img[idx] > img[best]) best = idx;
      }
    return best;
  };
  Tensor out = detail::make_result({n, c, ho, wo}, {in_n}, [=](TensorNode& self) {
    if (!in_n->requires_grad) return;
    for (int i = 0; i < n; ++i)
      for (int ci = 0; ci < c; ++ci) {
        float* gimg = in_n->grad_buf() + size_t((i * c + ci) * h) * w;
        const float* go = self.grad.data() + size_t((i * c + ci) * ho) * wo;
        for (int oy = 0; oy < ho; ++oy)
          for (int ox = 0; ox < wo; ++ox)
            gimg[argmax_of(i, ci, oy, ox)] += go[size_t(oy) * wo + ox];
      }
  });
  for (int i = 0; i < n; ++i)
    for (int ci = 0; ci < c; ++ci) {
      const float* img = in_n->data.data() + size_t((i * c + ci) * h) * w;
      float* dst = out.data().data() + size_t((i * c + ci) * ho) * wo;
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) dst[size_t(oy) * wo + ox] = img[argmax_of(i, ci, oy, ox)];
    }
  check_finite(out, "max_pool2");
  return out;
}

inline Tensor global_avg_pool(const Tensor& input) {
  detail::require_rank4(input, "global_avg_pool");
  const int n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  auto in_n = input.node();
  Tensor out = detail::make_result({n, c}, {in_n}, [=](TensorNode& self) {
    if (!in_n->requires_grad) return;
    float* gx = in_n->grad_buf();
    for (int i = 0; i < n * c; ++i) {
      const float g = self.grad[size_t(i)] / hw;
      for (int j = 0; j < hw; ++j) gx[size_t(i) * hw + j] += g;
    }
  });
  for (int i = 0; i < n * c; ++i) {
    double s = 0;
    for (int j = 0; j < hw; ++j) s += input.data()[size_t(i) * hw + j];
    out.data()[size_t(i)] = float(s / hw);
  }
  check_finite(out, "global_avg_pool");
  return out;
}

inline Tensor global_max_pool(const Tensor& input) {
  detail::require_rank4(input, "global_max_pool");
  const int n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  auto in_n = input.node();
  auto argmax_of = [=](int i) {
    const float* x = in_n->data.data() + size_t(i) * hw;
    int best = 0;
    for (int j = 1; j < hw; ++j)
      if (x[j] > x[best]) best = j;
    return best;
  };
  Tensor out = detail::make_result({n, c}, {in_n}, [=](TensorNode& self) {
    if (!in_n->requires_grad) return;
    float* gx = in_n->grad_buf();
    for (int i = 0; i < n * c; ++i) gx[size_t(i) * hw + argmax_of(i)] += self.grad[size_t(i)];
  });
  for (int i = 0; i < n * c; ++i)
    out.data()[size_t(i)] = input.data()[size_t(i) * hw + argmax_of(i)];
  check_finite(out, "global_max_pool");
  return out;
}

// Nearest-neighbor 2x upsampling; backward sums each 2x2 block.
inline Tensor upsample_nearest2(const Tensor& input) {
  detail::require_rank4(input, "upsample_nearest2");
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  auto in_n = input.node();
  Tensor out = detail::make_result({n, c, 2 * h, 2 * w}, {in_n}, [=](TensorNode& self) {
    if (!in_n->requires_grad) return;
    float* gx = in_n->grad_buf();
    for (int i = 0; i < n * c; ++i) {
      const float* go = self.grad.data() + size_t(i) * 4 * h * w;
      float* gi = gx + size_t(i) * h * w;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          gi[size_t(y) * w + x] += go[size_t(2 * y) * 2 * w + 2 * x] +
                                   go[size_t(2 * y) * 2 * w + 2 * x + 1] +
                                   go[size_t(2 * y + 1) * 2 * w + 2 * x] +
                                   go[size_t(2 * y + 1) * 2 * w + 2 * x + 1];
    }
  });
  for (int i = 0; i < n * c; ++i) {
    const float* src = input.data().data() + size_t(i) * h * w;
    float* dst = out.data().data() + size_t(i) * 4 * h * w;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const float v = src[size_t(y) * w + x];
        dst[size_t(2 * y) * 2 * w + 2 * x] = v;
        dst[size_t(2 * y) * 2 * w + 2 * x + 1] = v;
        dst[size_t(2 * y + 1) * 2 * w + 2 * x] = v;
        dst[size_t(2 * y + 1) * 2 * w + 2 * x + 1] = v;
      }
  }
  check_finite(out, "upsample_nearest2");
  return out;
}

// y = x W^T + b for x (N, in), W (out, in), b (out).
inline Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  if (input.rank() != 2 || weight.rank() != 2)
    throw ShapeError("linear: expected rank-2 input/weight, got " + shape_str(input.shape()) +
                     " and " + shape_str(weight.shape()));
  const int n = input.dim(0), in = input.dim(1), outd = weight.dim(0);
  if (weight.dim(1) != in)
    throw ShapeError("linear: weight " + shape_str(weight.shape()) + " vs input " +
                     shape_str(input.shape()));
  if (bias.numel() != outd) throw ShapeError("linear: bias/out mismatch");
  auto in_n = input.node(), w_n = weight.node(), b_n = bias.node();
  Tensor out = detail::make_result({n, outd}, {in_n, w_n, b_n}, [=](TensorNode& self) {
    if (b_n->requires_grad) {
      float* gb = b_n->grad_buf();
      for (int i = 0; i < n; ++i)
        for (int o = 0; o < outd; ++o) gb[o] += self.grad[size_t(i) * outd + o];
    }
    if (w_n->requires_grad)
      detail::matmul_tn_acc(self.grad.data(), in_n->data.data(), w_n->grad_buf(), outd, n, in);
    if (in_n->requires_grad)
      detail::matmul_acc(self.grad.data(), w_n->data.data(), in_n->grad_buf(), n, outd, in);
  });
  for (int i = 0; i < n; ++i)
    for (int o = 0; o < outd; ++o) out.data()[size_t(i) * outd + o] = b_n->data[size_t(o)];
  detail::matmul_nt_acc(in_n->data.data(), w_n->data.data(), out.data().data(), n, in, outd);
  check_finite(out, "linear");
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  auto a_n = a.node(), b_n = b.node();
  Tensor out = detail::make_result(a.shape(), {a_n, b_n}, [=](TensorNode& self) {
    for (auto& pn : {a_n, b_n}) {
      if (!pn->requires_grad) continue;
      float* g = pn->grad_buf();
      for (size_t j = 0; j < self.grad.size(); ++j) g[j] += self.grad[j];
    }
  });
  for (size_t j = 0; j < a.data().size(); ++j) out.data()[j] = a.data()[j] + b.data()[j];
  check_finite(out, "add");
  return out;
}

// x (N,C,H,W) scaled by a channel gate (N,C) or a spatial gate (N,1,H,W).
inline Tensor mul_broadcast(const Tensor& x, const Tensor& gate) {
  detail::require_rank4(x, "mul_broadcast");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int hw = h * w;
  const bool channel_gate =
      (gate.rank() == 2 && gate.dim(0) == n && gate.dim(1) == c) ||
      (gate.rank() == 4 && gate.dim(0) == n && gate.dim(1) == c && gate.dim(2) == 1 &&
       gate.dim(3) == 1);
  const bool spatial_gate = gate.rank() == 4 && gate.dim(0) == n && gate.dim(1) == 1 &&
                            gate.dim(2) == h && gate.dim(3) == w;
  if (!channel_gate && !spatial_gate)
    throw ShapeError("mul_broadcast: gate " + shape_str(gate.shape()) +
                     " is neither a channel nor a spatial gate for " + shape_str(x.shape()));
  auto x_n = x.node(), g_n = gate.node();
  Tensor out = detail::make_result(x.shape(), {x_n, g_n}, [=](TensorNode& self) {
    for (int i = 0; i < n; ++i)
      for (int ci = 0; ci < c; ++ci) {
        const size_t base = size_t((i * c + ci) * hw);
        for (int j = 0; j < hw; ++j) {
          const size_t gi = channel_gate ? size_t(i * c + ci) : size_t(i) * hw + j;
          const float go = self.grad[base + j];
          if (x_n->requires_grad) x_n->grad_buf()[base + j] += go * g_n->data[gi];
          if (g_n->requires_grad) g_n->grad_buf()[gi] += go * x_n->data[base + j];
        }
      }
  });
  for (int i = 0; i < n; ++i)
    for (int ci = 0; ci < c; ++ci) {
      const size_t base = size_t((i * c + ci) * hw);
      for (int j = 0; j < hw; ++j) {
        const size_t gi = channel_gate ? size_t(i * c + ci) : size_t(i) * hw + j;
        out.data()[base + j] = x.data()[base + j] * gate.data()[gi];
      }
    }
  check_finite(out, "mul_broadcast");
  return out;
}

inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  detail::require_rank4(a, "concat_channels");
  detail::require_rank4(b, "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    throw ShapeError("concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  auto a_n = a.node(), b_n = b.node();
  Tensor out = detail::make_result({n, ca + cb, a.dim(2), a.dim(3)}, {a_n, b_n},
                                   [=](TensorNode& self) {
                                     for (int i = 0; i < n; ++i) {
                                       const float* g = self.grad.data() + size_t(i) * (ca + cb) * hw;
                                       if (a_n->requires_grad) {
                                         float* ga = a_n->grad_buf() + size_t(i) * ca * hw;
                                         for (int j = 0; j < ca * hw; ++j) ga[j] += g[j];
                                       }
                                       if (b_n->requires_grad) {
                                         float* gb = b_n->grad_buf() + size_t(i) * cb * hw;
                                         for (int j = 0; j < cb * hw; ++j) gb[j] += g[size_t(ca) * hw + j];
                                       }
                                     }
                                   });
  for (int i = 0; i < n; ++i) {
    float* dst = out.data().data() + size_t(i) * (ca + cb) * hw;
    std::copy_n(a.data().data() + size_t(i) * ca * hw, size_t(ca) * hw, dst);
    std::copy_n(b.data().data() + size_t(i) * cb * hw, size_t(cb) * hw, dst + size_t(ca) * hw);
  }
  check_finite(out, "concat_channels");
  return out;
}

// Mean over channels -> (N,1,H,W). Feeds the spatial attention gate.
inline Tensor channel_mean(const Tensor& input) {
  detail::require_rank4(input, "channel_mean");
  const int n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  auto in_n = input.node();
  Tensor out = detail::make_result({n, 1, input.dim(2), input.dim(3)}, {in_n},
                                   [=](TensorNode& self) {
                                     if (!in_n->requires_grad) return;
                                     float* gx = in_n->grad_buf();
                                     for (int i = 0; i < n; ++i)
                                       for (int ci = 0; ci < c; ++ci)
                                         for (int j = 0; j < hw; ++j)
                                           gx[size_t((i * c + ci) * hw + j)] +=
                                               self.grad[size_t(i * hw + j)] / c;
                                   });
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < hw; ++j) {
      double s = 0;
      for (int ci = 0; ci < c; ++ci) s += input.data()[size_t((i * c + ci) * hw + j)];
      out.data()[size_t(i * hw + j)] = float(s / c);
    }
  check_finite(out, "channel_mean");
  return out;
}

// Max over channels -> (N,1,H,W).
inline Tensor channel_max(const Tensor& input) {
  detail::require_rank4(input, "channel_max");
  const int n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  auto in_n = input.node();
  auto argmax_of = [=](int i, int j) {
    int best = 0;
    for (int ci = 1; ci < c; ++ci)
      if (in_n->data[size_t((i * c + ci) * hw + j)] > in_n->data[size_t((i * c + best) * hw + j)])
        best = ci;
    return best;
  };
  Tensor out = detail::make_result({n, 1, input.dim(2), input.dim(3)}, {in_n},
                                   [=](TensorNode& self) {
                                     if (!in_n->requires_grad) return;
                                     float* gx = in_n->grad_buf();
                                     for (int i = 0; i < n; ++i)
                                       for (int j = 0; j < hw; ++j)
                                         gx[size_t((i * c + argmax_of(i, j)) * hw + j)] +=
                                             self.grad[size_t(i * hw + j)];
                                   });
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < hw; ++j)
      out.data()[size_t(i * hw + j)] = input.data()[size_t((i * c + argmax_of(i, j)) * hw + j)];
  check_finite(out, "channel_max");
  return out;
}

// Scalar reduction, mostly for the gradient harness.
inline Tensor sum_all(const Tensor& input) {
  auto in_n = input.node();
  Tensor out = detail::make_result({1}, {in_n}, [=](TensorNode& self) {
    if (!in_n->requires_grad) return;
    float* gx = in_n->grad_buf();
    for (size_t j = 0; j < in_n->data.size(); ++j) gx[j] += self.grad[0];
  });
  double s = 0;
  for (float v : input.data()) s += v;
  out.data()[0] = float(s);
  check_finite(out, "sum_all");
  return out;
}

}  // namespace stlpd
