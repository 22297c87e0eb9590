#pragma once

#include <cmath>
#include <vector>

#include "stlpd/anchors.hpp"
#include "stlpd/geom.hpp"
#include "stlpd/net.hpp"

namespace stlpd {

struct LossBreakdown {
  float cls = 0, box = 0, corner = 0, total = 0;
};

struct LossWeights {
  float cls = 1.0f, box = 2.0f, corner = 1.0f;
};

namespace detail {

constexpr float kFocalEps = 1e-7f;
// Offsets are clamped before exp() so a wild box head cannot overflow.
constexpr float kMaxLogSize = 8.0f;

inline float focal_term(float logit, bool positive, float alpha, float gamma) {
  const float p = std::clamp(1.0f / (1.0f + std::exp(-logit)), kFocalEps, 1.0f - kFocalEps);
  if (positive) return -alpha * std::pow(1.0f - p, gamma) * std::log(p);
  return -(1.0f - alpha) * std::pow(p, gamma) * std::log(1.0f - p);
}

inline float focal_term_dlogit(float logit, bool positive, float alpha, float gamma) {
  const float p = std::clamp(1.0f / (1.0f + std::exp(-logit)), kFocalEps, 1.0f - kFocalEps);
  if (positive)
    return alpha * (gamma * std::pow(1.0f - p, gamma) * p * std::log(p) -
                    std::pow(1.0f - p, gamma + 1.0f));
  return (1.0f - alpha) * (std::pow(p, gamma + 1.0f) -
                           gamma * std::pow(p, gamma) * (1.0f - p) * std::log(1.0f - p));
}

inline float smooth_l1_term(float x, float beta) {
  const float ax = std::fabs(x);
  return ax < beta ? 0.5f * x * x / beta : ax - 0.5f * beta;
}

inline float smooth_l1_dx(float x, float beta) {
  return std::fabs(x) < beta ? x / beta : (x > 0 ? 1.0f : -1.0f);
}

}  // namespace detail

// Mean focal loss over non-ignored anchors, normalized by max(1, #positives).
inline float focal_loss(const std::vector<float>& logits, const std::vector<AnchorLabel>& labels,
                        float alpha = 0.25f, float gamma = 2.0f) {
  if (logits.size() != labels.size()) throw ShapeError("focal_loss: logits/labels length mismatch");
  double sum = 0;
  int positives = 0, contributing = 0;
  for (size_t i = 0; i < logits.size(); ++i) {
    if (labels[i] == AnchorLabel::ignore) continue;
    const bool pos = labels[i] == AnchorLabel::positive;
    sum += detail::focal_term(logits[i], pos, alpha, gamma);
    positives += pos ? 1 : 0;
    ++contributing;
  }
  if (contributing == 0) throw std::invalid_argument("focal_loss: every anchor is ignored");
  return float(sum / std::max(1, positives));
}

inline float smooth_l1(const std::vector<float>& pred, const std::vector<float>& target,
                       float beta = 1.0f) {
  if (pred.size() != target.size()) throw ShapeError("smooth_l1: length mismatch");
  double sum = 0;
  for (size_t i = 0; i < pred.size(); ++i) sum += detail::smooth_l1_term(pred[i] - target[i], beta);
  return pred.empty() ? 0.0f : float(sum / double(pred.size()));
}

// Multi-task objective over one batch. Writes d(total)/d(map) into the grad
// buffers of every head tensor; values are averaged across the batch.
// Box term: CIoU on boxes decoded against their anchors, gradient chained
// through the decoding. Corner term: smooth-L1 on offsets. Cls term: focal.
// Regression covers every non-negative anchor (ignores included) while the
// cls term skips ignores; normalization stays #positives for both.
inline LossBreakdown total_loss(PyramidMaps& maps, const std::vector<Assignment>& assigns,
                                const AnchorSet& anchors, const LossWeights& weights = {},
                                float alpha = 0.25f, float gamma = 2.0f) {
  const int batch = maps.score[0].dim(0);
  if (int(assigns.size()) != batch)
    throw ShapeError("total_loss: batch " + std::to_string(batch) + " vs assignments " +
                     std::to_string(assigns.size()));
  const int a_per_cell = anchors.anchors_per_cell;
  for (int l = 0; l < 3; ++l) {
    const int hw = anchors.level_sizes[size_t(l)];
    if (maps.score[size_t(l)].dim(1) != a_per_cell || maps.score[size_t(l)].dim(2) != hw ||
        maps.box[size_t(l)].dim(1) != 4 * a_per_cell ||
        maps.corner[size_t(l)].dim(1) != 8 * a_per_cell)
      throw ShapeError("total_loss: head maps inconsistent with anchor layout at level " +
                       std::to_string(l));
  }

  std::array<float*, 3> gscore, gbox, gcorner;
  for (int l = 0; l < 3; ++l) {
    gscore[size_t(l)] = maps.score[size_t(l)].node()->grad_buf();
    gbox[size_t(l)] = maps.box[size_t(l)].node()->grad_buf();
    gcorner[size_t(l)] = maps.corner[size_t(l)].node()->grad_buf();
  }
  auto elem = [&](const Tensor& t, int n, int c, int cy, int cx) {
    return size_t(((n * t.dim(1) + c) * t.dim(2) + cy) * t.dim(3) + cx);
  };

  LossBreakdown out;
  for (int n = 0; n < batch; ++n) {
    const Assignment& as = assigns[size_t(n)];
    if (int(as.labels.size()) != anchors.count())
      throw ShapeError("total_loss: assignment size vs anchor count");
    const int npos = std::max(1, as.positives);
    double cls = 0, boxl = 0, corner = 0;
    int contributing = 0;
    for (int j = 0; j < anchors.count(); ++j) {
      const AnchorInfo& an = anchors.anchors[size_t(j)];
      const int l = an.level, cy = an.cell_y, cx = an.cell_x, k = an.index;
      const AnchorLabel lab = as.labels[size_t(j)];
      Tensor& sm = maps.score[size_t(l)];
      if (lab != AnchorLabel::ignore) {
        const size_t si = elem(sm, n, k, cy, cx);
        const float logit = sm.data()[si];
        const bool pos = lab == AnchorLabel::positive;
        cls += detail::focal_term(logit, pos, alpha, gamma);
        gscore[size_t(l)][si] += weights.cls / float(npos * batch) *
                                 detail::focal_term_dlogit(logit, pos, alpha, gamma);
        ++contributing;
      }
      if (lab == AnchorLabel::negative) continue;

      // box: decode -> CIoU against the decoded target
      Tensor& bm = maps.box[size_t(l)];
      std::array<size_t, 4> bi;
      std::array<float, 4> off;
      for (int c = 0; c < 4; ++c) {
        bi[size_t(c)] = elem(bm, n, k * 4 + c, cy, cx);
        off[size_t(c)] = bm.data()[bi[size_t(c)]];
      }
      const float tw = std::clamp(off[2], -detail::kMaxLogSize, detail::kMaxLogSize);
      const float th = std::clamp(off[3], -detail::kMaxLogSize, detail::kMaxLogSize);
      const BoxCWH& av = an.box;
      const std::array<float, 4> pred{av.cx + off[0] * av.w, av.cy + off[1] * av.h,
                                      av.w * std::exp(tw), av.h * std::exp(th)};
      const BoxOffsets& bt = as.box_targets[size_t(j)];
      const std::array<float, 4> gt{av.cx + bt.tx * av.w, av.cy + bt.ty * av.h,
                                    av.w * std::exp(bt.tw), av.h * std::exp(bt.th)};
      const auto ciou = ciou_loss_core<float>(pred, gt);
      boxl += ciou.value;
      const float bscale = weights.box / float(npos * batch);
      gbox[size_t(l)][bi[0]] += bscale * ciou.grad[0] * av.w;
      gbox[size_t(l)][bi[1]] += bscale * ciou.grad[1] * av.h;
      // Clamped offsets still receive the gradient component that pulls them
      // back inside the range; the outward component is dropped. A hard gate
      // would freeze any offset that ever escapes past the clamp.
      const float gw = bscale * ciou.grad[2] * pred[2];
      const float gh = bscale * ciou.grad[3] * pred[3];
      if (off[2] == tw || (off[2] > tw && gw > 0) || (off[2] < tw && gw < 0))
        gbox[size_t(l)][bi[2]] += gw;
      if (off[3] == th || (off[3] > th && gh > 0) || (off[3] < th && gh < 0))
        gbox[size_t(l)][bi[3]] += gh;

      // corners: smooth-L1 on offsets, mean over 8 coordinates per positive
      Tensor& cm = maps.corner[size_t(l)];
      const QuadOffsets& qt = as.quad_targets[size_t(j)];
      for (int c = 0; c < 8; ++c) {
        const size_t ci = elem(cm, n, k * 8 + c, cy, cx);
        const float x = cm.data()[ci] - qt.v[size_t(c)];
        corner += detail::smooth_l1_term(x, 1.0f) / 8.0;
        gcorner[size_t(l)][ci] +=
            weights.corner / float(8 * npos * batch) * detail::smooth_l1_dx(x, 1.0f);
      }
    }
    if (contributing == 0) throw std::invalid_argument("total_loss: every anchor is ignored");
    out.cls += float(cls) / float(npos * batch);
    out.box += float(boxl) / float(npos * batch);
    out.corner += float(corner) / float(npos * batch);
  }
  out.total = weights.cls * out.cls + weights.box * out.box + weights.corner * out.corner;
  if (!std::isfinite(out.total)) throw NumericFault("total_loss: non-finite loss");
  return out;
}

}  // namespace stlpd
