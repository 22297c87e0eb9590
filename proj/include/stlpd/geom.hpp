#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <string>

namespace stlpd {

// Axis-aligned box, corner form. Invariant: x1 < x2, y1 < y2, all finite.
struct BoxXYXY {
  float x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

// Axis-aligned box, center/size form. Invariant: w > 0, h > 0.
struct BoxCWH {
  float cx = 0, cy = 0, w = 0, h = 0;
};

// Four plate corners in canonical order: TL, TR, BR, BL.
struct Quad {
  std::array<std::array<float, 2>, 4> p{};
};

// Anchor-relative box offsets: tx=(gx-ax)/aw, ty=(gy-ay)/ah, tw=ln(gw/aw), th=ln(gh/ah).
struct BoxOffsets {
  float tx = 0, ty = 0, tw = 0, th = 0;
};

// Per-corner offsets, (corner - anchor center)/anchor size, x then y for each corner.
struct QuadOffsets {
  std::array<float, 8> v{};
};

inline bool box_valid(const BoxXYXY& b) {
  return std::isfinite(b.x1) && std::isfinite(b.y1) && std::isfinite(b.x2) &&
         std::isfinite(b.y2) && b.x1 < b.x2 && b.y1 < b.y2;
}

inline bool box_valid(const BoxCWH& b) {
  return std::isfinite(b.cx) && std::isfinite(b.cy) && std::isfinite(b.w) &&
         std::isfinite(b.h) && b.w > 0 && b.h > 0;
}

inline void require_valid(const BoxXYXY& b, const char* who) {
  if (!box_valid(b)) throw std::invalid_argument(std::string(who) + ": degenerate box");
}

inline void require_valid(const BoxCWH& b, const char* who) {
  if (!box_valid(b)) throw std::invalid_argument(std::string(who) + ": degenerate box");
}

inline BoxCWH to_cwh(const BoxXYXY& b) {
  return {(b.x1 + b.x2) * 0.5f, (b.y1 + b.y2) * 0.5f, b.x2 - b.x1, b.y2 - b.y1};
}

inline BoxXYXY to_xyxy(const BoxCWH& b) {
  return {b.cx - b.w * 0.5f, b.cy - b.h * 0.5f, b.cx + b.w * 0.5f, b.cy + b.h * 0.5f};
}

template <class Real>
inline Real iou_core(Real ax1, Real ay1, Real ax2, Real ay2, Real bx1, Real by1, Real bx2,
                     Real by2) {
  Real iw = std::min(ax2, bx2) - std::max(ax1, bx1);
  Real ih = std::min(ay2, by2) - std::max(ay1, by1);
  if (iw <= 0 || ih <= 0) return Real(0);
  Real inter = iw * ih;
  Real uni = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
  return inter / uni;
}

inline float iou(const BoxXYXY& a, const BoxXYXY& b) {
  require_valid(a, "iou");
  require_valid(b, "iou");
  return iou_core<float>(a.x1, a.y1, a.x2, a.y2, b.x1, b.y1, b.x2, b.y2);
}

template <class Real>
struct LossGrad {
  Real value = 0;
  std::array<Real, 4> grad{};  // d value / d pred in (cx, cy, w, h)
};

// CIoU loss with analytic gradient w.r.t. pred in center/size form:
//   L = 1 - IoU + rho^2/c^2 + alpha * v
// rho^2: squared center distance; c^2: squared diagonal of the enclosing box;
// v: aspect-ratio consistency term; alpha = v/((1-IoU)+v), held constant in
// the backward pass. eps guards only the alpha denominator and c^2.
template <class Real>
inline LossGrad<Real> ciou_loss_core(const std::array<Real, 4>& p, const std::array<Real, 4>& g) {
  const Real eps = Real(1e-9);
  const Real px1 = p[0] - p[2] / 2, px2 = p[0] + p[2] / 2;
  const Real py1 = p[1] - p[3] / 2, py2 = p[1] + p[3] / 2;
  const Real gx1 = g[0] - g[2] / 2, gx2 = g[0] + g[2] / 2;
  const Real gy1 = g[1] - g[3] / 2, gy2 = g[1] + g[3] / 2;

  // IoU and its partials w.r.t. pred corners, chained to (cx,cy,w,h).
  const Real iw = std::min(px2, gx2) - std::max(px1, gx1);
  const Real ih = std::min(py2, gy2) - std::max(py1, gy1);
  // areas from corner differences, so pred == gt gives IoU exactly 1
  const Real pwc = px2 - px1, phc = py2 - py1;
  const Real ap = pwc * phc, ag = (gx2 - gx1) * (gy2 - gy1);
  Real inter = 0, iou_v = 0;
  Real di_dcx = 0, di_dcy = 0, di_dw = 0, di_dh = 0;
  if (iw > 0 && ih > 0) {
    inter = iw * ih;
    const Real uni = ap + ag - inter;
    iou_v = inter / uni;
    const Real sx2 = (px2 < gx2) ? Real(1) : Real(0);
    const Real sx1 = (px1 > gx1) ? Real(1) : Real(0);
    const Real sy2 = (py2 < gy2) ? Real(1) : Real(0);
    const Real sy1 = (py1 > gy1) ? Real(1) : Real(0);
    const Real diw_dcx = sx2 - sx1, diw_dw = (sx2 + sx1) / 2;
    const Real dih_dcy = sy2 - sy1, dih_dh = (sy2 + sy1) / 2;
    const Real dinter_dcx = diw_dcx * ih, dinter_dcy = dih_dcy * iw;
    const Real dinter_dw = diw_dw * ih, dinter_dh = dih_dh * iw;
    const Real dap_dw = phc, dap_dh = pwc;
    const Real u2 = uni * uni;
    di_dcx = (dinter_dcx * uni - inter * (-dinter_dcx)) / u2;
    di_dcy = (dinter_dcy * uni - inter * (-dinter_dcy)) / u2;
    di_dw = (dinter_dw * uni - inter * (dap_dw - dinter_dw)) / u2;
    di_dh = (dinter_dh * uni - inter * (dap_dh - dinter_dh)) / u2;
  }

  // Enclosing-box diagonal.
  const Real cw = std::max(px2, gx2) - std::min(px1, gx1);
  const Real ch = std::max(py2, gy2) - std::min(py1, gy1);
  const Real c2 = cw * cw + ch * ch + eps;
  const Real ex2 = (px2 > gx2) ? Real(1) : Real(0);
  const Real ex1 = (px1 < gx1) ? Real(1) : Real(0);
  const Real ey2 = (py2 > gy2) ? Real(1) : Real(0);
  const Real ey1 = (py1 < gy1) ? Real(1) : Real(0);
  const Real dcw_dcx = ex2 - ex1, dcw_dw = (ex2 + ex1) / 2;
  const Real dch_dcy = ey2 - ey1, dch_dh = (ey2 + ey1) / 2;
  const Real dc2_dcx = 2 * cw * dcw_dcx, dc2_dw = 2 * cw * dcw_dw;
  const Real dc2_dcy = 2 * ch * dch_dcy, dc2_dh = 2 * ch * dch_dh;

  // Center distance.
  const Real dx = p[0] - g[0], dy = p[1] - g[1];
  const Real rho2 = dx * dx + dy * dy;

  // Aspect term.
  const Real kpi = Real(4) / (Real(M_PI) * Real(M_PI));
  const Real delta = std::atan(g[2] / g[3]) - std::atan(p[2] / p[3]);
  const Real v = kpi * delta * delta;
  const Real denom = p[2] * p[2] + p[3] * p[3];
  const Real dv_dw = 2 * kpi * delta * (-p[3] / denom);
  const Real dv_dh = 2 * kpi * delta * (p[2] / denom);
  const Real alpha = v / ((Real(1) - iou_v) + v + eps);

  LossGrad<Real> out;
  out.value = Real(1) - iou_v + rho2 / c2 + alpha * v;
  const Real c4 = c2 * c2;
  out.grad[0] = -di_dcx + (2 * dx * c2 - rho2 * dc2_dcx) / c4;
  out.grad[1] = -di_dcy + (2 * dy * c2 - rho2 * dc2_dcy) / c4;
  out.grad[2] = -di_dw + (-rho2 * dc2_dw) / c4 + alpha * dv_dw;
  out.grad[3] = -di_dh + (-rho2 * dc2_dh) / c4 + alpha * dv_dh;
  return out;
}

// CIoU value with the aspect coefficient pinned to a given alpha. The
// gradient above holds alpha constant, so finite-difference checks must
// evaluate this form; alpha < 0 recomputes it from the pair.
template <class Real>
inline Real ciou_value_frozen_alpha(const std::array<Real, 4>& p, const std::array<Real, 4>& g,
                                    Real alpha) {
  const Real eps = Real(1e-9);
  const Real px1 = p[0] - p[2] / 2, px2 = p[0] + p[2] / 2;
  const Real py1 = p[1] - p[3] / 2, py2 = p[1] + p[3] / 2;
  const Real gx1 = g[0] - g[2] / 2, gx2 = g[0] + g[2] / 2;
  const Real gy1 = g[1] - g[3] / 2, gy2 = g[1] + g[3] / 2;
  const Real iw = std::min(px2, gx2) - std::max(px1, gx1);
  const Real ih = std::min(py2, gy2) - std::max(py1, gy1);
  Real iou_v = 0;
  if (iw > 0 && ih > 0) {
    const Real inter = iw * ih;
    iou_v = inter / ((px2 - px1) * (py2 - py1) + (gx2 - gx1) * (gy2 - gy1) - inter);
  }
  const Real cw = std::max(px2, gx2) - std::min(px1, gx1);
  const Real ch = std::max(py2, gy2) - std::min(py1, gy1);
  const Real c2 = cw * cw + ch * ch + eps;
  const Real dx = p[0] - g[0], dy = p[1] - g[1];
  const Real kpi = Real(4) / (Real(M_PI) * Real(M_PI));
  const Real delta = std::atan(g[2] / g[3]) - std::atan(p[2] / p[3]);
  const Real v = kpi * delta * delta;
  if (alpha < 0) alpha = v / ((Real(1) - iou_v) + v + eps);
  return Real(1) - iou_v + (dx * dx + dy * dy) / c2 + alpha * v;
}

// Plain 1 - IoU with gradient. Kept to demonstrate the dead-gradient
// pathology of disjoint boxes; never used as a training loss.
template <class Real>
inline LossGrad<Real> iou_loss_core(const std::array<Real, 4>& p, const std::array<Real, 4>& g) {
  const Real px1 = p[0] - p[2] / 2, px2 = p[0] + p[2] / 2;
  const Real py1 = p[1] - p[3] / 2, py2 = p[1] + p[3] / 2;
  const Real gx1 = g[0] - g[2] / 2, gx2 = g[0] + g[2] / 2;
  const Real gy1 = g[1] - g[3] / 2, gy2 = g[1] + g[3] / 2;
  const Real iw = std::min(px2, gx2) - std::max(px1, gx1);
  const Real ih = std::min(py2, gy2) - std::max(py1, gy1);
  LossGrad<Real> out;
  if (iw <= 0 || ih <= 0) {
    out.value = Real(1);
    return out;
  }
  const Real inter = iw * ih;
  const Real pwc = px2 - px1, phc = py2 - py1;
  const Real uni = pwc * phc + (gx2 - gx1) * (gy2 - gy1) - inter;
  out.value = Real(1) - inter / uni;
  const Real sx2 = (px2 < gx2) ? Real(1) : Real(0);
  const Real sx1 = (px1 > gx1) ? Real(1) : Real(0);
  const Real sy2 = (py2 < gy2) ? Real(1) : Real(0);
  const Real sy1 = (py1 > gy1) ? Real(1) : Real(0);
  const Real u2 = uni * uni;
  const Real dinter_dcx = (sx2 - sx1) * ih, dinter_dcy = (sy2 - sy1) * iw;
  const Real dinter_dw = (sx2 + sx1) / 2 * ih, dinter_dh = (sy2 + sy1) / 2 * iw;
  out.grad[0] = -(dinter_dcx * uni + inter * dinter_dcx) / u2;
  out.grad[1] = -(dinter_dcy * uni + inter * dinter_dcy) / u2;
  out.grad[2] = -(dinter_dw * uni - inter * (phc - dinter_dw)) / u2;
  out.grad[3] = -(dinter_dh * uni - inter * (pwc - dinter_dh)) / u2;
  return out;
}

inline std::array<float, 4> cwh_array(const BoxCWH& b) { return {b.cx, b.cy, b.w, b.h}; }

struct CiouResult {
  float value = 0;
  std::array<float, 4> grad{};  // w.r.t. pred (cx, cy, w, h)
};

inline CiouResult ciou_loss(const BoxXYXY& pred, const BoxXYXY& gt) {
  require_valid(pred, "ciou_loss");
  require_valid(gt, "ciou_loss");
  auto r = ciou_loss_core<float>(cwh_array(to_cwh(pred)), cwh_array(to_cwh(gt)));
  return {r.value, r.grad};
}

inline CiouResult iou_loss(const BoxXYXY& pred, const BoxXYXY& gt) {
  require_valid(pred, "iou_loss");
  require_valid(gt, "iou_loss");
  auto r = iou_loss_core<float>(cwh_array(to_cwh(pred)), cwh_array(to_cwh(gt)));
  return {r.value, r.grad};
}

inline BoxOffsets encode_box(const BoxCWH& gt, const BoxCWH& anchor) {
  require_valid(gt, "encode_box");
  require_valid(anchor, "encode_box");
  return {(gt.cx - anchor.cx) / anchor.w, (gt.cy - anchor.cy) / anchor.h,
          std::log(gt.w / anchor.w), std::log(gt.h / anchor.h)};
}

inline BoxCWH decode_box(const BoxOffsets& off, const BoxCWH& anchor) {
  require_valid(anchor, "decode_box");
  return {anchor.cx + off.tx * anchor.w, anchor.cy + off.ty * anchor.h,
          anchor.w * std::exp(off.tw), anchor.h * std::exp(off.th)};
}

inline QuadOffsets encode_quad(const Quad& q, const BoxCWH& anchor) {
  require_valid(anchor, "encode_quad");
  QuadOffsets out;
  for (int i = 0; i < 4; ++i) {
    out.v[2 * i] = (q.p[i][0] - anchor.cx) / anchor.w;
    out.v[2 * i + 1] = (q.p[i][1] - anchor.cy) / anchor.h;
  }
  return out;
}

inline Quad decode_quad(const QuadOffsets& off, const BoxCWH& anchor) {
  require_valid(anchor, "decode_quad");
  Quad out;
  for (int i = 0; i < 4; ++i) {
    out.p[i][0] = anchor.cx + off.v[2 * i] * anchor.w;
    out.p[i][1] = anchor.cy + off.v[2 * i + 1] * anchor.h;
  }
  return out;
}

inline BoxXYXY quad_to_aabb(const Quad& q) {
  float x1 = q.p[0][0], y1 = q.p[0][1], x2 = x1, y2 = y1;
  for (int i = 1; i < 4; ++i) {
    x1 = std::min(x1, q.p[i][0]);
    y1 = std::min(y1, q.p[i][1]);
    x2 = std::max(x2, q.p[i][0]);
    y2 = std::max(y2, q.p[i][1]);
  }
  BoxXYXY b{x1, y1, x2, y2};
  require_valid(b, "quad_to_aabb");
  return b;
}

inline BoxXYXY clamp_box(const BoxXYXY& b, float width, float height) {
  require_valid(b, "clamp_box");
  BoxXYXY out{std::clamp(b.x1, 0.0f, width), std::clamp(b.y1, 0.0f, height),
              std::clamp(b.x2, 0.0f, width), std::clamp(b.y2, 0.0f, height)};
  if (!box_valid(out))
    throw std::invalid_argument("clamp_box: box collapses outside the image");
  return out;
}

// Canonical corner order: p1 is the point minimizing x+y, then the remaining
// points follow the polygon winding so the result reads TL, TR, BR, BL.
inline Quad canonicalize_quad(const Quad& q) {
  // Sort by angle about the centroid (clockwise in image coordinates, y down),
  // then rotate so the first point minimizes x+y.
  float cx = 0, cy = 0;
  for (auto& pt : q.p) {
    cx += pt[0] * 0.25f;
    cy += pt[1] * 0.25f;
  }
  std::array<std::array<float, 2>, 4> pts = q.p;
  std::sort(pts.begin(), pts.end(), [&](const auto& a, const auto& b) {
    return std::atan2(a[1] - cy, a[0] - cx) < std::atan2(b[1] - cy, b[0] - cx);
  });
  int start = 0;
  float best = pts[0][0] + pts[0][1];
  for (int i = 1; i < 4; ++i) {
    float s = pts[i][0] + pts[i][1];
    if (s < best) {
      best = s;
      start = i;
    }
  }
  Quad out;
  for (int i = 0; i < 4; ++i) out.p[i] = pts[(start + i) % 4];
  return out;
}

}  // namespace stlpd
