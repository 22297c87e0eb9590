#pragma once

#include <cstdint>
#include <vector>

#include "stlpd/geom.hpp"

namespace stlpd {

struct AnchorInfo {
  BoxCWH box;
  int level;   // pyramid level index: 0,1,2 for strides 8,16,32
  int cell_y;
  int cell_x;
  int index;   // anchor index within the cell
};

// Dense anchor grid over the pyramid. Flat layout is level-major, row-major,
// anchor-index-minor, matching the (A*, H, W) flattening of the head maps
// where the per-anchor channel block is the fastest-varying "index".
struct AnchorSet {
  std::vector<AnchorInfo> anchors;
  std::vector<int> strides;
  std::vector<int> level_sizes;   // H (=W) per level
  int anchors_per_cell = 0;

  int count() const { return int(anchors.size()); }

  // (level, cell_y, cell_x, index) -> flat position
  int flat_index(int level, int cy, int cx, int idx) const {
    int base = 0;
    for (int l = 0; l < level; ++l)
      base += anchors_per_cell * level_sizes[size_t(l)] * level_sizes[size_t(l)];
    const int hw = level_sizes[size_t(level)];
    return base + (cy * hw + cx) * anchors_per_cell + idx;
  }
};

inline AnchorSet generate_anchors(int input_size, const std::vector<int>& strides = {8, 16, 32},
                                  const std::vector<float>& scales = {3.0f, 4.5f},
                                  float aspect = 2.5f) {
  AnchorSet out;
  out.strides = strides;
  out.anchors_per_cell = int(scales.size());
  const float root = std::sqrt(aspect);
  for (size_t l = 0; l < strides.size(); ++l) {
    const int s = strides[l];
    if (input_size % s != 0)
      throw std::invalid_argument("generate_anchors: input size " + std::to_string(input_size) +
                                  " not divisible by stride " + std::to_string(s));
    const int hw = input_size / s;
    out.level_sizes.push_back(hw);
    for (int cy = 0; cy < hw; ++cy)
      for (int cx = 0; cx < hw; ++cx)
        for (size_t k = 0; k < scales.size(); ++k) {
          AnchorInfo a;
          a.box = {float(s) * (cx + 0.5f), float(s) * (cy + 0.5f), scales[k] * s * root,
                   scales[k] * s / root};
          a.level = int(l);
          a.cell_y = cy;
          a.cell_x = cx;
          a.index = int(k);
          out.anchors.push_back(a);
        }
  }
  return out;
}

enum class AnchorLabel : uint8_t { negative = 0, positive = 1, ignore = 2 };

struct Assignment {
  std::vector<AnchorLabel> labels;
  std::vector<BoxOffsets> box_targets;    // valid where not negative
  std::vector<QuadOffsets> quad_targets;  // valid where not negative
  int positives = 0;
};

// IoU >= 0.5 positive, < 0.4 negative, between ignored; the single best
// anchor is forced positive so every image trains (ties: lowest flat index).
inline Assignment assign(const AnchorSet& anchors, const BoxXYXY& gt_box, const Quad& gt_quad,
                         float pos_thresh = 0.5f, float neg_thresh = 0.4f) {
  require_valid(gt_box, "assign");
  const int n = anchors.count();
  Assignment out;
  out.labels.assign(size_t(n), AnchorLabel::negative);
  out.box_targets.resize(size_t(n));
  out.quad_targets.resize(size_t(n));
  int best = 0;
  float best_iou = -1.0f;
  const BoxCWH gt_cwh = to_cwh(gt_box);
  for (int i = 0; i < n; ++i) {
    const float v = iou(to_xyxy(anchors.anchors[size_t(i)].box), gt_box);
    if (v > best_iou) {
      best_iou = v;
      best = i;
    }
    if (v >= pos_thresh)
      out.labels[size_t(i)] = AnchorLabel::positive;
    else if (v >= neg_thresh)
      out.labels[size_t(i)] = AnchorLabel::ignore;
  }
  out.labels[size_t(best)] = AnchorLabel::positive;
  // Regression targets exist for ignores too: the shared heads also learn to
  // decode correctly from near-threshold anchors, which keeps top-1 boxes
  // honest when such an anchor outscores the positives at inference.
  for (int i = 0; i < n; ++i) {
    if (out.labels[size_t(i)] == AnchorLabel::negative) continue;
    const BoxCWH& a = anchors.anchors[size_t(i)].box;
    out.box_targets[size_t(i)] = encode_box(gt_cwh, a);
    out.quad_targets[size_t(i)] = encode_quad(gt_quad, a);
    if (out.labels[size_t(i)] == AnchorLabel::positive) ++out.positives;
  }
  return out;
}

}  // namespace stlpd
