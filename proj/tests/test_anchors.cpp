#include <catch2/catch_amalgamated.hpp>

#include "stlpd/anchors.hpp"
#include "stlpd/rng.hpp"

using namespace stlpd;

TEST_CASE("anchor counts and layout") {
  const AnchorSet a64 = generate_anchors(64);
  CHECK(a64.count() == 168);  // 2*(64+16+4)
  CHECK(generate_anchors(32).count() == 42);
  CHECK(generate_anchors(128).count() == 672);

  // first anchor at stride 8 sits at (4, 4)
  CHECK(a64.anchors[0].box.cx == 4.0f);
  CHECK(a64.anchors[0].box.cy == 4.0f);
  CHECK(a64.anchors[0].level == 0);

  // every center is stride*(cell+0.5)
  for (const auto& an : a64.anchors) {
    const float s = float(a64.strides[size_t(an.level)]);
    CHECK(an.box.cx == s * (float(an.cell_x) + 0.5f));
    CHECK(an.box.cy == s * (float(an.cell_y) + 0.5f));
  }

  CHECK_THROWS_AS(generate_anchors(60), std::invalid_argument);
}

TEST_CASE("anchor flat index round-trips map coordinates") {
  const AnchorSet a = generate_anchors(64);
  for (int j = 0; j < a.count(); ++j) {
    const AnchorInfo& an = a.anchors[size_t(j)];
    CHECK(a.flat_index(an.level, an.cell_y, an.cell_x, an.index) == j);
  }
}

TEST_CASE("assignment: exact anchor match") {
  const AnchorSet a = generate_anchors(64);
  const BoxCWH target = a.anchors[37].box;
  Quad q;
  const BoxXYXY gt = to_xyxy(target);
  q.p = {{{gt.x1, gt.y1}, {gt.x2, gt.y1}, {gt.x2, gt.y2}, {gt.x1, gt.y2}}};
  const Assignment as = assign(a, gt, q);
  CHECK(as.labels[37] == AnchorLabel::positive);
  CHECK(as.box_targets[37].tx == 0.0f);
  CHECK(as.box_targets[37].ty == 0.0f);
  CHECK(as.box_targets[37].tw == 0.0f);
  CHECK(as.box_targets[37].th == 0.0f);
  CHECK(as.positives >= 1);
}

TEST_CASE("assignment: low-overlap gt still gets the forced best anchor") {
  const AnchorSet a = generate_anchors(64);
  // a tiny box overlaps nothing at >= 0.4
  const BoxXYXY gt{30, 30, 34, 33};
  Quad q;
  q.p = {{{30, 30}, {34, 30}, {34, 33}, {30, 33}}};
  float max_iou = 0;
  for (const auto& an : a.anchors) max_iou = std::max(max_iou, iou(to_xyxy(an.box), gt));
  REQUIRE(max_iou < 0.4f);
  const Assignment as = assign(a, gt, q);
  CHECK(as.positives == 1);
  for (size_t i = 0; i < as.labels.size(); ++i)
    if (as.labels[i] == AnchorLabel::positive)
      CHECK(iou(to_xyxy(a.anchors[i].box), gt) == max_iou);
}

TEST_CASE("assignment matches brute-force reference on random ground truths") {
  const AnchorSet a = generate_anchors(64);
  Rng rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    const float w = rng.uniform(6, 50), h = rng.uniform(4, 40);
    const float cx = rng.uniform(w / 2 + 1, 63 - w / 2), cy = rng.uniform(h / 2 + 1, 63 - h / 2);
    const BoxXYXY gt{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
    Quad q;
    q.p = {{{gt.x1, gt.y1}, {gt.x2, gt.y1}, {gt.x2, gt.y2}, {gt.x1, gt.y2}}};
    const Assignment as = assign(a, gt, q);

    // brute-force reference: score each anchor independently
    std::vector<float> ious(size_t(a.count()));
    int best = 0;
    for (int i = 0; i < a.count(); ++i) {
      ious[size_t(i)] = iou(to_xyxy(a.anchors[size_t(i)].box), gt);
      if (ious[size_t(i)] > ious[size_t(best)]) best = i;
    }
    int positives = 0;
    for (int i = 0; i < a.count(); ++i) {
      AnchorLabel want;
      if (i == best || ious[size_t(i)] >= 0.5f)
        want = AnchorLabel::positive;
      else if (ious[size_t(i)] >= 0.4f)
        want = AnchorLabel::ignore;
      else
        want = AnchorLabel::negative;
      positives += want == AnchorLabel::positive ? 1 : 0;
      REQUIRE(as.labels[size_t(i)] == want);
    }
    CHECK(as.positives == positives);
    CHECK(as.positives >= 1);
  }
}
