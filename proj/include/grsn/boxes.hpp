#pragma once

#include <algorithm>
#include <tuple>
#include <vector>

namespace grsn {

// Axis-aligned boxes in pixel coordinates, [x_min, y_min, x_max, y_max].

struct Box {
  float x_min = 0.f, y_min = 0.f, x_max = 0.f, y_max = 0.f;

  float width() const { return x_max - x_min; }
  float height() const { return y_max - y_min; }
  float area() const { return std::max(0.f, width()) * std::max(0.f, height()); }
  float center_x() const { return 0.5f * (x_min + x_max); }
  float center_y() const { return 0.5f * (y_min + y_max); }
};

inline float iou(const Box& a, const Box& b) {
  const float ix = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const float iy = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (ix <= 0.f || iy <= 0.f) return 0.f;
  const float inter = ix * iy;
  const float uni = a.area() + b.area() - inter;
  if (uni <= 0.f) return 0.f;
  return inter / uni;
}

struct Detection {
  Box box;
  int class_id = 0;
  float score = 0.f;
  int scale_id = 0;
};

// Deterministic ordering: score (desc), then class, then coordinates.
inline bool detection_order(const Detection& a, const Detection& b) {
  return std::tie(b.score, a.class_id, a.box.x_min, a.box.y_min, a.box.x_max, a.box.y_max) <
         std::tie(a.score, b.class_id, b.box.x_min, b.box.y_min, b.box.x_max, b.box.y_max);
}

// Greedy per-class non-maximum suppression.  A detection is suppressed when
// an already-kept detection of the same class overlaps it with IoU above the
// threshold.  Sorting uses the full deterministic order above, so ties in
// score cannot reorder results between runs.
inline std::vector<Detection> nms(std::vector<Detection> dets, float iou_threshold) {
  std::sort(dets.begin(), dets.end(), detection_order);
  std::vector<Detection> kept;
  kept.reserve(dets.size());
  for (const auto& d : dets) {
    bool suppressed = false;
    for (const auto& k : kept) {
      if (k.class_id == d.class_id && iou(k.box, d.box) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

}  // namespace grsn
