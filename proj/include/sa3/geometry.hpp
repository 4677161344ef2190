#pragma once

// Box geometry shared by the detector, matching rules and evaluation.
// Boxes are half-open [x1,x2)x[y1,y2) in pixel coordinates, origin top-left.

#include <algorithm>
#include <stdexcept>
#include <vector>

namespace sa3 {

struct Box {
  double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  bool valid() const { return x1 < x2 && y1 < y2; }
};

inline double iou(const Box& a, const Box& b) {
  if (!a.valid() || !b.valid()) throw std::invalid_argument("iou: degenerate box");
  const double ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (ix <= 0.0 || iy <= 0.0) return 0.0;
  const double inter = ix * iy;
  return inter / (a.area() + b.area() - inter);
}

// Greedy score-ordered suppression; `order` indexes boxes sorted by
// descending score with ties already broken by the caller's ordering.
inline std::vector<int> nms_keep(const std::vector<Box>& boxes, const std::vector<int>& order,
                                 double iou_threshold) {
  std::vector<int> keep;
  std::vector<bool> removed(boxes.size(), false);
  for (int i : order) {
    if (removed[static_cast<std::size_t>(i)]) continue;
    keep.push_back(i);
    for (int j : order) {
      if (j == i || removed[static_cast<std::size_t>(j)]) continue;
      if (iou(boxes[static_cast<std::size_t>(i)], boxes[static_cast<std::size_t>(j)]) >= iou_threshold)
        removed[static_cast<std::size_t>(j)] = true;
    }
  }
  return keep;
}

}  // namespace sa3
