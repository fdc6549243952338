// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

#include <Eigen/Core>

namespace msdetr {

/// Axis-aligned box in normalized image coordinates, center form.
/// This is the canonical representation everywhere in the library; the box
/// head of the model emits exactly these four numbers through a sigmoid.
struct Box {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;

  friend bool operator==(const Box&, const Box&) = default;
};

/// Same rectangle as x0 <= x1, y0 <= y1 corners. Used for overlap math.
struct CornerBox {
  double x0 = 0.0;
  double y0 = 0.0;
  double x1 = 0.0;
  double y1 = 0.0;

  friend bool operator==(const CornerBox&, const CornerBox&) = default;
};

// Both conversions throw std::invalid_argument on a negative extent.
CornerBox to_corner(const Box& box);
Box to_center(const CornerBox& box);

double area(const Box& box);

/// Intersection over union. Zero when the union has zero area.
double iou(const Box& a, const Box& b);

/// Generalized IoU: iou - (hull - union) / hull. Zero for a degenerate hull.
double giou(const Box& a, const Box& b);

/// Gradient of giou(pred, target) with respect to (cx, cy, w, h) of pred.
/// Kinks (touching edges) take the one-sided derivative where pred is the
/// active argument of the min/max.
Eigen::Vector4d giou_grad(const Box& pred, const Box& target);

/// |A| x |B| matrix of iou(A[i], B[j]).
Eigen::MatrixXd pairwise_iou(std::span<const Box> a, std::span<const Box> b);

}  // namespace msdetr
