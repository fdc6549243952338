// SPDX-License-Identifier: Apache-2.0
#include "msdetr/geometry.hpp"

#include <algorithm>
#include <stdexcept>

namespace msdetr {

CornerBox to_corner(const Box& box) {
  if (box.w < 0.0 || box.h < 0.0) {
    throw std::invalid_argument("box has negative width or height");
  }
  return {box.cx - 0.5 * box.w, box.cy - 0.5 * box.h, box.cx + 0.5 * box.w,
          box.cy + 0.5 * box.h};
}

Box to_center(const CornerBox& box) {
  if (box.x1 < box.x0 || box.y1 < box.y0) {
    throw std::invalid_argument("corner box has x1 < x0 or y1 < y0");
  }
  return {0.5 * (box.x0 + box.x1), 0.5 * (box.y0 + box.y1), box.x1 - box.x0,
          box.y1 - box.y0};
}

double area(const Box& box) { return box.w * box.h; }

namespace {

struct Overlap {
  double inter = 0.0;
  double uni = 0.0;
  double hull = 0.0;
};

Overlap overlap(const Box& a, const Box& b) {
  const CornerBox p = to_corner(a);
  const CornerBox q = to_corner(b);
  const double iw = std::max(0.0, std::min(p.x1, q.x1) - std::max(p.x0, q.x0));
  const double ih = std::max(0.0, std::min(p.y1, q.y1) - std::max(p.y0, q.y0));
  Overlap o;
  o.inter = iw * ih;
  o.uni = area(a) + area(b) - o.inter;
  o.hull = (std::max(p.x1, q.x1) - std::min(p.x0, q.x0)) *
           (std::max(p.y1, q.y1) - std::min(p.y0, q.y0));
  return o;
}

}  // namespace

double iou(const Box& a, const Box& b) {
  const Overlap o = overlap(a, b);
  if (o.uni <= 0.0) return 0.0;
  return o.inter / o.uni;
}

double giou(const Box& a, const Box& b) {
  const Overlap o = overlap(a, b);
  if (o.hull <= 0.0) return 0.0;
  const double base = o.uni > 0.0 ? o.inter / o.uni : 0.0;
  return base - (o.hull - o.uni) / o.hull;
}

Eigen::Vector4d giou_grad(const Box& pred, const Box& target) {
  const CornerBox p = to_corner(pred);
  const CornerBox q = to_corner(target);
  Eigen::Vector4d zero = Eigen::Vector4d::Zero();

  const double iw_raw = std::min(p.x1, q.x1) - std::max(p.x0, q.x0);
  const double ih_raw = std::min(p.y1, q.y1) - std::max(p.y0, q.y0);
  const double iw = std::max(0.0, iw_raw);
  const double ih = std::max(0.0, ih_raw);
  const double cw = std::max(p.x1, q.x1) - std::min(p.x0, q.x0);
  const double ch = std::max(p.y1, q.y1) - std::min(p.y0, q.y0);
  const double pw = p.x1 - p.x0;
  const double ph = p.y1 - p.y0;
  const double inter = iw * ih;
  const double uni = pw * ph + area(target) - inter;
  const double hull = cw * ch;
  if (hull <= 0.0 || uni <= 0.0) return zero;

  // giou = I/U - 1 + U/C with U = A_p + A_q - I.
  const double d_inter = 1.0 / uni - 1.0 / hull + inter / (uni * uni);
  const double d_area = 1.0 / hull - inter / (uni * uni);
  const double d_hull = -uni / (hull * hull);

  // Partial derivatives with respect to corners x0, y0, x1, y1 of pred.
  double g[4] = {0.0, 0.0, 0.0, 0.0};
  if (iw_raw > 0.0 && ih_raw > 0.0) {
    if (p.x0 >= q.x0) g[0] += d_inter * -ih;
    if (p.x1 <= q.x1) g[2] += d_inter * ih;
    if (p.y0 >= q.y0) g[1] += d_inter * -iw;
    if (p.y1 <= q.y1) g[3] += d_inter * iw;
  }
  g[0] += d_area * -ph;
  g[2] += d_area * ph;
  g[1] += d_area * -pw;
  g[3] += d_area * pw;
  if (p.x0 <= q.x0) g[0] += d_hull * -ch;
  if (p.x1 >= q.x1) g[2] += d_hull * ch;
  if (p.y0 <= q.y0) g[1] += d_hull * -cw;
  if (p.y1 >= q.y1) g[3] += d_hull * cw;

  // x0 = cx - w/2, x1 = cx + w/2.
  return {g[0] + g[2], g[1] + g[3], 0.5 * (g[2] - g[0]), 0.5 * (g[3] - g[1])};
}

Eigen::MatrixXd pairwise_iou(std::span<const Box> a, std::span<const Box> b) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(a.size()),
                      static_cast<Eigen::Index>(b.size()));
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < b.size(); ++j) {
      out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = iou(a[i], b[j]);
    }
  }
  return out;
}

}  // namespace msdetr
