// SPDX-License-Identifier: Apache-2.0
#include "msdetr/matching.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

namespace msdetr {

std::vector<int> OneToOneMatch::query_of_gt() const {
  std::vector<int> out(pairs.size(), -1);
  for (const auto& [q, n] : pairs) out[static_cast<std::size_t>(n)] = q;
  return out;
}

void MatcherConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("matcher.alpha must be in [0,1]");
  if (!(tau >= 0.0 && tau <= 1.0)) throw std::invalid_argument("matcher.tau must be in [0,1]");
  if (top_k < 1) throw std::invalid_argument("matcher.top_k must be >= 1");
  if (!(cost_class >= 0.0) || !(cost_l1 >= 0.0) || !(cost_giou >= 0.0)) {
    throw std::invalid_argument("matcher cost weights must be nonnegative");
  }
}

std::size_t OneToManyAssignment::num_pairs() const {
  std::size_t n = 0;
  for (const auto& set : per_gt) n += set.size();
  return n;
}

std::vector<std::pair<int, int>> OneToManyAssignment::pairs() const {
  std::vector<std::pair<int, int>> out;
  out.reserve(num_pairs());
  for (std::size_t n = 0; n < per_gt.size(); ++n) {
    for (const auto& m : per_gt[n]) out.emplace_back(m.query, static_cast<int>(n));
  }
  return out;
}

namespace {

void check_shapes(const PredictionView& pred, const GroundTruthView& gt) {
  if (static_cast<std::size_t>(pred.scores.rows()) != pred.boxes.size()) {
    throw std::invalid_argument("score rows and box count differ");
  }
  if (gt.classes.size() != gt.boxes.size()) {
    throw std::invalid_argument("gt class and box count differ");
  }
  for (int c : gt.classes) {
    if (c < 0 || c >= pred.scores.cols()) throw std::out_of_range("gt class out of range");
  }
}

double l1_center(const Box& a, const Box& b) {
  return std::abs(a.cx - b.cx) + std::abs(a.cy - b.cy) + std::abs(a.w - b.w) +
         std::abs(a.h - b.h);
}

double class_cost(double p, const MatcherConfig& cfg) {
  if (cfg.class_cost == ClassCostMode::kProbability) return -p;
  constexpr double kEps = 1e-8;
  const double pos = cfg.focal_alpha * std::pow(1.0 - p, cfg.focal_gamma) * -std::log(p + kEps);
  const double neg =
      (1.0 - cfg.focal_alpha) * std::pow(p, cfg.focal_gamma) * -std::log(1.0 - p + kEps);
  return pos - neg;
}

}  // namespace

Eigen::MatrixXd o2o_cost_matrix(const PredictionView& pred, const GroundTruthView& gt,
                                const MatcherConfig& cfg) {
  check_shapes(pred, gt);
  const auto num_q = static_cast<Eigen::Index>(pred.boxes.size());
  const auto num_gt = static_cast<Eigen::Index>(gt.boxes.size());
  if (num_q < num_gt) throw std::invalid_argument("more ground truths than queries");
  Eigen::MatrixXd cost(num_q, num_gt);
  for (Eigen::Index q = 0; q < num_q; ++q) {
    for (Eigen::Index n = 0; n < num_gt; ++n) {
      const Box& pb = pred.boxes[static_cast<std::size_t>(q)];
      const Box& gb = gt.boxes[static_cast<std::size_t>(n)];
      const double p = pred.scores(q, gt.classes[static_cast<std::size_t>(n)]);
      cost(q, n) = cfg.cost_class * class_cost(p, cfg) + cfg.cost_l1 * l1_center(pb, gb) +
                   cfg.cost_giou * -giou(pb, gb);
    }
  }
  return cost;
}

namespace {

// Dense Hungarian (shortest augmenting paths with potentials) on a square
// matrix a[row][col]. Returns the column of each row and the final duals so
// that a[i][j] - u[i] - v[j] >= 0 with equality on the matching.
struct SquareSolution {
  std::vector<int> col_of_row;
  std::vector<double> u;
  std::vector<double> v;
};

SquareSolution solve_square(const Eigen::MatrixXd& a) {
  const int n = static_cast<int>(a.rows());
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), kInf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = kInf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  SquareSolution sol;
  sol.col_of_row.assign(n, -1);
  for (int j = 1; j <= n; ++j) sol.col_of_row[p[j] - 1] = j - 1;
  sol.u.assign(u.begin() + 1, u.end());
  sol.v.assign(v.begin() + 1, v.end());
  return sol;
}

}  // namespace

OneToOneMatch hungarian(const Eigen::MatrixXd& cost) {
  const auto num_q = static_cast<int>(cost.rows());
  const auto num_gt = static_cast<int>(cost.cols());
  if (num_q < num_gt) throw std::invalid_argument("more ground truths than queries");
  if (!cost.allFinite()) throw std::invalid_argument("cost matrix has a non-finite entry");
  OneToOneMatch match;
  if (num_gt == 0) return match;

  // Rows are ground truths padded with zero-cost dummies, columns are queries.
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(num_q, num_q);
  a.topRows(num_gt) = cost.transpose();
  SquareSolution sol = solve_square(a);

  // Every optimal assignment uses only edges that are tight under the final
  // duals, so the lexicographic tie-break is a search on the tight graph.
  const double eps = 1e-10 * (1.0 + a.cwiseAbs().maxCoeff());
  auto tight = [&](int row, int col) {
    return a(row, col) - sol.u[row] - sol.v[col] <= eps;
  };
  std::vector<int>& col_of_row = sol.col_of_row;
  std::vector<int> row_of_col(num_q);
  for (int r = 0; r < num_q; ++r) row_of_col[col_of_row[r]] = r;
  std::vector<char> frozen_row(num_q, 0), frozen_col(num_q, 0);

  // Re-match `start` to some column, given that `free_col` is unmatched and
  // frozen rows/cols are off limits. BFS over alternating tight paths.
  auto augment = [&](int start, int free_col) {
    std::vector<int> parent_col_of_row(num_q, -2);  // column used to reach row
    std::vector<int> reached_from_row(num_q, -1);   // row that reached column
    std::deque<int> queue{start};
    parent_col_of_row[start] = -1;
    while (!queue.empty()) {
      const int r = queue.front();
      queue.pop_front();
      for (int c = 0; c < num_q; ++c) {
        if (frozen_col[c] || reached_from_row[c] != -1 || !tight(r, c)) continue;
        reached_from_row[c] = r;
        if (c == free_col) {
          int col = c;
          int row = r;
          while (true) {
            const int prev_col = parent_col_of_row[row];
            col_of_row[row] = col;
            row_of_col[col] = row;
            if (prev_col == -1) break;
            col = prev_col;
            row = reached_from_row[col];
          }
          return true;
        }
        const int next = row_of_col[c];
        if (frozen_row[next] || parent_col_of_row[next] != -2) continue;
        parent_col_of_row[next] = c;
        queue.push_back(next);
      }
    }
    return false;
  };

  for (int n = 0; n < num_gt; ++n) {
    for (int c = 0; c < num_q; ++c) {
      if (frozen_col[c] || !tight(n, c)) continue;
      if (c == col_of_row[n]) break;
      // Try to move row n onto column c and re-seat c's current owner.
      const std::vector<int> saved_cols = col_of_row;
      const std::vector<int> saved_rows = row_of_col;
      const int old_col = col_of_row[n];
      const int displaced = row_of_col[c];
      col_of_row[n] = c;
      row_of_col[c] = n;
      frozen_row[n] = 1;
      frozen_col[c] = 1;
      const bool ok = augment(displaced, old_col);
      frozen_row[n] = 0;
      frozen_col[c] = 0;
      if (ok) break;
      col_of_row = saved_cols;
      row_of_col = saved_rows;
    }
    frozen_row[n] = 1;
    frozen_col[col_of_row[n]] = 1;
  }

  match.pairs.reserve(static_cast<std::size_t>(num_gt));
  for (int n = 0; n < num_gt; ++n) match.pairs.emplace_back(col_of_row[n], n);
  return match;
}

double assignment_cost(const Eigen::MatrixXd& cost, const OneToOneMatch& match) {
  double total = 0.0;
  for (const auto& [q, n] : match.pairs) total += cost(q, n);
  return total;
}

double match_score(std::span<const double> class_scores, const Box& box, int gt_class,
                   const Box& gt_box, double alpha) {
  if (gt_class < 0 || static_cast<std::size_t>(gt_class) >= class_scores.size()) {
    throw std::out_of_range("gt class " + std::to_string(gt_class) + " out of range");
  }
  return alpha * class_scores[static_cast<std::size_t>(gt_class)] +
         (1.0 - alpha) * iou(box, gt_box);
}

OneToManyAssignment one_to_many_match(const PredictionView& pred, const GroundTruthView& gt,
                                      const OneToOneMatch& o2o, const MatcherConfig& cfg) {
  check_shapes(pred, gt);
  cfg.validate();
  const int num_q = static_cast<int>(pred.boxes.size());
  const int num_gt = static_cast<int>(gt.boxes.size());
  if (o2o.pairs.size() != static_cast<std::size_t>(num_gt)) {
    throw std::invalid_argument("one-to-one match does not cover every ground truth");
  }
  const std::vector<int> o2o_query = o2o.query_of_gt();

  // scores(q, n); row-major copy of class probabilities for span access.
  Eigen::MatrixXd scores(num_q, num_gt);
  std::vector<double> row(static_cast<std::size_t>(pred.scores.cols()));
  for (int q = 0; q < num_q; ++q) {
    for (Eigen::Index c = 0; c < pred.scores.cols(); ++c) row[c] = pred.scores(q, c);
    for (int n = 0; n < num_gt; ++n) {
      scores(q, n) = match_score(row, pred.boxes[q], gt.classes[n], gt.boxes[n], cfg.alpha);
    }
  }

  std::vector<std::vector<int>> candidates(num_gt);
  std::vector<int> order(num_q);
  for (int n = 0; n < num_gt; ++n) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return scores(a, n) > scores(b, n); });
    const int take = std::min(cfg.top_k, num_q);
    for (int i = 0; i < take; ++i) {
      if (scores(order[i], n) >= cfg.tau) candidates[n].push_back(order[i]);
    }
    if (cfg.include_o2o &&
        std::find(candidates[n].begin(), candidates[n].end(), o2o_query[n]) ==
            candidates[n].end()) {
      candidates[n].push_back(o2o_query[n]);
    }
  }

  // Each query keeps a single ground truth: its one-to-one partner if it has
  // one, otherwise the gt with the highest match score (lower index on ties).
  std::vector<int> owner(num_q, -1);
  std::vector<char> pinned(num_q, 0);
  if (cfg.include_o2o) {
    for (int n = 0; n < num_gt; ++n) {
      owner[o2o_query[n]] = n;
      pinned[o2o_query[n]] = 1;
    }
  }
  for (int n = 0; n < num_gt; ++n) {
    for (int q : candidates[n]) {
      if (pinned[q]) continue;
      if (owner[q] < 0 || scores(q, n) > scores(q, owner[q])) owner[q] = n;
    }
  }

  OneToManyAssignment out;
  out.per_gt.resize(num_gt);
  for (int n = 0; n < num_gt; ++n) {
    for (int q : candidates[n]) {
      if (owner[q] == n) out.per_gt[n].push_back({q, scores(q, n)});
    }
  }
  return out;
}

}  // namespace msdetr
