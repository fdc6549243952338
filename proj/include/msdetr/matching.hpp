// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"
#include "msdetr/geometry.hpp"

namespace msdetr {

/// Optimal assignment of every ground truth to a distinct query.
/// pairs[n] = {query, n}; sorted by gt index.
struct OneToOneMatch {
  std::vector<std::pair<int, int>> pairs;  // (query_index, gt_index)

  /// query matched to each gt, indexed by gt.
  std::vector<int> query_of_gt() const;
};

enum class ClassCostMode { kProbability, kFocal };

struct MatcherConfig {
  double alpha = 0.4;
  int top_k = 6;
  double tau = 0.4;
  bool include_o2o = true;
  double cost_class = 2.0;
  double cost_l1 = 5.0;
  double cost_giou = 2.0;
  ClassCostMode class_cost = ClassCostMode::kProbability;
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;

  /// Throws std::invalid_argument when a field is out of range.
  void validate() const;
};

void to_json(nlohmann::json& j, const MatcherConfig& c);
void from_json(const nlohmann::json& j, MatcherConfig& c);

struct ScoredQuery {
  int query = 0;
  double score = 0.0;
};

/// Queries assigned to each ground truth by the one-to-many rule.
struct OneToManyAssignment {
  std::vector<std::vector<ScoredQuery>> per_gt;

  std::size_t num_pairs() const;
  /// Flattened (query, gt) pairs, gt-major in set order.
  std::vector<std::pair<int, int>> pairs() const;
};

/// Detached per-query predictions in probability space.
struct PredictionView {
  const Eigen::MatrixXd& scores;  // Q x C, probabilities in [0, 1]
  std::span<const Box> boxes;     // Q
};

struct GroundTruthView {
  std::span<const int> classes;  // N
  std::span<const Box> boxes;    // N
};

/// Q x N one-to-one matching cost.
Eigen::MatrixXd o2o_cost_matrix(const PredictionView& pred, const GroundTruthView& gt,
                                const MatcherConfig& cfg);

/// Minimum-cost injection of columns (ground truths) into rows (queries).
/// Among optimal injections the one with lexicographically smallest query
/// sequence (ordered by gt index) is returned.
OneToOneMatch hungarian(const Eigen::MatrixXd& cost);

double assignment_cost(const Eigen::MatrixXd& cost, const OneToOneMatch& match);

/// alpha * s[gt_class] + (1 - alpha) * IoU(box, gt_box).
double match_score(std::span<const double> class_scores, const Box& box, int gt_class,
                   const Box& gt_box, double alpha);

OneToManyAssignment one_to_many_match(const PredictionView& pred, const GroundTruthView& gt,
                                      const OneToOneMatch& o2o, const MatcherConfig& cfg);

}  // namespace msdetr
