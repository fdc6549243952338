// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"
#include "msdetr/geometry.hpp"
#include "msdetr/supervision.hpp"

namespace msdetr {

struct ScoredBox {
  double score = 0.0;
  Box box;
};

/// Area under the all-point interpolated precision/recall curve for one
/// class. Detections are ranked by score over all images (ties keep image
/// order, then list order) and each is greedily matched to the unmatched
/// ground truth of highest IoU in its image. Returns -1 when there is no
/// ground truth at all.
double average_precision(std::span<const std::vector<ScoredBox>> detections,
                         std::span<const std::vector<Box>> ground_truth, double iou_threshold);

/// Per-image class-labelled detections.
struct ImageDetections {
  std::vector<int> classes;
  std::vector<ScoredBox> boxes;
};

/// Top `max_detections` (query, class) pairs of a Q x C score matrix.
ImageDetections top_detections(const Eigen::MatrixXd& scores, std::span<const Box> boxes,
                               int max_detections = 100);

inline constexpr double kIouThresholds[] = {0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95};

struct ApReport {
  double ap50 = 0.0;
  double ap75 = 0.0;
  double ap = 0.0;                // mean over kIouThresholds
  std::vector<double> per_class;  // mean over thresholds, -1 for absent classes
};

void to_json(nlohmann::json& j, const ApReport& r);

/// Class-averaged AP over classes that have ground truth.
/// Throws std::invalid_argument on an empty dataset or one without objects.
ApReport evaluate_ap(std::span<const ImageDetections> detections,
                     std::span<const GroundTruth> ground_truth, int num_classes);

struct CandidateStats {
  double mean = 0.0;
  double median = 0.0;
  std::vector<double> per_gt;  // mean IoU of the k best candidates of each gt
};

/// For one ground-truth box: the k candidates of highest IoU, best first.
std::vector<std::pair<int, double>> best_candidates(std::span<const Box> candidates,
                                                    const Box& gt, int k);

/// Mean and median over all ground truths of the mean top-k candidate IoU.
CandidateStats candidate_quality(std::span<const std::vector<Box>> candidates,
                                 std::span<const GroundTruth> ground_truth, int k);

}  // namespace msdetr
