// SPDX-License-Identifier: Apache-2.0
#include "msdetr/eval.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace msdetr {

double average_precision(std::span<const std::vector<ScoredBox>> detections,
                         std::span<const std::vector<Box>> ground_truth, double iou_threshold) {
  if (detections.size() != ground_truth.size()) {
    throw std::invalid_argument("average_precision: image count mismatch");
  }
  std::size_t num_gt = 0;
  for (const auto& g : ground_truth) num_gt += g.size();
  if (num_gt == 0) return -1.0;

  struct Ranked {
    double score;
    std::size_t image;
    std::size_t index;
  };
  std::vector<Ranked> ranked;
  for (std::size_t i = 0; i < detections.size(); ++i) {
    for (std::size_t d = 0; d < detections[i].size(); ++d) {
      ranked.push_back({detections[i][d].score, i, d});
    }
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const Ranked& a, const Ranked& b) { return a.score > b.score; });

  std::vector<std::vector<char>> taken(ground_truth.size());
  for (std::size_t i = 0; i < ground_truth.size(); ++i) taken[i].assign(ground_truth[i].size(), 0);

  std::vector<double> precision(ranked.size());
  std::vector<double> recall(ranked.size());
  std::size_t tp = 0;
  for (std::size_t r = 0; r < ranked.size(); ++r) {
    const Box& box = detections[ranked[r].image][ranked[r].index].box;
    const auto& gts = ground_truth[ranked[r].image];
    auto& used = taken[ranked[r].image];
    int best = -1;
    double best_iou = iou_threshold;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g]) continue;
      const double v = iou(box, gts[g]);
      if (v >= best_iou && (best < 0 || v > best_iou)) {
        best = static_cast<int>(g);
        best_iou = v;
      }
    }
    if (best >= 0) {
      used[static_cast<std::size_t>(best)] = 1;
      ++tp;
    }
    precision[r] = static_cast<double>(tp) / static_cast<double>(r + 1);
    recall[r] = static_cast<double>(tp) / static_cast<double>(num_gt);
  }

  for (std::size_t r = ranked.size(); r-- > 1;) {
    precision[r - 1] = std::max(precision[r - 1], precision[r]);
  }
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t r = 0; r < ranked.size(); ++r) {
    ap += (recall[r] - prev_recall) * precision[r];
    prev_recall = recall[r];
  }
  return ap;
}

ImageDetections top_detections(const Eigen::MatrixXd& scores, std::span<const Box> boxes,
                               int max_detections) {
  if (static_cast<std::size_t>(scores.rows()) != boxes.size()) {
    throw std::invalid_argument("top_detections: score rows and boxes differ");
  }
  const Eigen::Index total = scores.size();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(total));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  // Row-major flat index: query * C + class.
  auto score_of = [&](Eigen::Index flat) {
    return scores(flat / scores.cols(), flat % scores.cols());
  };
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index a, Eigen::Index b) { return score_of(a) > score_of(b); });
  const auto keep = std::min<std::size_t>(order.size(), static_cast<std::size_t>(max_detections));
  ImageDetections out;
  for (std::size_t i = 0; i < keep; ++i) {
    const Eigen::Index q = order[i] / scores.cols();
    out.classes.push_back(static_cast<int>(order[i] % scores.cols()));
    out.boxes.push_back({score_of(order[i]), boxes[static_cast<std::size_t>(q)]});
  }
  return out;
}

void to_json(nlohmann::json& j, const ApReport& r) {
  j = {{"ap50", r.ap50}, {"ap75", r.ap75}, {"ap", r.ap}, {"per_class_ap", r.per_class}};
}

ApReport evaluate_ap(std::span<const ImageDetections> detections,
                     std::span<const GroundTruth> ground_truth, int num_classes) {
  if (ground_truth.empty()) throw std::invalid_argument("evaluation on an empty dataset");
  if (detections.size() != ground_truth.size()) {
    throw std::invalid_argument("evaluate_ap: image count mismatch");
  }
  const std::size_t images = ground_truth.size();
  ApReport report;
  report.per_class.assign(static_cast<std::size_t>(num_classes), -1.0);
  std::vector<double> sum_by_threshold(std::size(kIouThresholds), 0.0);
  int classes_present = 0;
  for (int c = 0; c < num_classes; ++c) {
    std::vector<std::vector<ScoredBox>> dets(images);
    std::vector<std::vector<Box>> gts(images);
    for (std::size_t i = 0; i < images; ++i) {
      for (std::size_t d = 0; d < detections[i].boxes.size(); ++d) {
        if (detections[i].classes[d] == c) dets[i].push_back(detections[i].boxes[d]);
      }
      for (std::size_t g = 0; g < ground_truth[i].size(); ++g) {
        if (ground_truth[i].classes[g] == c) gts[i].push_back(ground_truth[i].boxes[g]);
      }
    }
    double class_sum = 0.0;
    bool present = true;
    for (std::size_t t = 0; t < std::size(kIouThresholds); ++t) {
      const double ap = average_precision(dets, gts, kIouThresholds[t]);
      if (ap < 0.0) {
        present = false;
        break;
      }
      sum_by_threshold[t] += ap;
      class_sum += ap;
    }
    if (!present) continue;
    ++classes_present;
    report.per_class[static_cast<std::size_t>(c)] =
        class_sum / static_cast<double>(std::size(kIouThresholds));
  }
  if (classes_present == 0) throw std::invalid_argument("dataset has no ground-truth objects");
  double all = 0.0;
  for (double s : sum_by_threshold) all += s / classes_present;
  report.ap50 = sum_by_threshold[0] / classes_present;
  report.ap75 = sum_by_threshold[5] / classes_present;
  report.ap = all / static_cast<double>(std::size(kIouThresholds));
  return report;
}

std::vector<std::pair<int, double>> best_candidates(std::span<const Box> candidates,
                                                    const Box& gt, int k) {
  if (k < 1 || static_cast<std::size_t>(k) > candidates.size()) {
    throw std::invalid_argument("candidate count k must be in [1, number of queries]");
  }
  std::vector<std::pair<int, double>> all;
  all.reserve(candidates.size());
  for (std::size_t q = 0; q < candidates.size(); ++q) {
    all.emplace_back(static_cast<int>(q), iou(candidates[q], gt));
  }
  std::stable_sort(all.begin(), all.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  all.resize(static_cast<std::size_t>(k));
  return all;
}

CandidateStats candidate_quality(std::span<const std::vector<Box>> candidates,
                                 std::span<const GroundTruth> ground_truth, int k) {
  if (candidates.size() != ground_truth.size()) {
    throw std::invalid_argument("candidate_quality: image count mismatch");
  }
  CandidateStats stats;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    for (const Box& gt : ground_truth[i].boxes) {
      double sum = 0.0;
      for (const auto& [q, v] : best_candidates(candidates[i], gt, k)) sum += v;
      stats.per_gt.push_back(sum / k);
    }
  }
  if (stats.per_gt.empty()) return stats;
  stats.mean = std::accumulate(stats.per_gt.begin(), stats.per_gt.end(), 0.0) /
               static_cast<double>(stats.per_gt.size());
  std::vector<double> sorted = stats.per_gt;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  stats.median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  return stats;
}

}  // namespace msdetr
