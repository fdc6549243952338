// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"
#include "msdetr/geometry.hpp"
#include "msdetr/matching.hpp"

namespace msdetr {

enum class ClassLossMode { kFocal, kBce };

/// How one-to-many terms are normalized. One-to-one terms always divide by
/// the ground-truth count.
enum class Normalization { kPerGtCount, kPerPairCount };

struct LossConfig {
  double w_cls_o2o = 2.0;
  double w_cls_o2m = 2.0;
  double w_l1 = 5.0;
  double w_giou = 2.0;
  double focal_gamma = 2.0;
  double focal_balance = 0.25;
  ClassLossMode cls_mode = ClassLossMode::kFocal;
  Normalization o2m_norm = Normalization::kPerPairCount;

  void validate() const;
};

void to_json(nlohmann::json& j, const LossConfig& c);
void from_json(const nlohmann::json& j, LossConfig& c);

struct GroundTruth {
  std::vector<int> classes;
  std::vector<Box> boxes;

  std::size_t size() const { return boxes.size(); }
};

/// Raw head outputs for one group of Q queries.
struct PredictionBlock {
  Eigen::MatrixXd logits;  // Q x C
  std::vector<Box> boxes;  // Q, center form in (0, 1)

  /// Sigmoid of the logits.
  Eigen::MatrixXd probabilities() const;
};

/// One decoder layer: one-to-one heads on the layer output, one-to-many heads
/// on the configured tap point.
struct LayerPrediction {
  PredictionBlock o2o;
  PredictionBlock o2m;
};

struct LayerPredictions {
  std::vector<LayerPrediction> layers;
};

struct LayerMatches {
  OneToOneMatch o2o;
  OneToManyAssignment o2m;
};

/// Gradient of a loss with respect to one PredictionBlock.
struct BlockGrad {
  Eigen::MatrixXd logits;  // Q x C
  Eigen::MatrixXd boxes;   // Q x 4, (cx, cy, w, h)
};

struct LayerGrad {
  BlockGrad o2o;
  BlockGrad o2m;
};

/// Unweighted terms of one layer. A term whose weight is zero is not
/// evaluated and reads 0. box_l1 / box_giou include both the one-to-one part
/// (also reported alone as o2o_l1 / o2o_giou) and the extra one-to-many part.
struct LayerLoss {
  double cls_o2o = 0.0;
  double cls_o2m = 0.0;
  double box_l1 = 0.0;
  double box_giou = 0.0;
  double o2o_l1 = 0.0;
  double o2o_giou = 0.0;
  double total = 0.0;  // weighted
};

struct LossBreakdown {
  std::vector<LayerLoss> per_layer;
  double total = 0.0;
};

/// Sigmoid focal (or binary cross-entropy) loss over all Q x C logits, with
/// the listed (query, class) entries positive and the rest negative.
/// Throws std::invalid_argument if a query is listed twice.
double cls_loss(const Eigen::MatrixXd& logits, std::span<const std::pair<int, int>> positives,
                double normalizer, const LossConfig& cfg, Eigen::MatrixXd* grad = nullptr);

struct BoxLoss {
  double l1 = 0.0;
  double giou = 0.0;
};

/// Sum over (query, gt) pairs of the center-form L1 distance and 1 - GIoU.
BoxLoss box_loss(std::span<const Box> pred, std::span<const std::pair<int, int>> pairs,
                 std::span<const Box> gt_boxes, double normalizer,
                 Eigen::MatrixXd* grad_l1 = nullptr, Eigen::MatrixXd* grad_giou = nullptr);

/// Runs both matchers on detached predictions of one layer.
LayerMatches match_layer(const LayerPrediction& pred, const GroundTruth& gt,
                         const MatcherConfig& cfg);

/// Mixed one-to-one / one-to-many loss of one layer for fixed matches.
LayerLoss mixed_layer_loss(const LayerPrediction& pred, const GroundTruth& gt,
                           const LayerMatches& matches, const LossConfig& cfg,
                           LayerGrad* grad = nullptr);

/// Pure one-to-one loss (classification + box on the one-to-one heads).
LayerLoss one_to_one_loss(const PredictionBlock& pred, const GroundTruth& gt,
                          const OneToOneMatch& match, const LossConfig& cfg,
                          BlockGrad* grad = nullptr);

/// Deep-supervised loss with matches supplied by the caller.
LossBreakdown total_loss_with_matches(const LayerPredictions& preds, const GroundTruth& gt,
                                      std::span<const LayerMatches> matches,
                                      const LossConfig& cfg,
                                      std::vector<LayerGrad>* grads = nullptr);

/// Deep-supervised loss; matching is recomputed independently per layer.
LossBreakdown total_loss(const LayerPredictions& preds, const GroundTruth& gt,
                         const LossConfig& cfg, const MatcherConfig& matcher_cfg,
                         std::vector<LayerGrad>* grads = nullptr,
                         std::vector<LayerMatches>* matches_out = nullptr);

}  // namespace msdetr
