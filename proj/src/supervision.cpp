// SPDX-License-Identifier: Apache-2.0
#include "msdetr/supervision.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace msdetr {

void LossConfig::validate() const {
  for (double w : {w_cls_o2o, w_cls_o2m, w_l1, w_giou}) {
    if (!std::isfinite(w) || w < 0.0) {
      throw std::invalid_argument("loss weights must be finite and nonnegative");
    }
  }
  if (!(focal_gamma >= 0.0)) throw std::invalid_argument("loss.focal_gamma must be >= 0");
  if (!(focal_balance >= 0.0 && focal_balance <= 1.0)) {
    throw std::invalid_argument("loss.focal_balance must be in [0,1]");
  }
}

Eigen::MatrixXd PredictionBlock::probabilities() const {
  return logits.unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
}

namespace {

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Loss and d(loss)/d(logit) for a single sigmoid output.
std::pair<double, double> binary_term(double x, bool positive, const LossConfig& cfg) {
  const double p = sigmoid(x);
  const double q = sigmoid(-x);  // 1 - p without cancellation
  if (cfg.cls_mode == ClassLossMode::kBce) {
    return positive ? std::pair{softplus(-x), p - 1.0} : std::pair{softplus(x), p};
  }
  const double g = cfg.focal_gamma;
  if (positive) {
    const double a = cfg.focal_balance * std::pow(q, g);
    const double ce = softplus(-x);
    return {a * ce, a * (-g * p * ce - q)};
  }
  const double a = (1.0 - cfg.focal_balance) * std::pow(p, g);
  const double ce = softplus(x);
  return {a * ce, a * (p + g * q * ce)};
}

double positive_normalizer(std::size_t count) {
  return static_cast<double>(std::max<std::size_t>(count, 1));
}

}  // namespace

double cls_loss(const Eigen::MatrixXd& logits, std::span<const std::pair<int, int>> positives,
                double normalizer, const LossConfig& cfg, Eigen::MatrixXd* grad) {
  if (!(normalizer > 0.0)) throw std::invalid_argument("normalizer must be positive");
  const Eigen::Index num_q = logits.rows();
  const Eigen::Index num_c = logits.cols();
  std::vector<int> positive_class(static_cast<std::size_t>(num_q), -1);
  for (const auto& [q, c] : positives) {
    if (q < 0 || q >= num_q || c < 0 || c >= num_c) {
      throw std::out_of_range("positive target out of range");
    }
    if (positive_class[q] >= 0) {
      throw std::invalid_argument("query " + std::to_string(q) +
                                  " listed twice in classification targets");
    }
    positive_class[q] = c;
  }
  if (grad) grad->resize(num_q, num_c);
  double total = 0.0;
  for (Eigen::Index q = 0; q < num_q; ++q) {
    for (Eigen::Index c = 0; c < num_c; ++c) {
      const auto [loss, d] = binary_term(logits(q, c), positive_class[q] == c, cfg);
      total += loss;
      if (grad) (*grad)(q, c) = d / normalizer;
    }
  }
  return total / normalizer;
}

BoxLoss box_loss(std::span<const Box> pred, std::span<const std::pair<int, int>> pairs,
                 std::span<const Box> gt_boxes, double normalizer, Eigen::MatrixXd* grad_l1,
                 Eigen::MatrixXd* grad_giou) {
  if (!(normalizer > 0.0)) throw std::invalid_argument("normalizer must be positive");
  const auto num_q = static_cast<Eigen::Index>(pred.size());
  if (grad_l1) grad_l1->setZero(num_q, 4);
  if (grad_giou) grad_giou->setZero(num_q, 4);
  BoxLoss out;
  for (const auto& [q, n] : pairs) {
    if (q < 0 || q >= num_q || n < 0 || static_cast<std::size_t>(n) >= gt_boxes.size()) {
      throw std::out_of_range("box pair out of range");
    }
    const Box& p = pred[static_cast<std::size_t>(q)];
    const Box& g = gt_boxes[static_cast<std::size_t>(n)];
    const double diff[4] = {p.cx - g.cx, p.cy - g.cy, p.w - g.w, p.h - g.h};
    for (int k = 0; k < 4; ++k) {
      out.l1 += std::abs(diff[k]);
      if (grad_l1) (*grad_l1)(q, k) += (diff[k] > 0.0 ? 1.0 : (diff[k] < 0.0 ? -1.0 : 0.0));
    }
    out.giou += 1.0 - giou(p, g);
    if (grad_giou) grad_giou->row(q) -= giou_grad(p, g).transpose();
  }
  out.l1 /= normalizer;
  out.giou /= normalizer;
  if (grad_l1) *grad_l1 /= normalizer;
  if (grad_giou) *grad_giou /= normalizer;
  return out;
}

LayerMatches match_layer(const LayerPrediction& pred, const GroundTruth& gt,
                         const MatcherConfig& cfg) {
  const GroundTruthView gt_view{gt.classes, gt.boxes};
  const Eigen::MatrixXd o2o_prob = pred.o2o.probabilities();
  LayerMatches m;
  m.o2o = hungarian(o2o_cost_matrix({o2o_prob, pred.o2o.boxes}, gt_view, cfg));
  const Eigen::MatrixXd o2m_prob = pred.o2m.probabilities();
  m.o2m = one_to_many_match({o2m_prob, pred.o2m.boxes}, gt_view, m.o2o, cfg);
  return m;
}

namespace {

std::vector<std::pair<int, int>> class_targets(std::span<const std::pair<int, int>> pairs,
                                               const GroundTruth& gt) {
  std::vector<std::pair<int, int>> out;
  out.reserve(pairs.size());
  for (const auto& [q, n] : pairs) out.emplace_back(q, gt.classes.at(static_cast<std::size_t>(n)));
  return out;
}

void zero_block(BlockGrad& g, const PredictionBlock& p) {
  g.logits.setZero(p.logits.rows(), p.logits.cols());
  g.boxes.setZero(p.logits.rows(), 4);
}

}  // namespace

LayerLoss one_to_one_loss(const PredictionBlock& pred, const GroundTruth& gt,
                          const OneToOneMatch& match, const LossConfig& cfg, BlockGrad* grad) {
  const double norm = positive_normalizer(gt.size());
  LayerLoss out;
  if (grad) zero_block(*grad, pred);
  if (cfg.w_cls_o2o != 0.0) {
    const auto targets = class_targets(match.pairs, gt);
    Eigen::MatrixXd g;
    out.cls_o2o = cls_loss(pred.logits, targets, norm, cfg, grad ? &g : nullptr);
    if (grad) grad->logits += cfg.w_cls_o2o * g;
  }
  Eigen::MatrixXd g_l1, g_giou;
  const BoxLoss box = box_loss(pred.boxes, match.pairs, gt.boxes, norm, grad ? &g_l1 : nullptr,
                               grad ? &g_giou : nullptr);
  out.o2o_l1 = out.box_l1 = box.l1;
  out.o2o_giou = out.box_giou = box.giou;
  if (grad) grad->boxes += cfg.w_l1 * g_l1 + cfg.w_giou * g_giou;
  out.total = cfg.w_cls_o2o * out.cls_o2o + cfg.w_l1 * out.box_l1 + cfg.w_giou * out.box_giou;
  return out;
}

LayerLoss mixed_layer_loss(const LayerPrediction& pred, const GroundTruth& gt,
                           const LayerMatches& matches, const LossConfig& cfg, LayerGrad* grad) {
  LayerLoss out = one_to_one_loss(pred.o2o, gt, matches.o2o, cfg, grad ? &grad->o2o : nullptr);
  if (grad) zero_block(grad->o2m, pred.o2m);

  const auto o2m_pairs = matches.o2m.pairs();
  const double norm = cfg.o2m_norm == Normalization::kPerPairCount
                          ? positive_normalizer(o2m_pairs.size())
                          : positive_normalizer(gt.size());

  if (cfg.w_cls_o2m != 0.0) {
    const auto targets = class_targets(o2m_pairs, gt);
    Eigen::MatrixXd g;
    out.cls_o2m = cls_loss(pred.o2m.logits, targets, norm, cfg, grad ? &g : nullptr);
    if (grad) grad->o2m.logits += cfg.w_cls_o2m * g;
  }

  // The one-to-one member of each set is regressed through the one-to-one
  // box prediction above; the remaining members use the one-to-many boxes.
  const std::vector<int> o2o_query = matches.o2o.query_of_gt();
  std::vector<std::pair<int, int>> extra;
  for (const auto& [q, n] : o2m_pairs) {
    if (static_cast<std::size_t>(n) < o2o_query.size() && o2o_query[n] == q) continue;
    extra.emplace_back(q, n);
  }
  Eigen::MatrixXd g_l1, g_giou;
  const BoxLoss box = box_loss(pred.o2m.boxes, extra, gt.boxes, norm, grad ? &g_l1 : nullptr,
                               grad ? &g_giou : nullptr);
  out.box_l1 += box.l1;
  out.box_giou += box.giou;
  if (grad) grad->o2m.boxes += cfg.w_l1 * g_l1 + cfg.w_giou * g_giou;

  // Accumulated onto the one-to-one total; zero terms leave it unchanged.
  out.total += cfg.w_cls_o2m * out.cls_o2m;
  out.total += cfg.w_l1 * box.l1 + cfg.w_giou * box.giou;
  return out;
}

LossBreakdown total_loss_with_matches(const LayerPredictions& preds, const GroundTruth& gt,
                                      std::span<const LayerMatches> matches,
                                      const LossConfig& cfg, std::vector<LayerGrad>* grads) {
  if (matches.size() != preds.layers.size()) {
    throw std::invalid_argument("one match set per decoder layer required");
  }
  LossBreakdown out;
  out.per_layer.reserve(preds.layers.size());
  if (grads) grads->assign(preds.layers.size(), {});
  for (std::size_t l = 0; l < preds.layers.size(); ++l) {
    out.per_layer.push_back(
        mixed_layer_loss(preds.layers[l], gt, matches[l], cfg, grads ? &(*grads)[l] : nullptr));
    out.total += out.per_layer.back().total;
  }
  return out;
}

LossBreakdown total_loss(const LayerPredictions& preds, const GroundTruth& gt,
                         const LossConfig& cfg, const MatcherConfig& matcher_cfg,
                         std::vector<LayerGrad>* grads, std::vector<LayerMatches>* matches_out) {
  std::vector<LayerMatches> matches;
  matches.reserve(preds.layers.size());
  for (const auto& layer : preds.layers) matches.push_back(match_layer(layer, gt, matcher_cfg));
  LossBreakdown out = total_loss_with_matches(preds, gt, matches, cfg, grads);
  if (matches_out) *matches_out = std::move(matches);
  return out;
}

}  // namespace msdetr
