// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "doctest.h"
#include "msdetr/supervision.hpp"
#include "support/oracles.hpp"

using namespace msdetr;
using namespace msdetr::oracle;

namespace {

Eigen::MatrixXd random_logits(std::mt19937_64& rng, int q, int c, double scale = 3.0) {
  std::normal_distribution<double> n(0.0, scale);
  Eigen::MatrixXd x(q, c);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = n(rng);
  return x;
}

Box random_box(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> c(0.2, 0.8), s(0.05, 0.4);
  return {c(rng), c(rng), s(rng), s(rng)};
}

std::vector<Box> random_boxes(std::mt19937_64& rng, int n) {
  std::vector<Box> out;
  for (int i = 0; i < n; ++i) out.push_back(random_box(rng));
  return out;
}

GroundTruth random_gt(std::mt19937_64& rng, int n, int c) {
  GroundTruth gt;
  for (int i = 0; i < n; ++i) {
    gt.classes.push_back(static_cast<int>(rng() % static_cast<unsigned>(c)));
    gt.boxes.push_back(random_box(rng));
  }
  return gt;
}

PredictionBlock random_block(std::mt19937_64& rng, int q, int c) {
  return {random_logits(rng, q, c, 2.0), random_boxes(rng, q)};
}

LayerPrediction random_layer(std::mt19937_64& rng, int q, int c) {
  return {random_block(rng, q, c), random_block(rng, q, c)};
}

LayerMatches random_matches(std::mt19937_64& rng, const LayerPrediction& pred, const GroundTruth& gt) {
  MatcherConfig cfg;
  cfg.tau = std::uniform_real_distribution<double>(0.0, 0.5)(rng);
  cfg.top_k = 1 + static_cast<int>(rng() % 6);
  return match_layer(pred, gt, cfg);
}

}  // namespace

TEST_CASE("classification loss fixtures") {
  const LossConfig cfg;
  const Eigen::MatrixXd neg = Eigen::MatrixXd::Constant(5, 3, -20.0);
  CHECK(cls_loss(neg, {}, 1.0, cfg) < 1e-6);
  Eigen::MatrixXd one = neg;
  one(2, 1) = 20.0;
  const std::vector<std::pair<int, int>> pos{{2, 1}};
  CHECK(cls_loss(one, pos, 1.0, cfg) < 1e-6);

  const std::vector<std::pair<int, int>> dup{{1, 0}, {1, 2}};
  CHECK_THROWS_AS(cls_loss(neg, dup, 1.0, cfg), std::invalid_argument);
}

TEST_CASE("classification loss matches the scalar oracle") {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 50; ++t) {
    LossConfig cfg;
    cfg.cls_mode = t % 2 ? ClassLossMode::kBce : ClassLossMode::kFocal;
    cfg.focal_gamma = t % 3 == 0 ? 2.0 : 1.5;
    const Eigen::MatrixXd x = random_logits(rng, 4, 3);
    const std::vector<std::pair<int, int>> pos{{0, static_cast<int>(rng() % 3)}, {3, static_cast<int>(rng() % 3)}};
    const double norm = 1.0 + static_cast<double>(rng() % 4);
    CHECK(std::abs(cls_loss(x, pos, norm, cfg) - scalar_cls(x, pos, norm, cfg)) < 1e-6);
  }
}

TEST_CASE("box loss fixtures and scalar oracle") {
  const std::vector<Box> gt{{0.5, 0.5, 0.2, 0.2}, {0.3, 0.4, 0.1, 0.3}};
  const std::vector<std::pair<int, int>> pairs{{0, 0}, {1, 1}};
  const BoxLoss same = box_loss(gt, pairs, gt, 1.0);
  CHECK(same.l1 == doctest::Approx(0.0));
  CHECK(same.giou == doctest::Approx(0.0));

  const std::vector<Box> shifted{{0.6, 0.5, 0.2, 0.2}};
  const std::vector<std::pair<int, int>> one{{0, 0}};
  CHECK(box_loss(shifted, one, gt, 1.0).l1 == doctest::Approx(0.1));
  const BoxLoss empty = box_loss(shifted, {}, gt, 1.0);
  CHECK(empty.l1 == 0.0);
  CHECK(empty.giou == 0.0);

  std::mt19937_64 rng(2);
  for (int t = 0; t < 50; ++t) {
    const auto pred = random_boxes(rng, 6);
    const auto gtb = random_boxes(rng, 3);
    std::vector<std::pair<int, int>> pr;
    for (int q = 0; q < 6; ++q) {
      if (rng() % 2) pr.emplace_back(q, static_cast<int>(rng() % 3));
    }
    const double norm = 1.0 + static_cast<double>(rng() % 5);
    const BoxLoss b = box_loss(pred, pr, gtb, norm);
    const auto [l1, g] = scalar_box(pred, pr, gtb, norm);
    CHECK(std::abs(b.l1 - l1) < 1e-6);
    CHECK(std::abs(b.giou - g) < 1e-6);
  }
}

TEST_CASE("gradient checks: classification and box losses") {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 20;) {
    LossConfig cfg;
    cfg.cls_mode = t % 2 ? ClassLossMode::kBce : ClassLossMode::kFocal;
    PredictionBlock block = random_block(rng, 5, 3);
    const std::vector<std::pair<int, int>> pos{{1, 2}, {4, 0}};
    Eigen::MatrixXd analytic;
    cls_loss(block.logits, pos, 2.0, cfg, &analytic);
    const BlockGrad num = numeric_block(block, [&] { return cls_loss(block.logits, pos, 2.0, cfg); });
    CHECK(rel_err(analytic, num.logits) < 1e-4);

    const auto gtb = random_boxes(rng, 2);
    const std::vector<std::pair<int, int>> pairs{{0, 0}, {3, 1}, {4, 1}};
    if (!smooth(block.boxes, pairs, gtb)) continue;
    ++t;
    Eigen::MatrixXd g_l1, g_giou;
    box_loss(block.boxes, pairs, gtb, 3.0, &g_l1, &g_giou);
    const BlockGrad n_l1 = numeric_block(block, [&] { return box_loss(block.boxes, pairs, gtb, 3.0).l1; });
    const BlockGrad n_giou = numeric_block(block, [&] { return box_loss(block.boxes, pairs, gtb, 3.0).giou; });
    CHECK(rel_err(g_l1, n_l1.boxes) < 1e-4);
    CHECK(rel_err(g_giou, n_giou.boxes) < 1e-4);
  }
}

TEST_CASE("gradient checks: mixed layer and deep-supervised losses") {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 20;) {
    LossConfig cfg;
    cfg.o2m_norm = t % 2 ? Normalization::kPerGtCount : Normalization::kPerPairCount;
    cfg.cls_mode = t % 3 == 0 ? ClassLossMode::kBce : ClassLossMode::kFocal;
    LayerPrediction pred = random_layer(rng, 6, 3);
    const GroundTruth gt = random_gt(rng, 1 + static_cast<int>(rng() % 3), 3);
    const LayerMatches m = random_matches(rng, pred, gt);
    LayerPredictions all{{random_layer(rng, 6, 3), random_layer(rng, 6, 3)}};
    std::vector<LayerMatches> ms{random_matches(rng, all.layers[0], gt), random_matches(rng, all.layers[1], gt)};
    if (!smooth(pred, m, gt) || !smooth(all.layers[0], ms[0], gt) || !smooth(all.layers[1], ms[1], gt)) continue;
    ++t;
    LayerGrad grad;
    mixed_layer_loss(pred, gt, m, cfg, &grad);
    auto f = [&] { return mixed_layer_loss(pred, gt, m, cfg).total; };
    const BlockGrad n_o2o = numeric_block(pred.o2o, f);
    const BlockGrad n_o2m = numeric_block(pred.o2m, f);
    CHECK(rel_err(grad.o2o.logits, n_o2o.logits) < 1e-4);
    CHECK(rel_err(grad.o2o.boxes, n_o2o.boxes) < 1e-4);
    CHECK(rel_err(grad.o2m.logits, n_o2m.logits) < 1e-4);
    CHECK(rel_err(grad.o2m.boxes, n_o2m.boxes) < 1e-4);

    std::vector<LayerGrad> grads;
    total_loss_with_matches(all, gt, ms, cfg, &grads);
    auto ft = [&] { return total_loss_with_matches(all, gt, ms, cfg).total; };
    for (int l = 0; l < 2; ++l) {
      const BlockGrad a = numeric_block(all.layers[l].o2o, ft);
      const BlockGrad b = numeric_block(all.layers[l].o2m, ft);
      CHECK(rel_err(grads[l].o2o.logits, a.logits) < 1e-4);
      CHECK(rel_err(grads[l].o2o.boxes, a.boxes) < 1e-4);
      CHECK(rel_err(grads[l].o2m.logits, b.logits) < 1e-4);
      CHECK(rel_err(grads[l].o2m.boxes, b.boxes) < 1e-4);
    }
  }
}

TEST_CASE("mixed loss reduces to the one-to-one loss") {
  std::mt19937_64 rng(5);
  LossConfig cfg;
  cfg.w_cls_o2m = 0.0;
  MatcherConfig mcfg;
  mcfg.tau = 1.0;
  for (int t = 0; t < 100; ++t) {
    LayerPredictions preds{{random_layer(rng, 8, 3), random_layer(rng, 8, 3), random_layer(rng, 8, 3)}};
    const GroundTruth gt = random_gt(rng, static_cast<int>(rng() % 5), 3);
    std::vector<LayerMatches> matches;
    const LossBreakdown mixed = total_loss(preds, gt, cfg, mcfg, nullptr, &matches);
    double baseline = 0.0;
    for (std::size_t l = 0; l < 3; ++l) {
      const LayerLoss ref = one_to_one_loss(preds.layers[l].o2o, gt, matches[l].o2o, cfg);
      CHECK(mixed.per_layer[l].total == ref.total);
      CHECK(mixed.per_layer[l].cls_o2m == 0.0);
      CHECK(mixed.per_layer[l].box_l1 == ref.box_l1);
      baseline += ref.total;
    }
    CHECK(mixed.total == baseline);
  }
}

TEST_CASE("mixed loss is the sum of its independently computed parts") {
  std::mt19937_64 rng(6);
  for (int t = 0; t < 50; ++t) {
    LossConfig cfg;
    cfg.o2m_norm = t % 2 ? Normalization::kPerGtCount : Normalization::kPerPairCount;
    const LayerPrediction pred = random_layer(rng, 7, 3);
    const GroundTruth gt = random_gt(rng, 1 + static_cast<int>(rng() % 3), 3);
    const LayerMatches m = random_matches(rng, pred, gt);
    const LayerLoss l = mixed_layer_loss(pred, gt, m, cfg);

    const double n = static_cast<double>(gt.size());
    std::vector<std::pair<int, int>> o2o_cls, o2m_cls, extra;
    for (const auto& [q, g] : m.o2o.pairs) o2o_cls.emplace_back(q, gt.classes[g]);
    const auto o2m_pairs = m.o2m.pairs();
    for (const auto& [q, g] : o2m_pairs) {
      o2m_cls.emplace_back(q, gt.classes[g]);
      if (m.o2o.pairs[g].first != q) extra.emplace_back(q, g);
    }
    const double o2m_norm = cfg.o2m_norm == Normalization::kPerPairCount
                                ? static_cast<double>(std::max<std::size_t>(o2m_pairs.size(), 1))
                                : n;
    const double c11 = scalar_cls(pred.o2o.logits, o2o_cls, n, cfg);
    const double c1m = scalar_cls(pred.o2m.logits, o2m_cls, o2m_norm, cfg);
    const auto [l1a, ga] = scalar_box(pred.o2o.boxes, m.o2o.pairs, gt.boxes, n);
    const auto [l1b, gb] = scalar_box(pred.o2m.boxes, extra, gt.boxes, o2m_norm);
    const double expected = 2.0 * c11 + 2.0 * c1m + 5.0 * (l1a + l1b) + 2.0 * (ga + gb);
    CHECK(std::abs(l.total - expected) < 1e-6);
    CHECK(std::abs(l.o2o_l1 - l1a) < 1e-9);
    CHECK(std::abs(l.o2o_giou - ga) < 1e-9);
    CHECK(std::abs(l.total - (cfg.w_cls_o2o * l.cls_o2o + cfg.w_cls_o2m * l.cls_o2m +
                              cfg.w_l1 * l.box_l1 + cfg.w_giou * l.box_giou)) < 1e-6);
  }
}

TEST_CASE("identical one-to-one and one-to-many sets give the one-to-one box loss") {
  std::mt19937_64 rng(7);
  MatcherConfig mcfg;
  mcfg.tau = 1.0;
  LossConfig cfg;
  for (int t = 0; t < 20; ++t) {
    LayerPrediction pred = random_layer(rng, 6, 3);
    pred.o2m = pred.o2o;
    const GroundTruth gt = random_gt(rng, 3, 3);
    const LayerMatches m = match_layer(pred, gt, mcfg);
    const LayerLoss l = mixed_layer_loss(pred, gt, m, cfg);
    const BoxLoss b = box_loss(pred.o2o.boxes, m.o2o.pairs, gt.boxes, 3.0);
    CHECK(l.box_l1 == doctest::Approx(b.l1));
    CHECK(l.box_giou == doctest::Approx(b.giou));
  }
}

TEST_CASE("deep supervision sums layers") {
  std::mt19937_64 rng(8);
  const LossConfig cfg;
  const MatcherConfig mcfg;
  const LayerPrediction layer = random_layer(rng, 6, 3);
  const GroundTruth gt = random_gt(rng, 2, 3);
  const LossBreakdown one = total_loss({{layer}}, gt, cfg, mcfg);
  const LayerMatches m = match_layer(layer, gt, mcfg);
  CHECK(one.total == doctest::Approx(mixed_layer_loss(layer, gt, m, cfg).total));
  const LossBreakdown four = total_loss({{layer, layer, layer, layer}}, gt, cfg, mcfg);
  CHECK(four.total == doctest::Approx(4.0 * one.total));
  double sum = 0.0;
  for (const auto& l : four.per_layer) sum += l.total;
  CHECK(std::abs(sum - four.total) < 1e-6);

  const GroundTruth empty;
  PredictionBlock quiet{Eigen::MatrixXd::Constant(6, 3, -20.0), layer.o2o.boxes};
  const LossBreakdown z = total_loss({{{quiet, quiet}, {quiet, quiet}}}, empty, cfg, mcfg);
  CHECK(z.total < 1e-6);
  CHECK(z.per_layer[0].box_l1 == 0.0);
  CHECK(z.per_layer[0].box_giou == 0.0);
}

TEST_CASE("loss is invariant to a consistent query permutation") {
  std::mt19937_64 rng(9);
  const LossConfig cfg;
  const MatcherConfig mcfg;
  for (int t = 0; t < 50; ++t) {
    const LayerPrediction pred = random_layer(rng, 7, 3);
    const GroundTruth gt = random_gt(rng, 3, 3);
    std::vector<int> perm(7);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    LayerPrediction p2 = pred;
    for (int q = 0; q < 7; ++q) {
      p2.o2o.logits.row(q) = pred.o2o.logits.row(perm[q]);
      p2.o2o.boxes[q] = pred.o2o.boxes[perm[q]];
      p2.o2m.logits.row(q) = pred.o2m.logits.row(perm[q]);
      p2.o2m.boxes[q] = pred.o2m.boxes[perm[q]];
    }
    const double a = total_loss({{pred}}, gt, cfg, mcfg).total;
    const double b = total_loss({{p2}}, gt, cfg, mcfg).total;
    CHECK(a == doctest::Approx(b).epsilon(1e-9));
  }
}

TEST_CASE("losses are finite and nonnegative") {
  std::mt19937_64 rng(10);
  const MatcherConfig mcfg;
  for (int t = 0; t < 200; ++t) {
    LossConfig cfg;
    cfg.cls_mode = t % 2 ? ClassLossMode::kBce : ClassLossMode::kFocal;
    LayerPrediction pred{{random_logits(rng, 6, 3, 30.0), random_boxes(rng, 6)},
                         {random_logits(rng, 6, 3, 30.0), random_boxes(rng, 6)}};
    const GroundTruth gt = random_gt(rng, static_cast<int>(rng() % 4), 3);
    const LossBreakdown b = total_loss({{pred}}, gt, cfg, mcfg);
    for (const auto& l : b.per_layer) {
      for (double v : {l.cls_o2o, l.cls_o2m, l.box_l1, l.box_giou, l.total}) {
        CHECK(std::isfinite(v));
        CHECK(v >= 0.0);
      }
    }
  }
}

TEST_CASE("loss config JSON") {
  LossConfig c;
  c.cls_mode = ClassLossMode::kBce;
  c.o2m_norm = Normalization::kPerGtCount;
  const auto back = nlohmann::json(c).get<LossConfig>();
  CHECK(back.cls_mode == ClassLossMode::kBce);
  CHECK(back.o2m_norm == Normalization::kPerGtCount);
  CHECK_THROWS_AS(nlohmann::json({{"w_l1", -1.0}}).get<LossConfig>(), std::invalid_argument);
  CHECK_THROWS_AS(nlohmann::json({{"cls_mode", "softmax"}}).get<LossConfig>(), std::invalid_argument);
  CHECK_THROWS_AS(nlohmann::json({{"weight", 1}}).get<LossConfig>(), std::invalid_argument);
}
