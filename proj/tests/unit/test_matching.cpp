// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <set>
#include <vector>

#include "doctest.h"
#include "msdetr/matching.hpp"
#include "support/oracles.hpp"

using namespace msdetr;
using oracle::Brute;
using oracle::brute_force;
using oracle::naive_one_to_many;

namespace {

std::vector<int> queries(const OneToOneMatch& m) {
  std::vector<int> out;
  for (std::size_t n = 0; n < m.pairs.size(); ++n) {
    REQUIRE(m.pairs[n].second == static_cast<int>(n));
    out.push_back(m.pairs[n].first);
  }
  return out;
}

Box random_box(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> c(0.1, 0.9), s(0.05, 0.5);
  return {c(rng), c(rng), s(rng), s(rng)};
}

using Instance = oracle::MatchInstance;

Instance random_instance(std::mt19937_64& rng, int q, int n, int c) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Instance in;
  in.scores.resize(q, c);
  for (int i = 0; i < q; ++i) {
    for (int k = 0; k < c; ++k) in.scores(i, k) = u(rng);
    in.boxes.push_back(random_box(rng));
  }
  for (int i = 0; i < n; ++i) {
    in.classes.push_back(static_cast<int>(rng() % static_cast<unsigned>(c)));
    // Half the ground truths sit on top of a prediction so IoUs are not all tiny.
    in.gt_boxes.push_back(u(rng) < 0.5 ? in.boxes[rng() % static_cast<unsigned>(q)] : random_box(rng));
  }
  return in;
}

OneToManyAssignment run(const Instance& in, const MatcherConfig& cfg, OneToOneMatch* o2o_out = nullptr) {
  const PredictionView pv{in.scores, in.boxes};
  const GroundTruthView gv{in.classes, in.gt_boxes};
  const OneToOneMatch o2o = hungarian(o2o_cost_matrix(pv, gv, cfg));
  if (o2o_out) *o2o_out = o2o;
  return one_to_many_match(pv, gv, o2o, cfg);
}

std::set<int> members(const std::vector<ScoredQuery>& s) {
  std::set<int> out;
  for (const auto& m : s) out.insert(m.query);
  return out;
}

}  // namespace

TEST_CASE("one-to-one cost matrix") {
  Eigen::MatrixXd scores(1, 2);
  scores << 0.3, 1.0;
  const std::vector<Box> boxes{{0.5, 0.5, 0.2, 0.2}};
  const std::vector<int> cls{1};
  const std::vector<Box> gtb{{0.1, 0.2, 0.1, 0.1}};
  MatcherConfig cfg;
  cfg.cost_class = 1;
  cfg.cost_l1 = 0;
  cfg.cost_giou = 0;
  CHECK(o2o_cost_matrix({scores, boxes}, {cls, gtb}, cfg)(0, 0) == doctest::Approx(-1.0));

  cfg.cost_class = 0;
  cfg.cost_l1 = 5;
  cfg.cost_giou = 2;
  CHECK(o2o_cost_matrix({scores, boxes}, {cls, boxes}, cfg)(0, 0) == doctest::Approx(-2.0));

  std::mt19937_64 rng(2);
  const Instance in = random_instance(rng, 6, 4, 3);
  const MatcherConfig def;
  const Eigen::MatrixXd c = o2o_cost_matrix({in.scores, in.boxes}, {in.classes, in.gt_boxes}, def);
  for (int q = 0; q < 6; ++q) {
    for (int n = 0; n < 4; ++n) {
      const Box& p = in.boxes[q];
      const Box& g = in.gt_boxes[n];
      const double l1 = std::abs(p.cx - g.cx) + std::abs(p.cy - g.cy) + std::abs(p.w - g.w) + std::abs(p.h - g.h);
      const double expected = -2.0 * in.scores(q, in.classes[n]) + 5.0 * l1 - 2.0 * giou(p, g);
      CHECK(std::abs(c(q, n) - expected) < 1e-6);
    }
  }

  const std::vector<int> two{0, 1};
  const std::vector<Box> gt2{{0.5, 0.5, 0.2, 0.2}, {0.5, 0.5, 0.2, 0.2}};
  CHECK_THROWS_WITH_AS(o2o_cost_matrix({scores, boxes}, {two, gt2}, def),
                       "more ground truths than queries", std::invalid_argument);
}

TEST_CASE("hungarian fixtures") {
  Eigen::MatrixXd c(2, 2);
  c << 1, 2, 2, 4;
  const OneToOneMatch m = hungarian(c);
  CHECK(queries(m) == std::vector<int>{1, 0});
  CHECK(assignment_cost(c, m) == 4.0);

  Eigen::MatrixXd id = Eigen::MatrixXd::Ones(4, 4) - Eigen::MatrixXd::Identity(4, 4);
  const OneToOneMatch mi = hungarian(id);
  CHECK(queries(mi) == std::vector<int>{0, 1, 2, 3});
  CHECK(assignment_cost(id, mi) == 0.0);

  Eigen::MatrixXd bad = Eigen::MatrixXd::Zero(3, 2);
  bad(1, 1) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(hungarian(bad), std::invalid_argument);
  bad(1, 1) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(hungarian(bad), std::invalid_argument);
  CHECK_THROWS_AS(hungarian(Eigen::MatrixXd::Zero(2, 3)), std::invalid_argument);
  CHECK(hungarian(Eigen::MatrixXd::Zero(3, 0)).pairs.empty());
}

TEST_CASE("hungarian equals brute force on random real matrices") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  for (int t = 0; t < 1000; ++t) {
    Eigen::MatrixXd c(5, 4);
    for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = u(rng);
    const OneToOneMatch m = hungarian(c);
    const Brute b = brute_force(c);
    CHECK(assignment_cost(c, m) == b.best);
    CHECK(queries(m) == b.best_q);
  }
}

TEST_CASE("hungarian tie-break on integer costs") {
  std::mt19937_64 rng(9);
  for (int t = 0; t < 500; ++t) {
    const int q = 1 + static_cast<int>(rng() % 7);
    const int n = static_cast<int>(rng() % static_cast<unsigned>(q + 1));
    Eigen::MatrixXd c(q, n);
    for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = static_cast<double>(rng() % 3);
    const OneToOneMatch m = hungarian(c);
    const Brute b = brute_force(c);
    CHECK(assignment_cost(c, m) == b.best);
    CHECK(queries(m) == b.best_q);
  }
}

TEST_CASE("match score") {
  const std::vector<double> s{0.1, 0.8};
  const Box gt{0.5, 0.5, 0.4, 0.4};
  // Half-width shift along x gives IoU 1/3; use a nested box for IoU 0.5.
  const Box half{0.5, 0.5, 0.4 * std::sqrt(0.5), 0.4 * std::sqrt(0.5)};
  REQUIRE(iou(half, gt) == doctest::Approx(0.5));
  CHECK(match_score(s, half, 1, gt, 0.4) == doctest::Approx(0.62));
  CHECK(match_score(s, {0.1, 0.1, 0.05, 0.05}, 1, gt, 1.0) == doctest::Approx(0.8));
  CHECK(match_score(s, half, 1, gt, 0.0) == doctest::Approx(0.5));
  CHECK_THROWS_AS(match_score(s, half, 2, gt, 0.4), std::out_of_range);
  CHECK_THROWS_AS(match_score(s, half, -1, gt, 0.4), std::out_of_range);
}

TEST_CASE("one-to-many hand-enumerated example") {
  // Class scores [0.9, 0.2, 0.6] and IoUs [0.8, 0.9, 0.1] with alpha 0.5.
  const Box gt{0.5, 0.5, 0.4, 0.4};
  auto nested = [&](double v) { return Box{0.5, 0.5, 0.4 * std::sqrt(v), 0.4 * std::sqrt(v)}; };
  Eigen::MatrixXd scores(3, 1);
  scores << 0.9, 0.2, 0.6;
  const std::vector<Box> boxes{nested(0.8), nested(0.9), nested(0.1)};
  const std::vector<int> cls{0};
  const std::vector<Box> gtb{gt};
  MatcherConfig cfg;
  cfg.alpha = 0.5;
  cfg.top_k = 2;
  cfg.tau = 0.4;
  OneToOneMatch o2o;
  o2o.pairs = {{0, 0}};
  const auto a = one_to_many_match({scores, boxes}, {cls, gtb}, o2o, cfg);
  REQUIRE(a.per_gt.size() == 1);
  REQUIRE(a.per_gt[0].size() == 2);
  CHECK(a.per_gt[0][0].query == 0);
  CHECK(a.per_gt[0][0].score == doctest::Approx(0.85));
  CHECK(a.per_gt[0][1].query == 1);
  CHECK(a.per_gt[0][1].score == doctest::Approx(0.55));

  cfg.top_k = 3;
  cfg.tau = 0.0;
  CHECK(members(one_to_many_match({scores, boxes}, {cls, gtb}, o2o, cfg).per_gt[0]) ==
        std::set<int>{0, 1, 2});

  // The one-to-one partner is exempt from the threshold.
  cfg.top_k = 1;
  cfg.tau = 0.9;
  o2o.pairs = {{2, 0}};
  CHECK(members(one_to_many_match({scores, boxes}, {cls, gtb}, o2o, cfg).per_gt[0]) ==
        std::set<int>{2});
}

TEST_CASE("one-to-many invariants and naive oracle on fuzzed inputs") {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 2000; ++t) {
    const int q = 1 + static_cast<int>(rng() % 12);
    const int n = static_cast<int>(rng() % static_cast<unsigned>(std::min(q, 5) + 1));
    const Instance in = random_instance(rng, q, n, 3);
    MatcherConfig cfg;
    cfg.alpha = u(rng);
    cfg.tau = u(rng) < 0.1 ? 0.0 : u(rng);
    cfg.top_k = 1 + static_cast<int>(rng() % 8);
    cfg.include_o2o = u(rng) < 0.8;
    OneToOneMatch o2o;
    const auto a = run(in, cfg, &o2o);
    const auto expected = naive_one_to_many(in, o2o, cfg);
    REQUIRE(a.per_gt.size() == static_cast<std::size_t>(n));
    std::set<int> seen;
    for (int g = 0; g < n; ++g) {
      const auto& set = a.per_gt[g];
      REQUIRE(set.size() == expected[g].size());
      for (std::size_t i = 0; i < set.size(); ++i) {
        CHECK(set[i].query == expected[g][i].first);
        CHECK(std::abs(set[i].score - expected[g][i].second) < 1e-12);
      }
      CHECK(set.size() <= static_cast<std::size_t>(cfg.top_k) + 1);
      const int partner = o2o.pairs[g].first;
      if (cfg.include_o2o) CHECK(members(set).count(partner) == 1);
      for (const auto& m : set) {
        if (!(cfg.include_o2o && m.query == partner)) CHECK(m.score >= cfg.tau);
        CHECK(seen.insert(m.query).second);
      }
    }
  }
}

TEST_CASE("tau = 1 leaves exactly the one-to-one pairs") {
  std::mt19937_64 rng(21);
  for (int t = 0; t < 200; ++t) {
    const Instance in = random_instance(rng, 8, 1 + static_cast<int>(rng() % 5), 3);
    MatcherConfig cfg;
    cfg.tau = 1.0;
    OneToOneMatch o2o;
    const auto a = run(in, cfg, &o2o);
    for (std::size_t g = 0; g < a.per_gt.size(); ++g) {
      CHECK(members(a.per_gt[g]) == std::set<int>{o2o.pairs[g].first});
    }
  }
}

TEST_CASE("monotonicity in tau and K") {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 500; ++t) {
    const Instance in = random_instance(rng, 10, 1 + static_cast<int>(rng() % 4), 3);
    MatcherConfig lo;
    lo.tau = u(rng);
    lo.include_o2o = u(rng) < 0.5;
    MatcherConfig hi = lo;
    hi.tau = lo.tau + (1.0 - lo.tau) * u(rng);
    const auto a_lo = run(in, lo);
    const auto a_hi = run(in, hi);
    for (std::size_t g = 0; g < a_lo.per_gt.size(); ++g) {
      const auto s_lo = members(a_lo.per_gt[g]), s_hi = members(a_hi.per_gt[g]);
      CHECK(std::includes(s_lo.begin(), s_lo.end(), s_hi.begin(), s_hi.end()));
    }

    MatcherConfig big = lo;
    big.top_k = lo.top_k + 1 + static_cast<int>(rng() % 3);
    std::set<int> u_small, u_big;
    for (const auto& s : run(in, lo).per_gt) for (const auto& m : s) u_small.insert(m.query);
    for (const auto& s : run(in, big).per_gt) for (const auto& m : s) u_big.insert(m.query);
    CHECK(std::includes(u_big.begin(), u_big.end(), u_small.begin(), u_small.end()));
  }
}

TEST_CASE("ranking is invariant to a common positive scale of score inputs") {
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 200; ++t) {
    const Instance in = random_instance(rng, 9, 1, 3);
    const double alpha = u(rng);
    const double factor = 0.01 + 0.99 * u(rng);
    std::vector<double> plain, scaled;
    for (int q = 0; q < 9; ++q) {
      const std::vector<double> row{in.scores(q, 0), in.scores(q, 1), in.scores(q, 2)};
      plain.push_back(match_score(row, in.boxes[q], in.classes[0], in.gt_boxes[0], alpha));
      const double s = factor * in.scores(q, in.classes[0]);
      const double v = factor * iou(in.boxes[q], in.gt_boxes[0]);
      scaled.push_back(alpha * s + (1 - alpha) * v);
    }
    for (int a = 0; a < 9; ++a) {
      for (int b = 0; b < 9; ++b) {
        if (std::abs(plain[a] - plain[b]) < 1e-12) continue;
        CHECK((plain[a] > plain[b]) == (scaled[a] > scaled[b]));
      }
    }
  }
}

TEST_CASE("matcher config validation and JSON") {
  MatcherConfig cfg;
  CHECK(cfg.alpha == 0.4);
  CHECK(cfg.top_k == 6);
  CHECK(cfg.tau == 0.4);
  CHECK(cfg.include_o2o);
  cfg.top_k = 4;
  cfg.class_cost = ClassCostMode::kFocal;
  const nlohmann::json j = cfg;
  const auto back = j.get<MatcherConfig>();
  CHECK(back.top_k == 4);
  CHECK(back.class_cost == ClassCostMode::kFocal);
  CHECK_THROWS_AS(nlohmann::json({{"topk", 3}}).get<MatcherConfig>(), std::invalid_argument);
  CHECK_THROWS_AS(nlohmann::json({{"tau", 1.5}}).get<MatcherConfig>(), std::invalid_argument);
  CHECK_THROWS_AS(nlohmann::json({{"top_k", 0}}).get<MatcherConfig>(), std::invalid_argument);
}
