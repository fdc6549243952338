// SPDX-License-Identifier: Apache-2.0
#include <stdexcept>
#include <string>

#include "json_util.hpp"
#include "msdetr/matching.hpp"
#include "msdetr/supervision.hpp"

namespace msdetr {

void to_json(nlohmann::json& j, const MatcherConfig& c) {
  j = {{"alpha", c.alpha},
       {"top_k", c.top_k},
       {"tau", c.tau},
       {"include_o2o", c.include_o2o},
       {"cost_class", c.cost_class},
       {"cost_l1", c.cost_l1},
       {"cost_giou", c.cost_giou},
       {"class_cost", c.class_cost == ClassCostMode::kFocal ? "focal" : "probability"},
       {"focal_gamma", c.focal_gamma},
       {"focal_alpha", c.focal_alpha}};
}

void from_json(const nlohmann::json& j, MatcherConfig& c) {
  detail::check_keys(j,
                     {"alpha", "top_k", "tau", "include_o2o", "cost_class", "cost_l1",
                      "cost_giou", "class_cost", "focal_gamma", "focal_alpha"},
                     "matcher");
  detail::read_if(j, "alpha", c.alpha);
  detail::read_if(j, "top_k", c.top_k);
  detail::read_if(j, "tau", c.tau);
  detail::read_if(j, "include_o2o", c.include_o2o);
  detail::read_if(j, "cost_class", c.cost_class);
  detail::read_if(j, "cost_l1", c.cost_l1);
  detail::read_if(j, "cost_giou", c.cost_giou);
  detail::read_if(j, "focal_gamma", c.focal_gamma);
  detail::read_if(j, "focal_alpha", c.focal_alpha);
  if (j.contains("class_cost")) {
    const auto mode = j.at("class_cost").get<std::string>();
    if (mode == "probability") {
      c.class_cost = ClassCostMode::kProbability;
    } else if (mode == "focal") {
      c.class_cost = ClassCostMode::kFocal;
    } else {
      throw std::invalid_argument("matcher.class_cost must be 'probability' or 'focal'");
    }
  }
  c.validate();
}

void to_json(nlohmann::json& j, const LossConfig& c) {
  j = {{"w_cls_o2o", c.w_cls_o2o},
       {"w_cls_o2m", c.w_cls_o2m},
       {"w_l1", c.w_l1},
       {"w_giou", c.w_giou},
       {"focal_gamma", c.focal_gamma},
       {"focal_balance", c.focal_balance},
       {"cls_mode", c.cls_mode == ClassLossMode::kFocal ? "focal" : "bce"},
       {"o2m_norm", c.o2m_norm == Normalization::kPerPairCount ? "per_pair_count"
                                                                : "per_gt_count"}};
}

void from_json(const nlohmann::json& j, LossConfig& c) {
  detail::check_keys(j,
                     {"w_cls_o2o", "w_cls_o2m", "w_l1", "w_giou", "focal_gamma",
                      "focal_balance", "cls_mode", "o2m_norm"},
                     "loss");
  detail::read_if(j, "w_cls_o2o", c.w_cls_o2o);
  detail::read_if(j, "w_cls_o2m", c.w_cls_o2m);
  detail::read_if(j, "w_l1", c.w_l1);
  detail::read_if(j, "w_giou", c.w_giou);
  detail::read_if(j, "focal_gamma", c.focal_gamma);
  detail::read_if(j, "focal_balance", c.focal_balance);
  if (j.contains("cls_mode")) {
    const auto mode = j.at("cls_mode").get<std::string>();
    if (mode == "focal") {
      c.cls_mode = ClassLossMode::kFocal;
    } else if (mode == "bce") {
      c.cls_mode = ClassLossMode::kBce;
    } else {
      throw std::invalid_argument("loss.cls_mode must be 'focal' or 'bce'");
    }
  }
  if (j.contains("o2m_norm")) {
    const auto mode = j.at("o2m_norm").get<std::string>();
    if (mode == "per_pair_count") {
      c.o2m_norm = Normalization::kPerPairCount;
    } else if (mode == "per_gt_count") {
      c.o2m_norm = Normalization::kPerGtCount;
    } else {
      throw std::invalid_argument("loss.o2m_norm must be 'per_pair_count' or 'per_gt_count'");
    }
  }
  c.validate();
}

}  // namespace msdetr
