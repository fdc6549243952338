// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "msdetr/eval.hpp"
#include "msdetr/matching.hpp"
#include "msdetr/model.hpp"
#include "msdetr/supervision.hpp"
#include "msdetr/synthdata.hpp"

namespace msdetr {

inline constexpr const char* kToolVersion = "0.3.0";

struct TrainConfig {
  int epochs = 20;
  int batch_size = 8;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double clip_norm = 0.1;
  std::uint64_t seed = 0;
  ModelConfig model;
  MatcherConfig matcher;
  LossConfig loss;
  std::string train_data;
  std::string val_data;
  int eval_interval = 0;  // epochs between validation passes; 0 = last epoch only
  int candidate_k = 20;
  bool deterministic = true;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Applies `path.to.key=value` to a JSON object. The value is parsed as JSON
/// and falls back to a plain string.
void apply_override(nlohmann::json& j, const std::string& assignment);

/// defaults <- file (if given) <- overrides.
TrainConfig resolve_config(const std::optional<std::filesystem::path>& file,
                           std::span<const std::string> overrides);

/// Switches mixed supervision off: tau = 1, no one-to-many classification.
TrainConfig baseline_of(TrainConfig cfg);

/// Mean of the final-layer one-to-one terms over the steps of one epoch.
struct EpochSummary {
  int epoch = 0;
  double cls_o2o = 0.0;
  double cls_o2m = 0.0;
  double o2o_l1 = 0.0;
  double o2o_giou = 0.0;
  double total = 0.0;
  double seconds = 0.0;
};

struct EvalReport {
  ApReport ap;
  CandidateStats candidates;
  int candidate_k = 20;
  int num_images = 0;
  int num_objects = 0;
};

void to_json(nlohmann::json& j, const EvalReport& r);

struct TrainResult {
  std::vector<EpochSummary> epochs;
  std::vector<std::pair<int, EvalReport>> evals;  // (epoch, report)
  std::filesystem::path checkpoint;
};

/// Raised when a loss becomes non-finite.
class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(long step, const LossBreakdown& last_finite, const std::string& what)
      : std::runtime_error(what), step_(step), last_finite_(last_finite) {}
  long step() const { return step_; }
  const LossBreakdown& last_finite() const { return last_finite_; }

 private:
  long step_;
  LossBreakdown last_finite_;
};

using ProgressFn = std::function<void(const EpochSummary&)>;

/// Trains on cfg.train_data (or `train` if non-empty), writing metrics.csv,
/// epochs.csv, eval.csv, checkpoint.bin and manifest.json into run_dir.
TrainResult train(const TrainConfig& cfg, const std::filesystem::path& run_dir,
                  const std::vector<Scene>* train = nullptr,
                  const std::vector<Scene>* val = nullptr, const ProgressFn& progress = {});

/// One optimization step on a batch; returns the batch-mean breakdown.
LossBreakdown train_step(Model& model, nn::AdamW& opt, std::span<const Scene* const> batch,
                         const TrainConfig& cfg);

EvalReport evaluate(Model& model, std::span<const Scene> scenes, int candidate_k = 20);

/// Scores precomputed detections:
///   {"images": [{"scene_id": i, "detections": [{"class": c, "score": s,
///     "box": [cx, cy, w, h]}], "candidates": [[cx, cy, w, h], ...]}]}
/// with one entry per scene in archive order. Candidate IoU is reported only
/// when every entry lists candidates.
EvalReport evaluate_predictions(const nlohmann::json& predictions, std::span<const Scene> scenes,
                                int candidate_k = 20);

/// Per-scene candidate JSON and overlay PNGs (ground truth in green, the top-k
/// candidates of each object shaded by IoU).
void dump_candidates(Model& model, std::span<const Scene> scenes, int k,
                     const std::filesystem::path& out_dir, int overlay_scale = 4);

/// Both assignments of one scene at one decoder layer.
nlohmann::json match_debug(Model& model, const Scene& scene, const MatcherConfig& cfg, int layer);

struct ExperimentConfig {
  TrainConfig base;
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  bool directional = true;
  bool ablation = true;
  std::vector<std::uint64_t> ablation_seeds = {0};
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

struct RunRecord {
  std::string name;
  std::string group;  // "directional", "variant", "sharing"
  std::uint64_t seed = 0;
  TrainConfig config;
  EpochSummary final_epoch;
  EvalReport eval;
};

struct ExperimentReport {
  std::vector<RunRecord> runs;
  nlohmann::json summary;
};

/// Runs the configured comparisons; writes report.json and report.md.
ExperimentReport experiment_suite(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                                  const std::function<void(const std::string&)>& log = {});

/// Per-epoch curves from run directories: fig_losses.csv and fig_ap.csv.
void plot_data(std::span<const std::filesystem::path> run_dirs,
               const std::filesystem::path& out_dir);

}  // namespace msdetr
