// SPDX-License-Identifier: Apache-2.0
// msdetr: dataset generation, training, evaluation and experiment runner.
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "msdetr/harness.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kUsageError = 1;
constexpr int kRuntimeError = 2;

void require_file(const std::string& path) {
  if (!fs::exists(path)) throw std::runtime_error("no such file: " + path);
}

void emit(const json& j, const std::string& out) {
  if (out.empty() || out == "-") {
    std::cout << j.dump(2) << "\n";
    return;
  }
  std::ofstream f(out);
  if (!f) throw std::runtime_error("cannot write " + out);
  f << j.dump(2) << "\n";
}

std::vector<msdetr::Scene> select(std::vector<msdetr::Scene> scenes, int limit) {
  if (limit >= 0 && static_cast<std::size_t>(limit) < scenes.size()) scenes.resize(static_cast<std::size_t>(limit));
  return scenes;
}

}  // namespace

int main(int argc, char** argv) {
  const msdetr::TrainConfig defaults;
  CLI::App app{"Mixed one-to-one / one-to-many supervised detection transformer, desk scale"};
  app.set_version_flag("--version", msdetr::kToolVersion);
  app.require_subcommand(1);

  // gen-data
  msdetr::DatasetSpec spec;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic shapes dataset archive");
  gen->add_option("--seed", spec.seed, "Master seed")->capture_default_str();
  gen->add_option("--num-scenes", spec.num_scenes, "Number of scenes")->capture_default_str();
  gen->add_option("--height", spec.height, "Image height")->capture_default_str();
  gen->add_option("--width", spec.width, "Image width")->capture_default_str();
  gen->add_option("--num-classes", spec.num_classes, "Shape classes (circle, square, triangle, diamond)")
      ->capture_default_str();
  gen->add_option("--max-objects", spec.max_objects, "Maximum objects per scene")->capture_default_str();
  gen->add_option("--min-size", spec.min_size, "Minimum object size, fraction of the shorter side")
      ->capture_default_str();
  gen->add_option("--max-size", spec.max_size, "Maximum object size")->capture_default_str();
  gen->add_flag("--occlusion", spec.allow_occlusion, "Allow overlapping objects");
  gen->add_option("--noise", spec.noise, "Background noise amplitude")->capture_default_str();
  gen->add_option("--out", gen_out, "Output archive")->required();

  // train
  std::string config_path, run_dir;
  std::vector<std::string> overrides;
  std::string train_data, val_data;
  auto* tr = app.add_subcommand("train", "Train a model; writes checkpoint, metrics and manifest");
  tr->add_option("--config", config_path, "JSON config file or run manifest");
  tr->add_option("--set", overrides,
                 "Dotted override, e.g. matcher.top_k=4 (defaults: matcher.top_k=" +
                     std::to_string(defaults.matcher.top_k) + ", matcher.tau=" +
                     CLI::detail::to_string(defaults.matcher.tau) + ", matcher.alpha=" +
                     CLI::detail::to_string(defaults.matcher.alpha) + ")");
  tr->add_option("--train-data", train_data, "Training archive (overrides train_data)");
  tr->add_option("--val-data", val_data, "Validation archive (overrides val_data)");
  tr->add_option("--run-dir", run_dir, "Output directory")->required();
  auto* tr_defaults = tr->add_option_group("defaults", "TrainConfig defaults");
  int d_epochs = defaults.epochs, d_batch = defaults.batch_size, d_k = defaults.matcher.top_k;
  double d_lr = defaults.lr, d_tau = defaults.matcher.tau, d_alpha = defaults.matcher.alpha;
  tr_defaults->add_option("--epochs", d_epochs, "Epochs")->capture_default_str();
  tr_defaults->add_option("--batch-size", d_batch, "Batch size")->capture_default_str();
  tr_defaults->add_option("--lr", d_lr, "Learning rate")->capture_default_str();
  tr_defaults->add_option("--top-k", d_k, "One-to-many top K")->capture_default_str();
  tr_defaults->add_option("--tau", d_tau, "One-to-many score threshold")->capture_default_str();
  tr_defaults->add_option("--alpha", d_alpha, "Match score class weight")->capture_default_str();

  // eval
  std::string ckpt, data, out;
  int limit = -1, k = defaults.candidate_k;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint; prints a JSON report");
  std::string predictions;
  auto* ev_ckpt = ev->add_option("--checkpoint", ckpt, "Checkpoint file");
  auto* ev_pred = ev->add_option("--predictions", predictions, "Score a JSON predictions file instead");
  ev_ckpt->excludes(ev_pred);
  ev->add_option("--data", data, "Dataset archive")->required();
  ev->add_option("--k", k, "Candidates per object for the candidate IoU")->capture_default_str();
  ev->add_option("--limit", limit, "Use only the first N scenes");
  ev->add_option("--out", out, "Write the report here instead of stdout");

  // candidates
  std::string cand_dir;
  int scale = 4;
  auto* cd = app.add_subcommand("candidates", "Dump per-scene top-k candidates and overlay images");
  cd->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  cd->add_option("--data", data, "Dataset archive")->required();
  cd->add_option("--k", k, "Candidates per object")->capture_default_str();
  cd->add_option("--limit", limit, "Use only the first N scenes")->capture_default_str();
  cd->add_option("--scale", scale, "Overlay upscaling factor")->capture_default_str();
  cd->add_option("--out-dir", cand_dir, "Output directory")->required();

  // match-debug
  int scene_index = 0, layer = -1;
  msdetr::MatcherConfig mcfg;
  auto* md = app.add_subcommand("match-debug", "Print the one-to-one and one-to-many assignment of a scene");
  md->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  md->add_option("--data", data, "Dataset archive")->required();
  md->add_option("--scene", scene_index, "Scene position in the archive")->capture_default_str();
  md->add_option("--layer", layer, "Decoder layer, negative counts from the end")->capture_default_str();
  md->add_option("--top-k", mcfg.top_k, "K")->capture_default_str();
  md->add_option("--tau", mcfg.tau, "Score threshold")->capture_default_str();
  md->add_option("--alpha", mcfg.alpha, "Class weight in the match score")->capture_default_str();
  md->add_option("--out", out, "Write JSON here instead of stdout");

  // experiment
  std::string exp_config, exp_out;
  std::vector<std::string> exp_overrides;
  std::vector<std::uint64_t> seeds;
  bool only_directional = false, only_ablation = false;
  auto* ex = app.add_subcommand("experiment", "Run the baseline/MS comparison and the ablations");
  ex->add_option("--config", exp_config, "Experiment JSON {base, seeds, directional, ablation, ablation_seeds}");
  ex->add_option("--set", exp_overrides, "Dotted override of the experiment JSON, e.g. base.epochs=2");
  ex->add_option("--seeds", seeds, "Seeds for the directional comparison");
  ex->add_flag("--directional-only", only_directional, "Skip the ablation runs");
  ex->add_flag("--ablation-only", only_ablation, "Skip the directional comparison");
  ex->add_option("--out-dir", exp_out, "Output directory")->required();

  // plot-data
  std::vector<std::string> runs;
  std::string plot_out;
  auto* pd = app.add_subcommand("plot-data", "Convert run metrics into per-curve CSV files");
  pd->add_option("--runs", runs, "Run directories")->required();
  pd->add_option("--out-dir", plot_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsageError;
  }

  try {
    if (*gen) {
      spec.validate();
      msdetr::save_scenes(msdetr::generate(spec), gen_out);
      std::cerr << "wrote " << spec.num_scenes << " scenes to " << gen_out << "\n";
    } else if (*tr) {
      std::optional<fs::path> file;
      if (!config_path.empty()) {
        require_file(config_path);
        file = config_path;
      }
      std::vector<std::string> all;
      auto add = [&](CLI::Option* opt, const std::string& key, const std::string& value) {
        if (opt->count()) all.push_back(key + "=" + value);
      };
      add(tr->get_option("--epochs"), "epochs", std::to_string(d_epochs));
      add(tr->get_option("--batch-size"), "batch_size", std::to_string(d_batch));
      add(tr->get_option("--lr"), "lr", CLI::detail::to_string(d_lr));
      add(tr->get_option("--top-k"), "matcher.top_k", std::to_string(d_k));
      add(tr->get_option("--tau"), "matcher.tau", CLI::detail::to_string(d_tau));
      add(tr->get_option("--alpha"), "matcher.alpha", CLI::detail::to_string(d_alpha));
      if (!train_data.empty()) all.push_back("train_data=\"" + train_data + "\"");
      if (!val_data.empty()) all.push_back("val_data=\"" + val_data + "\"");
      all.insert(all.end(), overrides.begin(), overrides.end());
      const msdetr::TrainConfig cfg = msdetr::resolve_config(file, all);
      if (cfg.train_data.empty()) throw std::invalid_argument("train_data is not set");
      require_file(cfg.train_data);
      if (!cfg.val_data.empty()) require_file(cfg.val_data);
      const auto result = msdetr::train(cfg, run_dir, nullptr, nullptr, [](const msdetr::EpochSummary& e) {
        std::cerr << "epoch " << e.epoch << " cls_o2o " << e.cls_o2o << " o2o_l1 " << e.o2o_l1
                  << " o2o_giou " << e.o2o_giou << " total " << e.total << " (" << e.seconds << " s)\n";
      });
      if (!result.evals.empty()) std::cout << json(result.evals.back().second).dump(2) << "\n";
    } else if (*ev) {
      if (ckpt.empty() && predictions.empty()) {
        throw std::invalid_argument("eval needs --checkpoint or --predictions");
      }
      require_file(data);
      const auto scenes = select(msdetr::load_scenes(data), limit);
      if (!predictions.empty()) {
        require_file(predictions);
        std::ifstream f(predictions);
        emit(msdetr::evaluate_predictions(json::parse(f), scenes, k), out);
      } else {
        require_file(ckpt);
        msdetr::Model model = msdetr::load_checkpoint(ckpt);
        emit(msdetr::evaluate(model, scenes, k), out);
      }
    } else if (*cd) {
      require_file(ckpt);
      require_file(data);
      msdetr::Model model = msdetr::load_checkpoint(ckpt);
      const auto scenes = select(msdetr::load_scenes(data), limit < 0 ? 16 : limit);
      msdetr::dump_candidates(model, scenes, k, cand_dir, scale);
      std::cerr << "wrote " << scenes.size() << " scenes to " << cand_dir << "\n";
    } else if (*md) {
      require_file(ckpt);
      require_file(data);
      msdetr::Model model = msdetr::load_checkpoint(ckpt);
      const auto scenes = msdetr::load_scenes(data);
      if (scene_index < 0 || static_cast<std::size_t>(scene_index) >= scenes.size()) {
        std::cerr << "--scene must be in [0, " << scenes.size() << ")\n";
        return kUsageError;
      }
      emit(msdetr::match_debug(model, scenes[static_cast<std::size_t>(scene_index)], mcfg, layer), out);
    } else if (*ex) {
      json j = msdetr::ExperimentConfig{};
      if (!exp_config.empty()) {
        require_file(exp_config);
        std::ifstream f(exp_config);
        j.merge_patch(json::parse(f));
      }
      for (const auto& o : exp_overrides) msdetr::apply_override(j, o);
      auto cfg = j.get<msdetr::ExperimentConfig>();
      if (!seeds.empty()) cfg.seeds = seeds;
      if (only_directional) cfg.ablation = false;
      if (only_ablation) cfg.directional = false;
      if (!cfg.base.train_data.empty()) require_file(cfg.base.train_data);
      if (!cfg.base.val_data.empty()) require_file(cfg.base.val_data);
      const auto report = msdetr::experiment_suite(
          cfg, exp_out, [](const std::string& line) { std::cerr << line << "\n"; });
      std::cout << report.summary.dump(2) << "\n";
    } else if (*pd) {
      std::vector<fs::path> dirs(runs.begin(), runs.end());
      for (const auto& d : dirs) require_file((d / "metrics.csv").string());
      msdetr::plot_data(dirs, plot_out);
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return 0;
}
