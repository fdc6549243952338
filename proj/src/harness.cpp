// SPDX-License-Identifier: Apache-2.0
#include "msdetr/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "json_util.hpp"

namespace msdetr {

namespace fs = std::filesystem;
using nlohmann::json;

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw std::invalid_argument("lr must be positive");
  if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be >= 0");
  if (clip_norm < 0.0) throw std::invalid_argument("clip_norm must be >= 0");
  if (eval_interval < 0) throw std::invalid_argument("eval_interval must be >= 0");
  if (candidate_k < 1 || candidate_k > model.num_queries) {
    throw std::invalid_argument("candidate_k must be in [1, num_queries]");
  }
  model.validate();
  matcher.validate();
  loss.validate();
}

void to_json(json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"lr", c.lr},
       {"weight_decay", c.weight_decay},
       {"clip_norm", c.clip_norm},
       {"seed", c.seed},
       {"model", c.model},
       {"matcher", c.matcher},
       {"loss", c.loss},
       {"train_data", c.train_data},
       {"val_data", c.val_data},
       {"eval_interval", c.eval_interval},
       {"candidate_k", c.candidate_k},
       {"deterministic", c.deterministic}};
}

void from_json(const json& j, TrainConfig& c) {
  detail::check_keys(j,
                     {"epochs", "batch_size", "lr", "weight_decay", "clip_norm", "seed", "model",
                      "matcher", "loss", "train_data", "val_data", "eval_interval",
                      "candidate_k", "deterministic"},
                     "config");
  detail::read_if(j, "epochs", c.epochs);
  detail::read_if(j, "batch_size", c.batch_size);
  detail::read_if(j, "lr", c.lr);
  detail::read_if(j, "weight_decay", c.weight_decay);
  detail::read_if(j, "clip_norm", c.clip_norm);
  detail::read_if(j, "seed", c.seed);
  detail::read_if(j, "model", c.model);
  detail::read_if(j, "matcher", c.matcher);
  detail::read_if(j, "loss", c.loss);
  detail::read_if(j, "train_data", c.train_data);
  detail::read_if(j, "val_data", c.val_data);
  detail::read_if(j, "eval_interval", c.eval_interval);
  detail::read_if(j, "candidate_k", c.candidate_k);
  detail::read_if(j, "deterministic", c.deterministic);
  c.validate();
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw std::invalid_argument("override '" + assignment + "' is not of the form key=value");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos
                                                                        : dot - start);
    if (key.empty()) throw std::invalid_argument("override '" + assignment + "' has an empty key");
    if (!node->is_object()) {
      throw std::invalid_argument("override '" + assignment + "': '" + key +
                                  "' is not inside an object");
    }
    if (dot == std::string::npos) {
      (*node)[key] = std::move(value);
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

namespace {

json read_json_file(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  try {
    return json::parse(f);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

void write_json_file(const json& j, const fs::path& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << j.dump(2) << "\n";
}

std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

}  // namespace

TrainConfig resolve_config(const std::optional<fs::path>& file,
                           std::span<const std::string> overrides) {
  json j = TrainConfig{};
  if (file) {
    json loaded = read_json_file(*file);
    // A run manifest can stand in for a config file.
    if (loaded.is_object() && loaded.contains("tool_version") && loaded.contains("config")) {
      loaded = loaded.at("config");
    }
    if (!loaded.is_object()) throw std::invalid_argument(file->string() + ": expected an object");
    j.merge_patch(loaded);
  }
  for (const auto& o : overrides) apply_override(j, o);
  return j.get<TrainConfig>();
}

TrainConfig baseline_of(TrainConfig cfg) {
  cfg.matcher.tau = 1.0;
  cfg.loss.w_cls_o2m = 0.0;
  cfg.model.variant = DecoderVariant::from_letter('a');
  cfg.model.share_box_head = true;
  cfg.model.share_cls_head = true;
  return cfg;
}

void to_json(json& j, const EvalReport& r) {
  j = {{"ap50", r.ap.ap50},
       {"ap75", r.ap.ap75},
       {"ap", r.ap.ap},
       {"per_class_ap", r.ap.per_class},
       {"candidate_k", r.candidate_k},
       {"candidate_mean_iou", r.candidates.mean},
       {"candidate_median_iou", r.candidates.median},
       {"num_images", r.num_images},
       {"num_objects", r.num_objects}};
}

// ---------------------------------------------------------------------------
// Training

namespace {

bool finite(const LossBreakdown& b) {
  if (!std::isfinite(b.total)) return false;
  for (const auto& l : b.per_layer) {
    if (!std::isfinite(l.cls_o2o) || !std::isfinite(l.cls_o2m) || !std::isfinite(l.box_l1) ||
        !std::isfinite(l.box_giou)) {
      return false;
    }
  }
  return true;
}

bool finite(const LayerPredictions& p) {
  auto ok = [](const PredictionBlock& b) {
    if (!b.logits.allFinite()) return false;
    for (const Box& x : b.boxes) {
      if (!std::isfinite(x.cx) || !std::isfinite(x.cy) || !std::isfinite(x.w) || !std::isfinite(x.h)) {
        return false;
      }
    }
    return true;
  };
  for (const auto& l : p.layers) {
    if (!ok(l.o2o) || !ok(l.o2m)) return false;
  }
  return true;
}

void scale(BlockGrad& g, double s) {
  g.logits *= s;
  g.boxes *= s;
}

void accumulate(LossBreakdown& acc, const LossBreakdown& b, double w) {
  if (acc.per_layer.empty()) acc.per_layer.resize(b.per_layer.size());
  for (std::size_t l = 0; l < b.per_layer.size(); ++l) {
    LayerLoss& a = acc.per_layer[l];
    const LayerLoss& x = b.per_layer[l];
    a.cls_o2o += w * x.cls_o2o;
    a.cls_o2m += w * x.cls_o2m;
    a.box_l1 += w * x.box_l1;
    a.box_giou += w * x.box_giou;
    a.o2o_l1 += w * x.o2o_l1;
    a.o2o_giou += w * x.o2o_giou;
    a.total += w * x.total;
  }
  acc.total += w * b.total;
}

void check_dataset(const std::vector<Scene>& scenes, const ModelConfig& model, const char* what) {
  for (const Scene& s : scenes) {
    if (s.image.height != model.image_height || s.image.width != model.image_width) {
      throw std::runtime_error(std::string(what) + " scene " + std::to_string(s.scene_id) +
                               " has the wrong image size for the model");
    }
    if (s.objects.size() > static_cast<std::size_t>(model.num_queries)) {
      throw std::runtime_error(std::string(what) + " scene " + std::to_string(s.scene_id) +
                               " has more objects than queries");
    }
    for (const auto& o : s.objects) {
      if (o.class_id < 0 || o.class_id >= model.num_classes) {
        throw std::runtime_error(std::string(what) + " scene " + std::to_string(s.scene_id) +
                                 " uses class " + std::to_string(o.class_id) +
                                 " outside the model's classes");
      }
    }
  }
}

}  // namespace

LossBreakdown train_step(Model& model, nn::AdamW& opt, std::span<const Scene* const> batch,
                         const TrainConfig& cfg) {
  const nn::ParamList params = model.parameters();
  nn::zero_grad(params);
  const double w = 1.0 / static_cast<double>(batch.size());
  LossBreakdown mean;
  for (const Scene* scene : batch) {
    nn::Graph g;
    const Encoded enc = model.encode(g, model.image_input(g, scene->image));
    const auto layers = model.decode(g, enc, true);
    const LayerPredictions preds = collect_predictions(g, layers);
    if (!finite(preds)) {
      throw NonFiniteLoss(opt.steps() + 1, {},
                          "non-finite predictions in scene " + std::to_string(scene->scene_id));
    }
    std::vector<LayerGrad> grads;
    const LossBreakdown b = total_loss(preds, scene->ground_truth(), cfg.loss, cfg.matcher, &grads);
    if (!finite(b)) {
      throw NonFiniteLoss(opt.steps() + 1, {},
                          "non-finite loss in scene " + std::to_string(scene->scene_id));
    }
    for (auto& lg : grads) {
      scale(lg.o2o, w);
      scale(lg.o2m, w);
    }
    seed_gradients(g, layers, grads);
    g.backward();
    accumulate(mean, b, w);
  }
  nn::clip_grad_norm(params, cfg.clip_norm);
  opt.step(params);
  return mean;
}

EvalReport evaluate(Model& model, std::span<const Scene> scenes, int candidate_k) {
  if (scenes.empty()) throw std::invalid_argument("evaluation on an empty dataset");
  std::vector<ImageDetections> dets;
  std::vector<std::vector<Box>> candidates;
  std::vector<GroundTruth> gts;
  dets.reserve(scenes.size());
  for (const Scene& s : scenes) {
    const Detections d = model.predict(s.image);
    dets.push_back(top_detections(d.scores, d.boxes));
    candidates.push_back(d.boxes);
    gts.push_back(s.ground_truth());
  }
  EvalReport r;
  r.ap = evaluate_ap(dets, gts, model.config().num_classes);
  r.candidates = candidate_quality(candidates, gts, candidate_k);
  r.candidate_k = candidate_k;
  r.num_images = static_cast<int>(scenes.size());
  for (const auto& g : gts) r.num_objects += static_cast<int>(g.size());
  return r;
}

namespace {

Box box_from_json(const json& j) {
  if (!j.is_array() || j.size() != 4) throw std::invalid_argument("box must be [cx, cy, w, h]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

}  // namespace

EvalReport evaluate_predictions(const json& predictions, std::span<const Scene> scenes,
                                int candidate_k) {
  if (scenes.empty()) throw std::invalid_argument("evaluation on an empty dataset");
  const json& images = predictions.at("images");
  if (!images.is_array() || images.size() != scenes.size()) {
    throw std::invalid_argument("predictions: expected one entry per scene (" +
                                std::to_string(scenes.size()) + ")");
  }
  std::vector<ImageDetections> dets(scenes.size());
  std::vector<std::vector<Box>> candidates(scenes.size());
  std::vector<GroundTruth> gts;
  bool have_candidates = true;
  int num_classes = 1;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const json& img = images[i];
    if (img.contains("scene_id") && img["scene_id"].get<int>() != scenes[i].scene_id) {
      throw std::invalid_argument("predictions: entry " + std::to_string(i) + " is for scene " +
                                  std::to_string(img["scene_id"].get<int>()));
    }
    for (const json& d : img.value("detections", json::array())) {
      const int c = d.at("class").get<int>();
      if (c < 0) throw std::invalid_argument("predictions: negative class id");
      num_classes = std::max(num_classes, c + 1);
      dets[i].classes.push_back(c);
      dets[i].boxes.push_back({d.at("score").get<double>(), box_from_json(d.at("box"))});
    }
    if (img.contains("candidates")) {
      for (const json& b : img["candidates"]) candidates[i].push_back(box_from_json(b));
    } else {
      have_candidates = false;
    }
    gts.push_back(scenes[i].ground_truth());
    for (int c : gts.back().classes) num_classes = std::max(num_classes, c + 1);
  }
  EvalReport r;
  r.ap = evaluate_ap(dets, gts, num_classes);
  if (have_candidates) r.candidates = candidate_quality(candidates, gts, candidate_k);
  r.candidate_k = have_candidates ? candidate_k : 0;
  r.num_images = static_cast<int>(scenes.size());
  for (const auto& g : gts) r.num_objects += static_cast<int>(g.size());
  return r;
}

TrainResult train(const TrainConfig& cfg, const fs::path& run_dir,
                  const std::vector<Scene>* train_scenes, const std::vector<Scene>* val_scenes,
                  const ProgressFn& progress) {
  cfg.validate();
  std::vector<Scene> loaded_train, loaded_val;
  if (!train_scenes) {
    if (cfg.train_data.empty()) throw std::invalid_argument("train_data is not set");
    loaded_train = load_scenes(cfg.train_data);
    train_scenes = &loaded_train;
  }
  if (!val_scenes && !cfg.val_data.empty()) {
    loaded_val = load_scenes(cfg.val_data);
    val_scenes = &loaded_val;
  }
  if (train_scenes->empty()) throw std::invalid_argument("training set is empty");
  check_dataset(*train_scenes, cfg.model, "training");
  if (val_scenes) check_dataset(*val_scenes, cfg.model, "validation");

  fs::create_directories(run_dir);
  TrainResult result;
  result.checkpoint = run_dir / "checkpoint.bin";
  write_json_file({{"tool_version", kToolVersion},
                   {"timestamp", utc_timestamp()},
                   {"config", cfg},
                   {"artifacts",
                    {{"checkpoint", "checkpoint.bin"},
                     {"metrics", "metrics.csv"},
                     {"epochs", "epochs.csv"},
                     {"eval", "eval.csv"}}}},
                  run_dir / "manifest.json");

  std::ofstream metrics(run_dir / "metrics.csv");
  std::ofstream epochs_csv(run_dir / "epochs.csv");
  std::ofstream eval_csv(run_dir / "eval.csv");
  if (!metrics || !epochs_csv || !eval_csv) {
    throw std::runtime_error("cannot write into " + run_dir.string());
  }
  metrics << std::setprecision(9);
  metrics << "step,epoch,layer,cls_o2o,cls_o2m,box_l1,box_giou,o2o_l1,o2o_giou,total\n";
  epochs_csv << std::setprecision(9);
  epochs_csv << "epoch,cls_o2o,cls_o2m,o2o_l1,o2o_giou,total,seconds\n";
  eval_csv << std::setprecision(9);
  eval_csv << "epoch,ap50,ap75,ap,candidate_mean_iou,candidate_median_iou\n";

  Model model(cfg.model, cfg.seed);
  nn::AdamW opt(cfg.lr, cfg.weight_decay);
  std::mt19937_64 shuffle_rng(cfg.seed ^ 0x5deece66dULL);
  std::vector<const Scene*> order;
  for (const Scene& s : *train_scenes) order.push_back(&s);

  LossBreakdown last_finite;
  long step = 0;
  const std::size_t last_layer = static_cast<std::size_t>(cfg.model.num_decoder_layers - 1);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    EpochSummary summary;
    summary.epoch = epoch;
    int steps_in_epoch = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      const std::span<const Scene* const> batch(order.data() + begin, end - begin);
      LossBreakdown b;
      try {
        b = train_step(model, opt, batch, cfg);
      } catch (const NonFiniteLoss& e) {
        throw NonFiniteLoss(step + 1, last_finite,
                            std::string(e.what()) + " at step " + std::to_string(step + 1) +
                                "; last finite total " + std::to_string(last_finite.total));
      }
      ++step;
      last_finite = b;
      for (std::size_t l = 0; l < b.per_layer.size(); ++l) {
        const LayerLoss& x = b.per_layer[l];
        metrics << step << ',' << epoch << ',' << l << ',' << x.cls_o2o << ',' << x.cls_o2m << ','
                << x.box_l1 << ',' << x.box_giou << ',' << x.o2o_l1 << ',' << x.o2o_giou << ','
                << x.total << '\n';
      }
      const LayerLoss& fin = b.per_layer[last_layer];
      summary.cls_o2o += fin.cls_o2o;
      summary.cls_o2m += fin.cls_o2m;
      summary.o2o_l1 += fin.o2o_l1;
      summary.o2o_giou += fin.o2o_giou;
      summary.total += b.total;
      ++steps_in_epoch;
    }
    summary.cls_o2o /= steps_in_epoch;
    summary.cls_o2m /= steps_in_epoch;
    summary.o2o_l1 /= steps_in_epoch;
    summary.o2o_giou /= steps_in_epoch;
    summary.total /= steps_in_epoch;
    summary.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    epochs_csv << epoch << ',' << summary.cls_o2o << ',' << summary.cls_o2m << ','
               << summary.o2o_l1 << ',' << summary.o2o_giou << ',' << summary.total << ','
               << summary.seconds << '\n';
    epochs_csv.flush();
    metrics.flush();
    result.epochs.push_back(summary);
    save_checkpoint(model, result.checkpoint);

    const bool due = epoch == cfg.epochs || (cfg.eval_interval > 0 && epoch % cfg.eval_interval == 0);
    if (val_scenes && !val_scenes->empty() && due) {
      EvalReport r = evaluate(model, *val_scenes, cfg.candidate_k);
      eval_csv << epoch << ',' << r.ap.ap50 << ',' << r.ap.ap75 << ',' << r.ap.ap << ','
               << r.candidates.mean << ',' << r.candidates.median << '\n';
      eval_csv.flush();
      result.evals.emplace_back(epoch, std::move(r));
    }
    if (progress) progress(summary);
  }
  if (!result.evals.empty()) write_json_file(result.evals.back().second, run_dir / "eval.json");
  return result;
}

// ---------------------------------------------------------------------------
// Candidates and matching dumps

namespace {

json box_json(const Box& b) { return json::array({b.cx, b.cy, b.w, b.h}); }

void draw_rect(Image& img, const Box& box, std::array<std::uint8_t, 3> color, int thickness) {
  const CornerBox c = to_corner(box);
  auto px = [](double v, int extent) {
    return std::clamp(static_cast<int>(std::lround(v * extent)), 0, extent - 1);
  };
  const int x0 = px(c.x0, img.width), x1 = px(c.x1, img.width);
  const int y0 = px(c.y0, img.height), y1 = px(c.y1, img.height);
  auto put = [&](int y, int x) {
    if (y < 0 || x < 0 || y >= img.height || x >= img.width) return;
    for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = color[static_cast<std::size_t>(ch)];
  };
  for (int t = 0; t < thickness; ++t) {
    for (int x = x0; x <= x1; ++x) {
      put(y0 + t, x);
      put(y1 - t, x);
    }
    for (int y = y0; y <= y1; ++y) {
      put(y, x0 + t);
      put(y, x1 - t);
    }
  }
}

Image upscale(const Image& src, int s) {
  Image out(src.height * s, src.width * s);
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = src.at(y / s, x / s, c);
    }
  }
  return out;
}

std::string scene_stem(int scene_id) {
  std::ostringstream s;
  s << "scene_" << std::setw(6) << std::setfill('0') << scene_id;
  return s.str();
}

}  // namespace

void dump_candidates(Model& model, std::span<const Scene> scenes, int k, const fs::path& out_dir,
                     int overlay_scale) {
  if (overlay_scale < 1) throw std::invalid_argument("overlay scale must be >= 1");
  fs::create_directories(out_dir);
  std::vector<std::vector<Box>> all_candidates;
  std::vector<GroundTruth> gts;
  for (const Scene& scene : scenes) {
    const Detections d = model.predict(scene.image);
    json objects = json::array();
    Image overlay = upscale(scene.image, overlay_scale);
    for (const auto& obj : scene.objects) {
      json cands = json::array();
      const auto best = best_candidates(d.boxes, obj.box, k);
      // Worst first so the best candidates are drawn on top.
      for (auto it = best.rbegin(); it != best.rend(); ++it) {
        const auto v = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(it->second, 0.0, 1.0)));
        draw_rect(overlay, d.boxes[static_cast<std::size_t>(it->first)], {255, v, 0}, 1);
      }
      for (const auto& [q, v] : best) {
        cands.push_back({{"query", q},
                         {"iou", v},
                         {"box", box_json(d.boxes[static_cast<std::size_t>(q)])},
                         {"scores", std::vector<double>(d.scores.row(q).data(),
                                                        d.scores.row(q).data() + d.scores.cols())}});
      }
      objects.push_back({{"class", obj.class_id}, {"box", box_json(obj.box)}, {"candidates", cands}});
    }
    for (const auto& obj : scene.objects) draw_rect(overlay, obj.box, {0, 255, 0}, 2);
    write_json_file({{"scene_id", scene.scene_id}, {"k", k}, {"objects", objects}},
                    out_dir / (scene_stem(scene.scene_id) + ".json"));
    write_png(overlay, out_dir / (scene_stem(scene.scene_id) + ".png"));
    all_candidates.push_back(d.boxes);
    gts.push_back(scene.ground_truth());
  }
  const CandidateStats stats = candidate_quality(all_candidates, gts, k);
  write_json_file({{"k", k},
                   {"num_scenes", scenes.size()},
                   {"num_objects", stats.per_gt.size()},
                   {"mean_iou", stats.mean},
                   {"median_iou", stats.median}},
                  out_dir / "summary.json");
}

json match_debug(Model& model, const Scene& scene, const MatcherConfig& cfg, int layer) {
  cfg.validate();
  const int layers_total = model.config().num_decoder_layers;
  if (layer < 0) layer += layers_total;
  if (layer < 0 || layer >= layers_total) {
    throw std::invalid_argument("layer must be in [0, " + std::to_string(layers_total) + ")");
  }
  nn::Graph g;
  const Encoded enc = model.encode(g, model.image_input(g, scene.image));
  const auto vars = model.decode(g, enc, true);
  const LayerPredictions preds = collect_predictions(g, vars);
  const LayerMatches m = match_layer(preds.layers[static_cast<std::size_t>(layer)],
                                     scene.ground_truth(), cfg);
  json o2o = json::object();
  for (const auto& [q, n] : m.o2o.pairs) o2o[std::to_string(n)] = q;
  json assignment = json::object();
  for (std::size_t n = 0; n < m.o2m.per_gt.size(); ++n) {
    json members = json::array();
    for (const auto& sq : m.o2m.per_gt[n]) members.push_back({sq.query, sq.score});
    assignment[std::to_string(n)] = members;
  }
  return {{"scene_id", scene.scene_id},
          {"layer", layer},
          {"matcher", cfg},
          {"o2o", o2o},
          {"assignment", assignment}};
}

// ---------------------------------------------------------------------------
// Experiments

void to_json(json& j, const ExperimentConfig& c) {
  j = {{"base", c.base},
       {"seeds", c.seeds},
       {"directional", c.directional},
       {"ablation", c.ablation},
       {"ablation_seeds", c.ablation_seeds}};
}

void from_json(const json& j, ExperimentConfig& c) {
  detail::check_keys(j, {"base", "seeds", "directional", "ablation", "ablation_seeds"},
                     "experiment");
  if (j.contains("base")) {
    json base = TrainConfig{};
    base.merge_patch(j.at("base"));
    c.base = base.get<TrainConfig>();
  }
  detail::read_if(j, "seeds", c.seeds);
  detail::read_if(j, "directional", c.directional);
  detail::read_if(j, "ablation", c.ablation);
  detail::read_if(j, "ablation_seeds", c.ablation_seeds);
  if (c.directional && c.seeds.empty()) throw std::invalid_argument("experiment: no seeds");
  if (c.ablation && c.ablation_seeds.empty()) {
    throw std::invalid_argument("experiment: no ablation seeds");
  }
}

namespace {

struct PlannedRun {
  std::string name;
  std::string group;
  std::uint64_t seed;
  TrainConfig config;
};

std::string sharing_name(bool box, bool cls) {
  if (box && cls) return "share_both";
  if (box) return "share_box";
  if (cls) return "share_cls";
  return "share_none";
}

json run_row(const RunRecord& r, const LossConfig& weights) {
  return {{"name", r.name},
          {"group", r.group},
          {"seed", r.seed},
          {"variant", std::string(1, r.config.model.variant.letter())},
          {"share_box_head", r.config.model.share_box_head},
          {"share_cls_head", r.config.model.share_cls_head},
          {"tau", r.config.matcher.tau},
          {"w_cls_o2m", r.config.loss.w_cls_o2m},
          {"ap50", r.eval.ap.ap50},
          {"ap75", r.eval.ap.ap75},
          {"ap", r.eval.ap.ap},
          {"final_cls_o2o", r.final_epoch.cls_o2o},
          {"final_cls_o2m", r.final_epoch.cls_o2m},
          {"final_o2o_l1", r.final_epoch.o2o_l1},
          {"final_o2o_giou", r.final_epoch.o2o_giou},
          {"final_o2o_reg",
           weights.w_l1 * r.final_epoch.o2o_l1 + weights.w_giou * r.final_epoch.o2o_giou},
          {"candidate_mean_iou", r.eval.candidates.mean},
          {"candidate_median_iou", r.eval.candidates.median}};
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision) << v;
  return s.str();
}

}  // namespace

ExperimentReport experiment_suite(const ExperimentConfig& cfg, const fs::path& out_dir,
                                  const std::function<void(const std::string&)>& log) {
  cfg.base.validate();
  if (cfg.base.val_data.empty()) throw std::invalid_argument("experiment needs val_data");
  const std::vector<Scene> train_set = load_scenes(cfg.base.train_data);
  const std::vector<Scene> val_set = load_scenes(cfg.base.val_data);
  if (val_set.empty()) throw std::invalid_argument("validation set is empty");

  std::vector<PlannedRun> plan;
  if (cfg.directional) {
    for (auto seed : cfg.seeds) {
      TrainConfig ms = cfg.base;
      ms.seed = seed;
      plan.push_back({"baseline", "directional", seed, baseline_of(ms)});
      plan.push_back({"ms", "directional", seed, ms});
    }
  }
  if (cfg.ablation) {
    for (auto seed : cfg.ablation_seeds) {
      for (char v : {'a', 'b', 'c', 'd'}) {
        TrainConfig c = cfg.base;
        c.seed = seed;
        c.model.variant = DecoderVariant::from_letter(v);
        c.model.share_box_head = c.model.share_cls_head = true;
        plan.push_back({std::string("variant_") + v, "variant", seed, c});
      }
      for (auto [box, cls] : {std::pair{true, true}, {true, false}, {false, true}, {false, false}}) {
        TrainConfig c = cfg.base;
        c.seed = seed;
        c.model.share_box_head = box;
        c.model.share_cls_head = cls;
        plan.push_back({sharing_name(box, cls), "sharing", seed, c});
      }
    }
  }

  fs::create_directories(out_dir);
  ExperimentReport report;
  std::map<std::string, RunRecord> done;  // keyed by resolved config
  for (const PlannedRun& p : plan) {
    const std::string key = json(p.config).dump();
    RunRecord rec;
    if (auto it = done.find(key); it != done.end()) {
      rec = it->second;
      if (log) log("reusing " + it->second.name + " for " + p.name + " seed " + std::to_string(p.seed));
    } else {
      const fs::path dir = out_dir / "runs" / (p.group + "_" + p.name + "_s" + std::to_string(p.seed));
      if (log) log("training " + p.group + "/" + p.name + " seed " + std::to_string(p.seed));
      TrainResult tr = train(p.config, dir, &train_set, &val_set, [&](const EpochSummary& e) {
        if (log) {
          log("  epoch " + std::to_string(e.epoch) + " cls_o2o " + fmt(e.cls_o2o) + " l1 " +
              fmt(e.o2o_l1) + " giou " + fmt(e.o2o_giou) + " (" + fmt(e.seconds, 1) + " s)");
        }
      });
      rec.config = p.config;
      rec.final_epoch = tr.epochs.back();
      rec.eval = tr.evals.back().second;
      done.emplace(key, rec);
    }
    rec.name = p.name;
    rec.group = p.group;
    rec.seed = p.seed;
    report.runs.push_back(rec);
  }

  const LossConfig& weights = cfg.base.loss;
  json rows = json::array();
  for (const auto& r : report.runs) rows.push_back(run_row(r, weights));
  json summary = json::object();
  std::ostringstream md;
  md << "# Experiment report\n\n";

  if (cfg.directional) {
    std::vector<double> d_ap50, d_cls, d_reg, d_cand;
    json per_seed = json::array();
    std::map<std::string, std::vector<double>> means;
    for (auto seed : cfg.seeds) {
      const RunRecord* b = nullptr;
      const RunRecord* m = nullptr;
      for (const auto& r : report.runs) {
        if (r.group != "directional" || r.seed != seed) continue;
        (r.name == "baseline" ? b : m) = &r;
      }
      const json jb = run_row(*b, weights), jm = run_row(*m, weights);
      for (const char* f : {"ap50", "ap75", "ap", "final_cls_o2o", "final_o2o_reg",
                            "final_o2o_l1", "final_o2o_giou", "candidate_mean_iou"}) {
        means[std::string("baseline_") + f].push_back(jb.at(f).get<double>());
        means[std::string("ms_") + f].push_back(jm.at(f).get<double>());
      }
      d_ap50.push_back(m->eval.ap.ap50 - b->eval.ap.ap50);
      per_seed.push_back({{"seed", seed},
                          {"delta_ap50", d_ap50.back()},
                          {"baseline", jb},
                          {"ms", jm}});
    }
    json m = json::object();
    for (const auto& [k, v] : means) m[k] = mean_of(v);
    const bool lower_cls = m["ms_final_cls_o2o"].get<double>() < m["baseline_final_cls_o2o"].get<double>();
    const bool lower_reg = m["ms_final_o2o_reg"].get<double>() < m["baseline_final_o2o_reg"].get<double>();
    const double mean_d_ap50 = mean_of(d_ap50);
    const bool better_cand =
        m["ms_candidate_mean_iou"].get<double>() > m["baseline_candidate_mean_iou"].get<double>();
    summary["directional"] = {{"seeds", cfg.seeds},
                              {"means", m},
                              {"delta_ap50_per_seed", d_ap50},
                              {"mean_delta_ap50", mean_d_ap50},
                              {"ms_lower_o2o_cls", lower_cls},
                              {"ms_lower_o2o_reg", lower_reg},
                              {"ms_higher_ap50", mean_d_ap50 > 0.0},
                              {"ms_higher_candidate_iou", better_cand},
                              {"per_seed", per_seed}};

    md << "## Mixed supervision vs one-to-one baseline\n\n";
    md << "| seed | run | AP50 | AP75 | AP | cls_o2o | o2o_reg | cls_o2m | top-" << cfg.base.candidate_k
       << " IoU |\n|---|---|---|---|---|---|---|---|---|\n";
    for (const auto& r : report.runs) {
      if (r.group != "directional") continue;
      const json j = run_row(r, weights);
      md << "| " << r.seed << " | " << r.name << " | " << fmt(r.eval.ap.ap50) << " | "
         << fmt(r.eval.ap.ap75) << " | " << fmt(r.eval.ap.ap) << " | " << fmt(r.final_epoch.cls_o2o)
         << " | " << fmt(j.at("final_o2o_reg").get<double>()) << " | "
         << fmt(r.final_epoch.cls_o2m) << " | " << fmt(r.eval.candidates.mean) << " |\n";
    }
    md << "\nMean over seeds: baseline AP50 " << fmt(m["baseline_ap50"].get<double>()) << ", MS AP50 "
       << fmt(m["ms_ap50"].get<double>()) << ", mean delta AP50 " << fmt(mean_d_ap50)
       << ". Final-epoch one-to-one cls " << fmt(m["baseline_final_cls_o2o"].get<double>()) << " -> "
       << fmt(m["ms_final_cls_o2o"].get<double>()) << ", regression "
       << fmt(m["baseline_final_o2o_reg"].get<double>()) << " -> "
       << fmt(m["ms_final_o2o_reg"].get<double>()) << ", candidate IoU "
       << fmt(m["baseline_candidate_mean_iou"].get<double>()) << " -> "
       << fmt(m["ms_candidate_mean_iou"].get<double>()) << ".\n\n";
  }

  if (cfg.ablation) {
    json table = json::object();
    for (const char* group : {"variant", "sharing"}) {
      std::map<std::string, std::vector<const RunRecord*>> by_name;
      std::vector<std::string> names;
      for (const auto& r : report.runs) {
        if (r.group != group) continue;
        if (!by_name.count(r.name)) names.push_back(r.name);
        by_name[r.name].push_back(&r);
      }
      json entries = json::array();
      md << "## " << (std::string(group) == "variant" ? "Decoder variants" : "Head sharing (variant "
                                                                            + std::string(1, cfg.base.model.variant.letter()) + ")")
         << "\n\n| config | AP50 mean | AP mean | cls_o2o | top-" << cfg.base.candidate_k
         << " IoU | per-seed AP50 |\n|---|---|---|---|---|---|\n";
      for (const auto& name : names) {
        std::vector<double> ap50, ap, cls, cand;
        json seeds = json::array();
        for (const RunRecord* r : by_name[name]) {
          ap50.push_back(r->eval.ap.ap50);
          ap.push_back(r->eval.ap.ap);
          cls.push_back(r->final_epoch.cls_o2o);
          cand.push_back(r->eval.candidates.mean);
          seeds.push_back({{"seed", r->seed}, {"ap50", r->eval.ap.ap50}, {"ap", r->eval.ap.ap}});
        }
        entries.push_back({{"config", name},
                           {"ap50_mean", mean_of(ap50)},
                           {"ap_mean", mean_of(ap)},
                           {"final_cls_o2o_mean", mean_of(cls)},
                           {"candidate_mean_iou", mean_of(cand)},
                           {"per_seed", seeds}});
        md << "| " << name << " | " << fmt(mean_of(ap50)) << " | " << fmt(mean_of(ap)) << " | "
           << fmt(mean_of(cls)) << " | " << fmt(mean_of(cand)) << " |";
        for (double v : ap50) md << ' ' << fmt(v);
        md << " |\n";
      }
      table[group] = entries;
      md << "\n";
    }
    summary["ablation"] = table;
  }

  report.summary = summary;
  write_json_file({{"tool_version", kToolVersion},
                   {"timestamp", utc_timestamp()},
                   {"config", cfg},
                   {"runs", rows},
                   {"summary", summary}},
                  out_dir / "report.json");
  std::ofstream(out_dir / "report.md") << md.str();
  return report;
}

// ---------------------------------------------------------------------------
// Figure data

namespace {

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream s(line);
    std::string cell;
    while (std::getline(s, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  if (rows.empty()) throw std::runtime_error(path.string() + " is empty");
  return rows;
}

std::size_t column(const std::vector<std::string>& header, const std::string& name,
                   const fs::path& path) {
  const auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw std::runtime_error(path.string() + " has no column " + name);
  return static_cast<std::size_t>(it - header.begin());
}

}  // namespace

void plot_data(std::span<const fs::path> run_dirs, const fs::path& out_dir) {
  if (run_dirs.empty()) throw std::invalid_argument("no run directories given");
  fs::create_directories(out_dir);
  std::ofstream steps(out_dir / "fig_loss_steps.csv");
  std::ofstream losses(out_dir / "fig_losses.csv");
  std::ofstream aps(out_dir / "fig_ap.csv");
  if (!steps || !losses || !aps) throw std::runtime_error("cannot write into " + out_dir.string());
  steps << std::setprecision(9) << "run,step,epoch,cls_o2o,o2o_l1,o2o_giou\n";
  losses << std::setprecision(9) << "run,epoch,cls_o2o,o2o_l1,o2o_giou,cls_o2m\n";
  aps << "run,epoch,ap50,ap75,ap,candidate_mean_iou\n";
  for (const fs::path& dir : run_dirs) {
    const std::string run = dir.filename().empty() ? dir.parent_path().filename().string()
                                                   : dir.filename().string();
    const fs::path metrics_path = dir / "metrics.csv";
    const auto rows = read_csv(metrics_path);
    const auto& h = rows.front();
    const std::size_t c_step = column(h, "step", metrics_path), c_epoch = column(h, "epoch", metrics_path),
                      c_layer = column(h, "layer", metrics_path),
                      c_cls = column(h, "cls_o2o", metrics_path),
                      c_l1 = column(h, "o2o_l1", metrics_path),
                      c_giou = column(h, "o2o_giou", metrics_path),
                      c_o2m = column(h, "cls_o2m", metrics_path);
    int last_layer = 0;
    for (std::size_t r = 1; r < rows.size(); ++r) last_layer = std::max(last_layer, std::stoi(rows[r].at(c_layer)));
    std::map<int, std::array<double, 5>> per_epoch;  // sums + count
    for (std::size_t r = 1; r < rows.size(); ++r) {
      const auto& row = rows[r];
      if (std::stoi(row.at(c_layer)) != last_layer) continue;
      steps << run << ',' << row.at(c_step) << ',' << row.at(c_epoch) << ',' << row.at(c_cls) << ','
            << row.at(c_l1) << ',' << row.at(c_giou) << '\n';
      auto& acc = per_epoch[std::stoi(row.at(c_epoch))];
      acc[0] += std::stod(row.at(c_cls));
      acc[1] += std::stod(row.at(c_l1));
      acc[2] += std::stod(row.at(c_giou));
      acc[3] += std::stod(row.at(c_o2m));
      acc[4] += 1.0;
    }
    for (const auto& [epoch, acc] : per_epoch) {
      losses << run << ',' << epoch << ',' << acc[0] / acc[4] << ',' << acc[1] / acc[4] << ','
             << acc[2] / acc[4] << ',' << acc[3] / acc[4] << '\n';
    }
    const fs::path eval_path = dir / "eval.csv";
    if (fs::exists(eval_path)) {
      const auto ev = read_csv(eval_path);
      for (std::size_t r = 1; r < ev.size(); ++r) {
        aps << run;
        for (std::size_t c = 0; c < std::min<std::size_t>(5, ev[r].size()); ++c) aps << ',' << ev[r][c];
        aps << '\n';
      }
    }
  }
}

}  // namespace msdetr
