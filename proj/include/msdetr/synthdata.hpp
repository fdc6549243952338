// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "msdetr/geometry.hpp"
#include "msdetr/supervision.hpp"

namespace msdetr {

/// Lower bound on generated object size, as a fraction of the shorter side.
inline constexpr double kMinGtSize = 0.05;

/// 8-bit RGB image, row-major, interleaved channels.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(int h, int w) : height(h), width(w), rgb(static_cast<std::size_t>(h) * w * 3, 0) {}

  std::uint8_t& at(int y, int x, int c) { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  std::uint8_t at(int y, int x, int c) const {
    return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  /// Channel value scaled to [0, 1].
  double value(int y, int x, int c) const { return at(y, x, c) / 255.0; }

  friend bool operator==(const Image&, const Image&) = default;
};

struct SceneObject {
  int class_id = 0;
  Box box;

  friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

struct Scene {
  int scene_id = 0;
  Image image;
  std::vector<SceneObject> objects;

  GroundTruth ground_truth() const;
  friend bool operator==(const Scene&, const Scene&) = default;
};

/// Shape drawn for each class id.
enum class Shape { kCircle = 0, kSquare = 1, kTriangle = 2, kDiamond = 3 };
inline constexpr int kMaxShapeClasses = 4;
std::string shape_name(int class_id);

struct DatasetSpec {
  std::uint64_t seed = 0;
  int num_scenes = 2000;
  int height = 64;
  int width = 64;
  int num_classes = 3;
  int max_objects = 5;
  double min_size = 0.15;  // fraction of the shorter image side
  double max_size = 0.4;
  bool allow_occlusion = false;
  double noise = 0.08;  // uniform per-pixel amplitude

  /// Throws std::invalid_argument for an infeasible spec.
  void validate() const;
};

void to_json(nlohmann::json& j, const DatasetSpec& s);
void from_json(const nlohmann::json& j, DatasetSpec& s);

/// Scene `scene_id` of the dataset; depends only on (spec, scene_id).
Scene generate_scene(const DatasetSpec& spec, int scene_id);
std::vector<Scene> generate(const DatasetSpec& spec);

/// Tar archive: index.json followed by images/NNNNNN.png.
void save_scenes(std::span<const Scene> scenes, const std::filesystem::path& path);
/// Throws std::runtime_error naming the scene index when an entry is corrupt.
std::vector<Scene> load_scenes(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_png(const Image& image);
Image decode_png(std::span<const std::uint8_t> bytes);
void write_png(const Image& image, const std::filesystem::path& path);

}  // namespace msdetr
