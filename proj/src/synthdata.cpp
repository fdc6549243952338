// SPDX-License-Identifier: Apache-2.0
#include "msdetr/synthdata.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

#include "json_util.hpp"

namespace msdetr {

GroundTruth Scene::ground_truth() const {
  GroundTruth gt;
  gt.classes.reserve(objects.size());
  gt.boxes.reserve(objects.size());
  for (const auto& o : objects) {
    gt.classes.push_back(o.class_id);
    gt.boxes.push_back(o.box);
  }
  return gt;
}

std::string shape_name(int class_id) {
  switch (class_id) {
    case 0: return "circle";
    case 1: return "square";
    case 2: return "triangle";
    case 3: return "diamond";
    default: return "class" + std::to_string(class_id);
  }
}

void DatasetSpec::validate() const {
  if (num_scenes < 0) throw std::invalid_argument("num_scenes must be >= 0");
  if (height < 8 || width < 8) throw std::invalid_argument("image must be at least 8x8");
  if (num_classes < 1 || num_classes > kMaxShapeClasses) {
    throw std::invalid_argument("num_classes must be in [1, " +
                                std::to_string(kMaxShapeClasses) + "]");
  }
  if (max_objects < 0) throw std::invalid_argument("max_objects must be >= 0");
  if (min_size > 1.0 || max_size > 1.0) {
    throw std::invalid_argument("object size above 1 does not fit in the image");
  }
  if (min_size < kMinGtSize) {
    throw std::invalid_argument("min_size below the ground-truth floor of 0.05");
  }
  if (max_size < min_size) throw std::invalid_argument("max_size must be >= min_size");
  if (!(noise >= 0.0 && noise <= 0.5)) throw std::invalid_argument("noise must be in [0, 0.5]");
}

void to_json(nlohmann::json& j, const DatasetSpec& s) {
  j = {{"seed", s.seed},           {"num_scenes", s.num_scenes},
       {"height", s.height},       {"width", s.width},
       {"num_classes", s.num_classes}, {"max_objects", s.max_objects},
       {"min_size", s.min_size},   {"max_size", s.max_size},
       {"allow_occlusion", s.allow_occlusion}, {"noise", s.noise}};
}

void from_json(const nlohmann::json& j, DatasetSpec& s) {
  detail::check_keys(j,
                     {"seed", "num_scenes", "height", "width", "num_classes", "max_objects",
                      "min_size", "max_size", "allow_occlusion", "noise"},
                     "dataset");
  detail::read_if(j, "seed", s.seed);
  detail::read_if(j, "num_scenes", s.num_scenes);
  detail::read_if(j, "height", s.height);
  detail::read_if(j, "width", s.width);
  detail::read_if(j, "num_classes", s.num_classes);
  detail::read_if(j, "max_objects", s.max_objects);
  detail::read_if(j, "min_size", s.min_size);
  detail::read_if(j, "max_size", s.max_size);
  detail::read_if(j, "allow_occlusion", s.allow_occlusion);
  detail::read_if(j, "noise", s.noise);
  s.validate();
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

struct Placed {
  Shape shape;
  double cx, cy;  // pixels
  double size;    // pixels
};

bool inside(const Placed& s, double x, double y) {
  const double r = 0.5 * s.size;
  const double dx = x - s.cx;
  const double dy = y - s.cy;
  switch (s.shape) {
    case Shape::kCircle: return dx * dx + dy * dy <= r * r;
    case Shape::kSquare: return std::abs(dx) <= r && std::abs(dy) <= r;
    case Shape::kTriangle: {
      // Apex at the top center, base along the bottom edge.
      if (dy < -r || dy > r) return false;
      const double half_width = 0.5 * (dy + r);
      return std::abs(dx) <= half_width;
    }
    case Shape::kDiamond: return std::abs(dx) + std::abs(dy) <= r;
  }
  return false;
}

struct PixelRect {
  int x0 = 0, y0 = 0, x1 = -1, y1 = -1;  // inclusive
  bool empty() const { return x1 < x0 || y1 < y0; }
};

PixelRect rasterize(const Placed& s, int height, int width, std::vector<char>* mask) {
  PixelRect rect{width, height, -1, -1};
  if (mask) mask->assign(static_cast<std::size_t>(height) * width, 0);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      if (!inside(s, x + 0.5, y + 0.5)) continue;
      if (mask) (*mask)[static_cast<std::size_t>(y) * width + x] = 1;
      rect.x0 = std::min(rect.x0, x);
      rect.y0 = std::min(rect.y0, y);
      rect.x1 = std::max(rect.x1, x);
      rect.y1 = std::max(rect.y1, y);
    }
  }
  return rect;
}

bool rects_touch(const PixelRect& a, const PixelRect& b, int margin) {
  return a.x0 <= b.x1 + margin && b.x0 <= a.x1 + margin && a.y0 <= b.y1 + margin &&
         b.y0 <= a.y1 + margin;
}

}  // namespace

Scene generate_scene(const DatasetSpec& spec, int scene_id) {
  spec.validate();
  std::mt19937_64 rng(splitmix64(spec.seed ^ splitmix64(static_cast<std::uint64_t>(scene_id))));
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  Scene scene;
  scene.scene_id = scene_id;
  const int h = spec.height;
  const int w = spec.width;
  const double side = std::min(h, w);

  std::array<double, 3> background{};
  const double base = 0.25 + 0.3 * unit(rng);
  for (double& c : background) c = std::clamp(base + 0.1 * (unit(rng) - 0.5), 0.0, 1.0);
  std::vector<double> canvas(static_cast<std::size_t>(h) * w * 3);
  for (std::size_t i = 0; i < canvas.size(); ++i) canvas[i] = background[i % 3];

  const int count = spec.max_objects == 0
                        ? 0
                        : 1 + static_cast<int>(unit(rng) * spec.max_objects) % spec.max_objects;
  std::vector<PixelRect> taken;
  std::vector<char> mask;
  for (int k = 0; k < count; ++k) {
    bool placed = false;
    for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
      const int cls = static_cast<int>(unit(rng) * spec.num_classes) % spec.num_classes;
      const double size = (spec.min_size + (spec.max_size - spec.min_size) * unit(rng)) * side;
      // Keep the whole shape (plus one pixel) inside the canvas.
      const double lo_x = 0.5 * size + 1.0;
      const double lo_y = 0.5 * size + 1.0;
      const Placed shape{static_cast<Shape>(cls), lo_x + (w - 2.0 * lo_x) * unit(rng),
                         lo_y + (h - 2.0 * lo_y) * unit(rng), size};
      const PixelRect rect = rasterize(shape, h, w, &mask);
      if (rect.empty()) continue;
      const double bw = static_cast<double>(rect.x1 - rect.x0 + 1) / w;
      const double bh = static_cast<double>(rect.y1 - rect.y0 + 1) / h;
      if (bw < std::max(kMinGtSize, spec.min_size * 0.5) ||
          bh < std::max(kMinGtSize, spec.min_size * 0.5)) {
        continue;
      }
      if (!spec.allow_occlusion) {
        const bool clash = std::any_of(taken.begin(), taken.end(),
                                       [&](const PixelRect& t) { return rects_touch(t, rect, 2); });
        if (clash) continue;
      }
      std::array<double, 3> color{};
      do {
        for (double& c : color) c = unit(rng);
      } while (std::max({std::abs(color[0] - background[0]), std::abs(color[1] - background[1]),
                         std::abs(color[2] - background[2])}) < 0.35);
      for (std::size_t i = 0; i < mask.size(); ++i) {
        if (!mask[i]) continue;
        for (int c = 0; c < 3; ++c) canvas[i * 3 + c] = color[c];
      }
      taken.push_back(rect);
      scene.objects.push_back(
          {cls, to_center(CornerBox{static_cast<double>(rect.x0) / w,
                                    static_cast<double>(rect.y0) / h,
                                    static_cast<double>(rect.x1 + 1) / w,
                                    static_cast<double>(rect.y1 + 1) / h})});
      placed = true;
    }
    if (!placed) break;
  }

  scene.image = Image(h, w);
  for (std::size_t i = 0; i < canvas.size(); ++i) {
    const double v = canvas[i] + spec.noise * (2.0 * unit(rng) - 1.0);
    scene.image.rgb[i] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
  }
  return scene;
}

std::vector<Scene> generate(const DatasetSpec& spec) {
  spec.validate();
  std::vector<Scene> out;
  out.reserve(static_cast<std::size_t>(spec.num_scenes));
  for (int i = 0; i < spec.num_scenes; ++i) out.push_back(generate_scene(spec, i));
  return out;
}

// ---------------------------------------------------------------------------
// PNG

namespace {

struct PngWriteState {
  std::vector<std::uint8_t>* out;
};

void png_write_cb(png_structp png, png_bytep data, png_size_t len) {
  auto* st = static_cast<PngWriteState*>(png_get_io_ptr(png));
  st->out->insert(st->out->end(), data, data + len);
}

void png_flush_cb(png_structp) {}

struct PngReadState {
  std::span<const std::uint8_t> in;
  std::size_t pos = 0;
};

void png_read_cb(png_structp png, png_bytep data, png_size_t len) {
  auto* st = static_cast<PngReadState*>(png_get_io_ptr(png));
  if (st->pos + len > st->in.size()) png_error(png, "truncated PNG data");
  std::memcpy(data, st->in.data() + st->pos, len);
  st->pos += len;
}

[[noreturn]] void png_error_cb(png_structp, png_const_charp msg) {
  throw std::runtime_error(std::string("png: ") + msg);
}

void png_warning_cb(png_structp, png_const_charp) {}

}  // namespace

std::vector<std::uint8_t> encode_png(const Image& image) {
  std::vector<std::uint8_t> out;
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_cb, png_warning_cb);
  if (!png) throw std::runtime_error("png: cannot create write struct");
  png_infop info = png_create_info_struct(png);
  PngWriteState st{&out};
  try {
    png_set_write_fn(png, &st, png_write_cb, png_flush_cb);
    png_set_IHDR(png, info, static_cast<png_uint_32>(image.width),
                 static_cast<png_uint_32>(image.height), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < image.height; ++y) {
      png_write_row(png, const_cast<png_bytep>(image.rgb.data() +
                                               static_cast<std::size_t>(y) * image.width * 3));
    }
    png_write_end(png, nullptr);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
  return out;
}

Image decode_png(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) {
    throw std::runtime_error("png: bad signature");
  }
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_cb, png_warning_cb);
  if (!png) throw std::runtime_error("png: cannot create read struct");
  png_infop info = png_create_info_struct(png);
  PngReadState st{bytes, 0};
  Image image;
  try {
    png_set_read_fn(png, &st, png_read_cb);
    png_read_info(png, info);
    if (png_get_color_type(png, info) != PNG_COLOR_TYPE_RGB ||
        png_get_bit_depth(png, info) != 8) {
      throw std::runtime_error("png: expected 8-bit RGB");
    }
    image = Image(static_cast<int>(png_get_image_height(png, info)),
                  static_cast<int>(png_get_image_width(png, info)));
    for (int y = 0; y < image.height; ++y) {
      png_read_row(png, image.rgb.data() + static_cast<std::size_t>(y) * image.width * 3,
                   nullptr);
    }
    png_read_end(png, nullptr);
  } catch (...) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return image;
}

void write_png(const Image& image, const std::filesystem::path& path) {
  const auto bytes = encode_png(image);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// ---------------------------------------------------------------------------
// Tar (POSIX ustar, regular files only, fixed zero mtime for reproducibility)

namespace {

constexpr std::size_t kBlock = 512;

void write_octal(char* field, std::size_t width, std::uint64_t value) {
  std::snprintf(field, width, "%0*llo", static_cast<int>(width - 1),
                static_cast<unsigned long long>(value));
}

void tar_append(std::string& out, const std::string& name, std::string_view data) {
  if (name.size() >= 100) throw std::invalid_argument("tar entry name too long: " + name);
  std::array<char, kBlock> header{};
  std::memcpy(header.data(), name.data(), name.size());
  write_octal(header.data() + 100, 8, 0644);
  write_octal(header.data() + 108, 8, 0);
  write_octal(header.data() + 116, 8, 0);
  write_octal(header.data() + 124, 12, data.size());
  write_octal(header.data() + 136, 12, 0);
  header[156] = '0';
  std::memcpy(header.data() + 257, "ustar", 6);
  std::memcpy(header.data() + 263, "00", 2);
  std::memset(header.data() + 148, ' ', 8);
  unsigned sum = 0;
  for (char c : header) sum += static_cast<unsigned char>(c);
  std::snprintf(header.data() + 148, 8, "%06o", sum);
  header[155] = ' ';
  out.append(header.data(), kBlock);
  out.append(data);
  out.append((kBlock - data.size() % kBlock) % kBlock, '\0');
}

struct TarEntry {
  std::string name;
  std::string_view data;
};

std::vector<TarEntry> tar_parse(std::string_view archive) {
  std::vector<TarEntry> entries;
  std::size_t pos = 0;
  while (true) {
    if (pos + kBlock > archive.size()) {
      throw std::runtime_error("archive truncated after entry " + std::to_string(entries.size()));
    }
    const char* h = archive.data() + pos;
    if (std::all_of(h, h + kBlock, [](char c) { return c == '\0'; })) break;
    unsigned stored = 0;
    unsigned sum = 0;
    for (std::size_t i = 0; i < kBlock; ++i) {
      sum += (i >= 148 && i < 156) ? ' ' : static_cast<unsigned char>(h[i]);
    }
    if (std::sscanf(h + 148, "%o", &stored) != 1 || stored != sum) {
      throw std::runtime_error("archive header checksum mismatch at entry " +
                               std::to_string(entries.size()));
    }
    unsigned long long size = 0;
    if (std::sscanf(h + 124, "%llo", &size) != 1) {
      throw std::runtime_error("archive header has no size at entry " +
                               std::to_string(entries.size()));
    }
    std::string name(h, strnlen(h, 100));
    pos += kBlock;
    if (pos + size > archive.size()) throw std::runtime_error("archive entry '" + name + "' truncated");
    entries.push_back({std::move(name), archive.substr(pos, size)});
    pos += (size + kBlock - 1) / kBlock * kBlock;
  }
  return entries;
}

std::string image_entry_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "images/%06zu.png", index);
  return buf;
}

}  // namespace

void save_scenes(std::span<const Scene> scenes, const std::filesystem::path& path) {
  nlohmann::json index;
  index["format"] = "msdetr-scenes-v1";
  index["scenes"] = nlohmann::json::array();
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const Scene& s = scenes[i];
    nlohmann::json objs = nlohmann::json::array();
    for (const auto& o : s.objects) {
      objs.push_back({{"class", o.class_id}, {"cx", o.box.cx}, {"cy", o.box.cy},
                      {"w", o.box.w}, {"h", o.box.h}});
    }
    index["scenes"].push_back({{"scene_id", s.scene_id},
                               {"image", image_entry_name(i)},
                               {"height", s.image.height},
                               {"width", s.image.width},
                               {"objects", std::move(objs)}});
  }
  std::string archive;
  tar_append(archive, "index.json", index.dump(1));
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const auto png = encode_png(scenes[i].image);
    tar_append(archive, image_entry_name(i),
               std::string_view(reinterpret_cast<const char*>(png.data()), png.size()));
  }
  archive.append(2 * kBlock, '\0');
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f.write(archive.data(), static_cast<std::streamsize>(archive.size()));
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

std::vector<Scene> load_scenes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::stringstream buf;
  buf << f.rdbuf();
  const std::string archive = buf.str();

  // Entries are parsed lazily so a truncated tail reports the scene it hit.
  std::vector<TarEntry> entries;
  std::string tail_error;
  try {
    entries = tar_parse(archive);
  } catch (const std::runtime_error& e) {
    tail_error = e.what();
    // Re-parse as far as possible.
    std::size_t pos = 0;
    while (pos + kBlock <= archive.size()) {
      const char* h = archive.data() + pos;
      unsigned long long size = 0;
      if (std::sscanf(h + 124, "%llo", &size) != 1) break;
      std::string name(h, strnlen(h, 100));
      if (pos + kBlock + size > archive.size()) break;
      entries.push_back({std::move(name), std::string_view(archive).substr(pos + kBlock, size)});
      pos += kBlock + (size + kBlock - 1) / kBlock * kBlock;
    }
  }
  if (entries.empty() || entries.front().name != "index.json") {
    throw std::runtime_error(path.string() + ": missing index.json" +
                             (tail_error.empty() ? "" : " (" + tail_error + ")"));
  }
  nlohmann::json index;
  try {
    index = nlohmann::json::parse(entries.front().data);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path.string() + ": index.json: " + e.what());
  }

  std::vector<Scene> scenes;
  const auto& list = index.at("scenes");
  scenes.reserve(list.size());
  for (std::size_t i = 0; i < list.size(); ++i) {
    const std::string where = path.string() + ": scene " + std::to_string(i);
    try {
      const auto& js = list[i];
      Scene s;
      s.scene_id = js.at("scene_id").get<int>();
      for (const auto& jo : js.at("objects")) {
        s.objects.push_back({jo.at("class").get<int>(),
                             Box{jo.at("cx").get<double>(), jo.at("cy").get<double>(),
                                 jo.at("w").get<double>(), jo.at("h").get<double>()}});
      }
      const std::string name = js.at("image").get<std::string>();
      if (i + 1 >= entries.size() || entries[i + 1].name != name) {
        throw std::runtime_error("image entry '" + name + "' missing or truncated");
      }
      const auto& data = entries[i + 1].data;
      s.image = decode_png(
          std::span(reinterpret_cast<const std::uint8_t*>(data.data()), data.size()));
      if (s.image.height != js.at("height").get<int>() ||
          s.image.width != js.at("width").get<int>()) {
        throw std::runtime_error("image size does not match index");
      }
      scenes.push_back(std::move(s));
    } catch (const std::exception& e) {
      throw std::runtime_error(where + ": " + e.what());
    }
  }
  if (!tail_error.empty()) throw std::runtime_error(path.string() + ": " + tail_error);
  return scenes;
}

}  // namespace msdetr
