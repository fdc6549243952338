// SPDX-License-Identifier: Apache-2.0
#include <unistd.h>

#include <algorithm>
#include <array>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "doctest.h"
#include "msdetr/synthdata.hpp"

using namespace msdetr;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("msdetr_synth_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir / name;
}

std::vector<char> read_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::vector<char>& b) {
  std::ofstream f(p, std::ios::binary);
  f.write(b.data(), static_cast<std::streamsize>(b.size()));
}

DatasetSpec small_spec(std::uint64_t seed, int n) {
  DatasetSpec s;
  s.seed = seed;
  s.num_scenes = n;
  return s;
}

}  // namespace

TEST_CASE("generation is deterministic") {
  const DatasetSpec spec = small_spec(7, 10);
  const auto a = generate(spec);
  const auto b = generate(spec);
  CHECK(a == b);
  const fs::path pa = temp_path("a.tar"), pb = temp_path("b.tar");
  save_scenes(a, pa);
  save_scenes(b, pb);
  CHECK(read_bytes(pa) == read_bytes(pb));
  CHECK(generate_scene(spec, 4) == a[4]);
  CHECK(generate(small_spec(8, 10)) != a);
}

TEST_CASE("max_objects = 0 yields empty scenes") {
  DatasetSpec spec = small_spec(1, 20);
  spec.max_objects = 0;
  for (const Scene& s : generate(spec)) CHECK(s.objects.empty());
}

TEST_CASE("stored boxes are the tight boxes of the rendered pixels") {
  // Without noise every pixel that differs from the background belongs to a
  // shape; objects keep a gap, so each pixel is attributed to the box that
  // contains it (grown by one pixel).
  DatasetSpec spec = small_spec(3, 60);
  spec.noise = 0.0;
  for (const Scene& s : generate(spec)) {
    const int h = s.image.height, w = s.image.width;
    std::vector<std::array<int, 4>> tight(s.objects.size(), {w, h, -1, -1});
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        int diff = 0;
        for (int c = 0; c < 3; ++c) diff = std::max(diff, std::abs(s.image.at(y, x, c) - s.image.at(0, 0, c)));
        if (diff < 40) continue;
        int owner = -1;
        for (std::size_t k = 0; k < s.objects.size(); ++k) {
          const CornerBox b = to_corner(s.objects[k].box);
          if (x + 1 >= b.x0 * w && x <= b.x1 * w && y + 1 >= b.y0 * h && y <= b.y1 * h) owner = static_cast<int>(k);
        }
        REQUIRE(owner >= 0);
        auto& t = tight[static_cast<std::size_t>(owner)];
        t = {std::min(t[0], x), std::min(t[1], y), std::max(t[2], x), std::max(t[3], y)};
      }
    }
    for (std::size_t k = 0; k < s.objects.size(); ++k) {
      const auto& t = tight[k];
      const Box rendered = to_center({static_cast<double>(t[0]) / w, static_cast<double>(t[1]) / h,
                                      static_cast<double>(t[2] + 1) / w, static_cast<double>(t[3] + 1) / h});
      CHECK(iou(rendered, s.objects[k].box) >= 0.98);
    }
  }
}

TEST_CASE("scene invariants over many seeds") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    DatasetSpec spec = small_spec(seed, 20);
    spec.allow_occlusion = seed % 2 == 1;
    spec.num_classes = 1 + static_cast<int>(seed % 4);
    for (const Scene& s : generate(spec)) {
      CHECK(s.objects.size() <= static_cast<std::size_t>(spec.max_objects));
      CHECK(s.image.rgb.size() == static_cast<std::size_t>(spec.height * spec.width * 3));
      for (const auto& o : s.objects) {
        CHECK(o.class_id >= 0);
        CHECK(o.class_id < spec.num_classes);
        CHECK(o.box.w >= kMinGtSize);
        CHECK(o.box.h >= kMinGtSize);
        const CornerBox c = to_corner(o.box);
        CHECK(c.x0 >= 0.0);
        CHECK(c.y0 >= 0.0);
        CHECK(c.x1 <= 1.0);
        CHECK(c.y1 <= 1.0);
      }
    }
  }
}

TEST_CASE("class balance") {
  const auto scenes = generate(small_spec(11, 1000));
  std::vector<int> counts(3, 0);
  int total = 0;
  for (const auto& s : scenes) {
    for (const auto& o : s.objects) {
      ++counts[static_cast<std::size_t>(o.class_id)];
      ++total;
    }
  }
  for (int c : counts) {
    const double freq = static_cast<double>(c) / total;
    CHECK(freq > (1.0 / 3.0) * 0.8);
    CHECK(freq < (1.0 / 3.0) * 1.2);
  }
}

TEST_CASE("save/load round trip") {
  const auto scenes = generate(small_spec(5, 100));
  const fs::path p = temp_path("rt.tar");
  save_scenes(scenes, p);
  CHECK(load_scenes(p) == scenes);

  const fs::path e = temp_path("empty.tar");
  save_scenes({}, e);
  CHECK(load_scenes(e).empty());
}

TEST_CASE("corrupt archives raise errors") {
  const auto scenes = generate(small_spec(6, 8));
  const fs::path p = temp_path("c.tar");
  save_scenes(scenes, p);
  const auto bytes = read_bytes(p);

  for (std::size_t cut : {bytes.size() / 2, bytes.size() - 700, std::size_t{300}, std::size_t{0}}) {
    const fs::path t = temp_path("trunc.tar");
    write_bytes(t, std::vector<char>(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut)));
    CHECK_THROWS_AS(load_scenes(t), std::runtime_error);
  }

  // Damage the PNG payload of scene 3.
  const std::string name = "images/000003.png";
  std::size_t header = bytes.size();
  for (std::size_t off = 0; off + 512 <= bytes.size(); off += 512) {
    if (std::equal(name.begin(), name.end(), bytes.begin() + static_cast<std::ptrdiff_t>(off))) {
      header = off;
      break;
    }
  }
  REQUIRE(header < bytes.size());
  std::vector<char> bad = bytes;
  const std::size_t data = header + 512;
  for (std::size_t i = 60; i < 90; ++i) bad[data + i] = static_cast<char>(bad[data + i] ^ 0x5a);
  const fs::path c = temp_path("bad.tar");
  write_bytes(c, bad);
  CHECK_THROWS_WITH_AS(load_scenes(c), doctest::Contains("scene 3"), std::runtime_error);

  CHECK_THROWS_AS(load_scenes(temp_path("missing.tar")), std::runtime_error);
}

TEST_CASE("png round trip") {
  const Scene s = generate_scene(small_spec(2, 1), 0);
  const auto png = encode_png(s.image);
  CHECK(decode_png(png) == s.image);
  std::vector<std::uint8_t> junk(png.begin(), png.begin() + 40);
  CHECK_THROWS_AS(decode_png(junk), std::runtime_error);
}

TEST_CASE("dataset spec validation and JSON") {
  DatasetSpec s;
  CHECK(s.height == 64);
  CHECK(s.width == 64);
  CHECK(s.num_classes == 3);
  CHECK(s.max_objects == 5);
  CHECK(s.num_scenes == 2000);
  s.min_size = 1.2;
  s.max_size = 1.5;
  CHECK_THROWS_AS(generate(s), std::invalid_argument);
  s = DatasetSpec{};
  s.min_size = 0.01;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = DatasetSpec{};
  s.num_classes = 5;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);

  DatasetSpec d;
  d.seed = 99;
  d.allow_occlusion = true;
  const auto back = nlohmann::json(d).get<DatasetSpec>();
  CHECK(back.seed == 99);
  CHECK(back.allow_occlusion);
  CHECK_THROWS_AS(nlohmann::json({{"scenes", 3}}).get<DatasetSpec>(), std::invalid_argument);
}
