#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <json.hpp>

#include "refquery/data.hpp"
#include "refquery/errors.hpp"
#include "refquery/rng.hpp"

using namespace refquery;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

fs::path temp_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("refquery_test_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

SyntheticSpec small_spec(std::uint64_t seed) {
  SyntheticSpec s;
  s.seed = seed;
  s.frames = 4;
  s.base_h = 32;
  s.base_w = 32;
  s.scales = {{8, 8, 6}, {4, 4, 6}};
  s.text_channels = 6;
  s.text_tokens = 3;
  s.num_objects = 2;
  s.min_radius = 4;
  s.max_radius = 7;
  s.max_speed = 1.0f;
  return s;
}

bool clips_equal(const FeatureClip& a, const FeatureClip& b) {
  if (a.frames != b.frames || a.base_h != b.base_h || a.base_w != b.base_w) return false;
  if (a.text_tokens != b.text_tokens || a.text_sentence != b.text_sentence) return false;
  if (a.visual != b.visual) return false;
  if (a.objects.size() != b.objects.size()) return false;
  for (std::size_t i = 0; i < a.objects.size(); ++i)
    if (a.objects[i].masks != b.objects[i].masks) return false;
  return a.target_ids == b.target_ids;
}

}  // namespace

TEST_CASE("rle round trip on random masks") {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 1 + static_cast<int>(rng.below(200));
    std::vector<std::uint8_t> mask(n);
    for (auto& v : mask) v = rng.below(2);
    auto runs = rle_encode(mask);
    // starts with background: first run may be zero-length only if mask[0]==1
    CHECK(rle_decode(runs, n) == mask);
  }
  // all-foreground starts with a zero background run
  std::vector<std::uint8_t> fg(5, 1);
  auto runs = rle_encode(fg);
  CHECK(runs.front() == 0);
  CHECK(rle_decode(runs, 5) == fg);
}

TEST_CASE("rle rejects malformed runs") {
  CHECK_THROWS_AS(rle_decode({3, 4}, 5), ValidationError);
  CHECK_THROWS_AS(rle_decode({-1, 6}, 5), ValidationError);
}

TEST_CASE("generator is deterministic and satisfies invariants") {
  auto a = generate_synthetic(small_spec(7));
  auto b = generate_synthetic(small_spec(7));
  CHECK(clips_equal(a, b));
  CHECK(a.frames == 4);

  auto c = generate_synthetic(small_spec(8));
  CHECK(!clips_equal(a, c));

  // property: random specs produce valid clips
  Rng rng(99);
  for (int trial = 0; trial < 10; ++trial) {
    SyntheticSpec s = small_spec(100 + trial);
    s.frames = 1 + static_cast<int>(rng.below(6));
    s.num_objects = 1 + static_cast<int>(rng.below(3));
    s.text_tokens = 1 + static_cast<int>(rng.below(4));
    auto clip = generate_synthetic(s);
    CHECK_NOTHROW(clip.validate());
  }
}

TEST_CASE("zero-velocity object keeps an identical mask across frames") {
  SyntheticSpec s = small_spec(5);
  s.objects = {{16.0f, 16.0f, 6.0f, 0.0f, 0.0f}};
  auto clip = generate_synthetic(s);
  for (int t = 1; t < clip.frames; ++t) CHECK(clip.objects[0].masks[t] == clip.objects[0].masks[0]);
}

TEST_CASE("disk mask area matches brute-force rasterization") {
  SyntheticSpec s = small_spec(6);
  s.objects = {{15.0f, 14.0f, 5.5f, 0.0f, 0.0f}};
  auto clip = generate_synthetic(s);
  std::int64_t count = 0;
  for (int y = 0; y < s.base_h; ++y)
    for (int x = 0; x < s.base_w; ++x) {
      const float dx = x - 15.0f, dy = y - 14.0f;
      if (dx * dx + dy * dy <= 5.5f * 5.5f) ++count;
    }
  std::int64_t area = 0;
  for (auto v : clip.objects[0].masks[0]) area += v;
  CHECK(area == count);
}

TEST_CASE("zero objects is a configuration error") {
  SyntheticSpec s = small_spec(1);
  s.num_objects = 0;
  CHECK_THROWS_AS(generate_synthetic(s), ConfigError);
}

TEST_CASE("save/load round trip is bit exact") {
  auto dir = temp_dir("roundtrip");
  auto clip = generate_synthetic(small_spec(11));
  clip.resize_rule = "longest side 640, shortest side 360";
  save_clip(clip, dir.string());
  auto loaded = load_clip((dir / "manifest.json").string());
  CHECK(clips_equal(clip, loaded));
  CHECK(loaded.clip_id == clip.clip_id);
  CHECK(loaded.expression == clip.expression);
  CHECK(loaded.resize_rule == clip.resize_rule);

  // saving the loaded clip again produces identical bytes
  auto dir2 = temp_dir("roundtrip2");
  save_clip(loaded, dir2.string());
  for (const auto& entry : fs::directory_iterator(dir)) {
    std::ifstream f1(entry.path(), std::ios::binary);
    std::ifstream f2(dir2 / entry.path().filename(), std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), {});
    std::string s2((std::istreambuf_iterator<char>(f2)), {});
    CHECK(s1 == s2);
  }
}

TEST_CASE("loader rejects corrupted manifests and tensor files") {
  auto dir = temp_dir("fuzz");
  auto clip = generate_synthetic(small_spec(13));
  save_clip(clip, dir.string());
  const std::string manifest = (dir / "manifest.json").string();
  CHECK_NOTHROW(load_clip(manifest));

  json good;
  {
    std::ifstream in(manifest);
    in >> good;
  }
  auto write_manifest = [&](const json& j) {
    std::ofstream out(manifest);
    out << j.dump(2);
  };

  SUBCASE("truncating each tensor file fails") {
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.path().extension() != ".f32") continue;
      const auto original = fs::file_size(entry.path());
      fs::resize_file(entry.path(), original - 4);
      CHECK_THROWS_AS(load_clip(manifest), ValidationError);
      fs::resize_file(entry.path(), original);  // restore wrong bytes but right size
      std::ofstream fix(entry.path(), std::ios::binary | std::ios::in);
    }
  }
  SUBCASE("flipping header fields fails") {
    for (const char* field : {"frames", "base_height", "base_width"}) {
      json bad = good;
      bad[field] = good[field].get<int>() + 1;
      write_manifest(bad);
      CHECK_THROWS_AS(load_clip(manifest), ValidationError);
    }
    write_manifest(good);
  }
  SUBCASE("scale header corruption fails") {
    json bad = good;
    bad["scales"][0]["channels"] = good["scales"][0]["channels"].get<int>() + 1;
    write_manifest(bad);
    CHECK_THROWS_AS(load_clip(manifest), ValidationError);

    bad = good;
    bad["scales"][0]["height"] = 3;
    write_manifest(bad);
    CHECK_THROWS_AS(load_clip(manifest), ValidationError);
    write_manifest(good);
  }
  SUBCASE("missing scale file entry names the problem") {
    json bad = good;
    bad["scales"][1]["files"].erase(0);
    write_manifest(bad);
    CHECK_THROWS_WITH_AS(load_clip(manifest), doctest::Contains("scale 1"), ValidationError);
    write_manifest(good);
  }
  SUBCASE("mask runs that do not cover the frame fail") {
    json bad = good;
    bad["objects"][0]["masks"][0] = {5, 3};
    write_manifest(bad);
    CHECK_THROWS_AS(load_clip(manifest), ValidationError);
    write_manifest(good);
  }
  SUBCASE("unknown target id fails") {
    json bad = good;
    bad["target_ids"] = {17};
    write_manifest(bad);
    CHECK_THROWS_WITH_AS(load_clip(manifest), doctest::Contains("17"), ValidationError);
    write_manifest(good);
  }
}

TEST_CASE("prediction files round trip") {
  auto dir = temp_dir("pred");
  ClipPrediction p;
  p.clip_id = "clip-x";
  p.h = 4;
  p.w = 4;
  p.frame_masks = {{0, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0},
                   std::vector<std::uint8_t>(16, 1)};
  const std::string path = (dir / "clip-x.json").string();
  save_prediction(p, path);
  auto q = load_prediction(path);
  CHECK(q.clip_id == p.clip_id);
  CHECK(q.frame_masks == p.frame_masks);
}
