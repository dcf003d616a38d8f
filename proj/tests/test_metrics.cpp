#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "refquery/data.hpp"
#include "refquery/errors.hpp"
#include "refquery/metrics.hpp"
#include "refquery/rng.hpp"

using namespace refquery;
namespace fs = std::filesystem;

namespace {

// Independent oracles: direct pixel counting for J, O(B^2) pairwise boundary
// distances for F. Deliberately share no code with the implementation.
double j_oracle(const BinaryMask& a, const BinaryMask& b) {
  std::int64_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] && b[i]) ++inter;
    if (a[i] || b[i]) ++uni;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / uni;
}

std::vector<std::pair<int, int>> boundary_pixels(const BinaryMask& m, int h, int w) {
  std::vector<std::pair<int, int>> out;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!m[y * w + x]) continue;
      bool edge = y == 0 || y == h - 1 || x == 0 || x == w - 1;
      if (!edge)
        edge = !m[(y - 1) * w + x] || !m[(y + 1) * w + x] || !m[y * w + x - 1] || !m[y * w + x + 1];
      if (edge) out.push_back({y, x});
    }
  return out;
}

double f_oracle(const BinaryMask& pred, const BinaryMask& gt, int h, int w, double tol) {
  bool pe = true, ge = true;
  for (auto v : pred) pe = pe && !v;
  for (auto v : gt) ge = ge && !v;
  if (pe && ge) return 1.0;
  if (pe || ge) return 0.0;
  auto bp = boundary_pixels(pred, h, w);
  auto bg = boundary_pixels(gt, h, w);
  auto frac_within = [tol](const std::vector<std::pair<int, int>>& src,
                           const std::vector<std::pair<int, int>>& ref) {
    std::int64_t hit = 0;
    for (auto [y, x] : src) {
      double best = 1e18;
      for (auto [gy, gx] : ref) {
        const double d = std::sqrt(static_cast<double>((y - gy) * (y - gy) + (x - gx) * (x - gx)));
        best = std::min(best, d);
      }
      if (best <= tol) ++hit;
    }
    return static_cast<double>(hit) / static_cast<double>(src.size());
  };
  const double p = frac_within(bp, bg);
  const double r = frac_within(bg, bp);
  return p + r == 0 ? 0.0 : 2 * p * r / (p + r);
}

BinaryMask rect(int h, int w, int y0, int x0, int y1, int x1) {
  BinaryMask m(static_cast<std::size_t>(h) * w, 0);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) m[y * w + x] = 1;
  return m;
}

}  // namespace

TEST_CASE("region similarity basics") {
  BinaryMask a = {1, 1, 0, 0};
  BinaryMask b = {0, 0, 1, 1};
  CHECK(region_similarity(a, a, 2, 2) == 1.0);
  CHECK(region_similarity(a, b, 2, 2) == 0.0);
  // top row vs left column: intersection 1, union 3
  BinaryMask top = {1, 1, 0, 0};
  BinaryMask left = {1, 0, 1, 0};
  CHECK(region_similarity(top, left, 2, 2) == doctest::Approx(1.0 / 3));
  // both empty
  BinaryMask e(4, 0);
  CHECK(region_similarity(e, e, 2, 2) == 1.0);
  CHECK_THROWS_AS(region_similarity(a, BinaryMask(9, 0), 2, 2), ValidationError);
}

TEST_CASE("contour accuracy basics") {
  auto sq = rect(16, 16, 6, 6, 10, 10);
  CHECK(contour_accuracy(sq, sq, 16, 16, 1.0) == 1.0);
  CHECK(contour_accuracy(sq, sq, 16, 16, 0.0) == 1.0);
  BinaryMask empty(256, 0);
  CHECK(contour_accuracy(empty, sq, 16, 16, 1.0) == 0.0);
  CHECK(contour_accuracy(sq, empty, 16, 16, 1.0) == 0.0);
  CHECK(contour_accuracy(empty, empty, 16, 16, 1.0) == 1.0);

  auto shifted = rect(16, 16, 6, 7, 10, 11);  // one pixel right
  const double f = contour_accuracy(sq, shifted, 16, 16, 1.0);
  CHECK(f == f_oracle(sq, shifted, 16, 16, 1.0));
  CHECK(f > 0.0);
  CHECK(f <= 1.0);
}

TEST_CASE("metrics match brute-force oracles on random masks") {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const int h = 4 + static_cast<int>(rng.below(29));
    const int w = 4 + static_cast<int>(rng.below(29));
    BinaryMask a(static_cast<std::size_t>(h) * w), b(static_cast<std::size_t>(h) * w);
    // blobby random masks: threshold a few random rectangles
    auto randmask = [&](BinaryMask& m) {
      std::fill(m.begin(), m.end(), 0);
      const int rects = static_cast<int>(rng.below(4));
      for (int r = 0; r < rects; ++r) {
        int y0 = static_cast<int>(rng.below(h)), x0 = static_cast<int>(rng.below(w));
        int y1 = y0 + 1 + static_cast<int>(rng.below(h - y0));
        int x1 = x0 + 1 + static_cast<int>(rng.below(w - x0));
        for (int y = y0; y < y1; ++y)
          for (int x = x0; x < x1; ++x) m[y * w + x] = 1;
      }
    };
    randmask(a);
    randmask(b);
    const double tol = default_boundary_tolerance(h, w);
    CAPTURE(trial);
    CHECK(region_similarity(a, b, h, w) == j_oracle(a, b));
    CHECK(contour_accuracy(a, b, h, w, tol) == f_oracle(a, b, h, w, tol));
  }
}

TEST_CASE("symmetry and translation invariance") {
  Rng rng(5);
  auto a = rect(20, 20, 3, 4, 9, 11);
  auto b = rect(20, 20, 5, 5, 12, 9);
  CHECK(region_similarity(a, b, 20, 20) == region_similarity(b, a, 20, 20));
  CHECK(contour_accuracy(a, b, 20, 20, 2.0) == contour_accuracy(b, a, 20, 20, 2.0));

  auto at = rect(20, 20, 3 + 4, 4 + 3, 9 + 4, 11 + 3);
  auto bt = rect(20, 20, 5 + 4, 5 + 3, 12 + 4, 9 + 3);
  CHECK(region_similarity(a, b, 20, 20) == region_similarity(at, bt, 20, 20));
  CHECK(contour_accuracy(a, b, 20, 20, 2.0) == contour_accuracy(at, bt, 20, 20, 2.0));
}

TEST_CASE("contour accuracy weakly decreases under nested dilation") {
  const int h = 24, w = 24;
  auto gt = rect(h, w, 8, 8, 16, 16);
  auto dilate = [&](const BinaryMask& m) {
    BinaryMask out(m.size(), 0);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        bool v = false;
        for (int dy = -1; dy <= 1 && !v; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = y + dy, xx = x + dx;
            if (yy >= 0 && yy < h && xx >= 0 && xx < w && m[yy * w + xx]) {
              v = true;
              break;
            }
          }
        out[y * w + x] = v;
      }
    return out;
  };
  BinaryMask cur = gt;
  double prev = contour_accuracy(cur, gt, h, w, 1.0);
  CHECK(prev == 1.0);
  for (int k = 0; k < 3; ++k) {
    cur = dilate(cur);
    const double f = contour_accuracy(cur, gt, h, w, 1.0);
    CHECK(f <= prev + 1e-12);
    prev = f;
  }
}

TEST_CASE("evaluate_dataset aggregates per-clip means") {
  fs::path dir = fs::temp_directory_path() / "refquery_test_eval";
  fs::remove_all(dir);
  fs::create_directories(dir / "preds");

  SyntheticSpec s;
  s.frames = 2;
  s.base_h = 16;
  s.base_w = 16;
  s.scales = {{8, 8, 4}, {4, 4, 4}};
  s.text_channels = 4;
  s.text_tokens = 2;
  s.objects = {{8.0f, 8.0f, 4.0f, 0.5f, 0.0f}};
  s.target_index = 0;

  std::vector<std::string> manifests;
  std::vector<FeatureClip> clips;
  for (int i = 0; i < 2; ++i) {
    s.seed = 50 + i;
    auto clip = generate_synthetic(s);
    clip.clip_id = "clip" + std::to_string(i);
    save_clip(clip, (dir / clip.clip_id).string());
    manifests.push_back((dir / clip.clip_id / "manifest.json").string());
    clips.push_back(clip);
  }

  SUBCASE("perfect predictions score 1") {
    for (const auto& clip : clips) {
      ClipPrediction p;
      p.clip_id = clip.clip_id;
      p.h = clip.base_h;
      p.w = clip.base_w;
      for (int t = 0; t < clip.frames; ++t) p.frame_masks.push_back(clip.objects[0].masks[t]);
      save_prediction(p, (dir / "preds" / (clip.clip_id + ".json")).string());
    }
    auto report = evaluate_dataset(manifests, (dir / "preds").string());
    CHECK(report.mean_jf == doctest::Approx(1.0));
    CHECK(report.mean_j == doctest::Approx(1.0));
    CHECK(report.mean_f == doctest::Approx(1.0));
  }

  SUBCASE("empty predictions score 0 and means average per-clip values") {
    // clip0: perfect; clip1: empty
    {
      ClipPrediction p;
      p.clip_id = "clip0";
      p.h = 16;
      p.w = 16;
      for (int t = 0; t < 2; ++t) p.frame_masks.push_back(clips[0].objects[0].masks[t]);
      save_prediction(p, (dir / "preds" / "clip0.json").string());
    }
    {
      ClipPrediction p;
      p.clip_id = "clip1";
      p.h = 16;
      p.w = 16;
      p.frame_masks.assign(2, BinaryMask(256, 0));
      save_prediction(p, (dir / "preds" / "clip1.json").string());
    }
    auto report = evaluate_dataset(manifests, (dir / "preds").string());
    CHECK(report.clips[0].jf == doctest::Approx(1.0));
    CHECK(report.clips[1].j == doctest::Approx(0.0));
    CHECK(report.clips[1].f == doctest::Approx(0.0));
    CHECK(report.mean_jf == doctest::Approx(0.5 * (report.clips[0].jf + report.clips[1].jf)));
  }

  SUBCASE("missing prediction raises an error naming the clip") {
    fs::remove_all(dir / "preds");
    fs::create_directories(dir / "preds");
    CHECK_THROWS_WITH_AS(evaluate_dataset(manifests, (dir / "preds").string()),
                         doctest::Contains("clip0"), ValidationError);
  }

  SUBCASE("report formatting includes all clips") {
    for (const auto& clip : clips) {
      ClipPrediction p;
      p.clip_id = clip.clip_id;
      p.h = clip.base_h;
      p.w = clip.base_w;
      for (int t = 0; t < clip.frames; ++t) p.frame_masks.push_back(clip.objects[0].masks[t]);
      save_prediction(p, (dir / "preds" / (clip.clip_id + ".json")).string());
    }
    auto report = evaluate_dataset(manifests, (dir / "preds").string());
    auto table = format_metric_table(report);
    CHECK(table.find("clip0") != std::string::npos);
    CHECK(table.find("J&F") != std::string::npos);
    auto csv = format_metric_csv(report);
    CHECK(csv.find("clip_id,JF,J,F") != std::string::npos);
    CHECK(csv.find("mean,") != std::string::npos);
  }
}
