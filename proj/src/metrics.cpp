#include "refquery/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <sstream>
#include <thread>

#include "refquery/data.hpp"
#include "refquery/errors.hpp"

namespace fs = std::filesystem;

namespace refquery {

double region_similarity(const BinaryMask& pred, const BinaryMask& gt, int h, int w) {
  const std::size_t px = static_cast<std::size_t>(h) * w;
  if (pred.size() != px || gt.size() != px)
    throw ValidationError("region_similarity: mask size does not match " + std::to_string(h) + "x" +
                          std::to_string(w));
  std::int64_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < px; ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    inter += (p && g) ? 1 : 0;
    uni += (p || g) ? 1 : 0;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

BinaryMask boundary_map(const BinaryMask& m, int h, int w) {
  BinaryMask b(static_cast<std::size_t>(h) * w, 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!m[static_cast<std::size_t>(y) * w + x]) continue;
      const bool border = y == 0 || y == h - 1 || x == 0 || x == w - 1;
      bool bg = false;
      if (!border) {
        bg = !m[static_cast<std::size_t>(y - 1) * w + x] || !m[static_cast<std::size_t>(y + 1) * w + x] ||
             !m[static_cast<std::size_t>(y) * w + x - 1] || !m[static_cast<std::size_t>(y) * w + x + 1];
      }
      if (border || bg) b[static_cast<std::size_t>(y) * w + x] = 1;
    }
  return b;
}

namespace {

// Fraction of `src` boundary pixels within tol (exact Euclidean) of any `ref`
// boundary pixel. Returns {matched, total}.
std::pair<std::int64_t, std::int64_t> boundary_matches(const BinaryMask& src, const BinaryMask& ref, int h,
                                                       int w, double tol) {
  const int r = static_cast<int>(std::floor(tol));
  const double tol2 = tol * tol;
  std::int64_t matched = 0, total = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!src[static_cast<std::size_t>(y) * w + x]) continue;
      ++total;
      bool hit = false;
      for (int dy = -r; dy <= r && !hit; ++dy) {
        const int yy = y + dy;
        if (yy < 0 || yy >= h) continue;
        for (int dx = -r; dx <= r; ++dx) {
          const int xx = x + dx;
          if (xx < 0 || xx >= w) continue;
          if (static_cast<double>(dx) * dx + static_cast<double>(dy) * dy > tol2) continue;
          if (ref[static_cast<std::size_t>(yy) * w + xx]) {
            hit = true;
            break;
          }
        }
      }
      if (hit) ++matched;
    }
  return {matched, total};
}

}  // namespace

double default_boundary_tolerance(int h, int w) {
  return std::ceil(0.008 * std::sqrt(static_cast<double>(h) * h + static_cast<double>(w) * w));
}

double contour_accuracy(const BinaryMask& pred, const BinaryMask& gt, int h, int w, double tol_radius) {
  const std::size_t px = static_cast<std::size_t>(h) * w;
  if (pred.size() != px || gt.size() != px)
    throw ValidationError("contour_accuracy: mask size does not match " + std::to_string(h) + "x" +
                          std::to_string(w));
  if (tol_radius < 0) throw ValidationError("contour_accuracy: negative tolerance");
  const bool pred_empty = std::all_of(pred.begin(), pred.end(), [](std::uint8_t v) { return v == 0; });
  const bool gt_empty = std::all_of(gt.begin(), gt.end(), [](std::uint8_t v) { return v == 0; });
  if (pred_empty && gt_empty) return 1.0;
  if (pred_empty || gt_empty) return 0.0;
  const BinaryMask bp = boundary_map(pred, h, w);
  const BinaryMask bg = boundary_map(gt, h, w);
  const auto [pm, pt] = boundary_matches(bp, bg, h, w, tol_radius);
  const auto [rm, rt] = boundary_matches(bg, bp, h, w, tol_radius);
  const double precision = pt > 0 ? static_cast<double>(pm) / static_cast<double>(pt) : 0.0;
  const double recall = rt > 0 ? static_cast<double>(rm) / static_cast<double>(rt) : 0.0;
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

namespace {

int eval_threads() {
  const char* env = std::getenv("REFQUERY_THREADS");
  if (!env) return static_cast<int>(std::thread::hardware_concurrency());
  const int n = std::atoi(env);
  return n > 0 ? n : 1;
}

ClipMetrics evaluate_clip(const std::string& manifest, const std::string& predictions_dir) {
  FeatureClip clip = load_clip(manifest);
  const std::string pred_path = (fs::path(predictions_dir) / (clip.clip_id + ".json")).string();
  if (!fs::exists(pred_path)) throw ValidationError("missing prediction for clip " + clip.clip_id);
  ClipPrediction pred = load_prediction(pred_path);
  if (pred.h != clip.base_h || pred.w != clip.base_w)
    throw ValidationError("prediction for clip " + clip.clip_id + " has wrong resolution");
  if (static_cast<int>(pred.frame_masks.size()) != clip.frames) {
    std::ostringstream os;
    os << "prediction for clip " << clip.clip_id << " missing frames:";
    for (int t = static_cast<int>(pred.frame_masks.size()); t < clip.frames; ++t) os << " " << t;
    throw ValidationError(os.str());
  }
  const std::size_t px = static_cast<std::size_t>(clip.base_h) * clip.base_w;
  const double tol = default_boundary_tolerance(clip.base_h, clip.base_w);
  double j_sum = 0.0, f_sum = 0.0;
  for (int t = 0; t < clip.frames; ++t) {
    BinaryMask gt(px, 0);
    for (int id : clip.target_ids)
      for (const auto& obj : clip.objects)
        if (obj.id == id)
          for (std::size_t i = 0; i < px; ++i) gt[i] = gt[i] || obj.masks[static_cast<std::size_t>(t)][i];
    j_sum += region_similarity(pred.frame_masks[static_cast<std::size_t>(t)], gt, clip.base_h, clip.base_w);
    f_sum += contour_accuracy(pred.frame_masks[static_cast<std::size_t>(t)], gt, clip.base_h, clip.base_w, tol);
  }
  ClipMetrics cm;
  cm.clip_id = clip.clip_id;
  cm.j = j_sum / clip.frames;
  cm.f = f_sum / clip.frames;
  cm.jf = 0.5 * (cm.j + cm.f);
  return cm;
}

}  // namespace

MetricReport evaluate_dataset(const std::vector<std::string>& gt_manifests, const std::string& predictions_dir) {
  if (gt_manifests.empty()) throw ValidationError("evaluate_dataset: no ground-truth manifests given");
  MetricReport report;
  report.clips.resize(gt_manifests.size());
  const int nthreads = std::max(1, std::min<int>(eval_threads(), static_cast<int>(gt_manifests.size())));
  std::vector<std::string> errors(gt_manifests.size());
  auto worker = [&](int tid) {
    for (std::size_t i = static_cast<std::size_t>(tid); i < gt_manifests.size(); i += static_cast<std::size_t>(nthreads)) {
      try {
        report.clips[i] = evaluate_clip(gt_manifests[i], predictions_dir);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  if (nthreads == 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < nthreads; ++t) pool.emplace_back(worker, t);
    for (auto& th : pool) th.join();
  }
  std::string combined;
  for (const auto& e : errors)
    if (!e.empty()) combined += (combined.empty() ? "" : "; ") + e;
  if (!combined.empty()) throw ValidationError(combined);

  for (const auto& c : report.clips) {
    report.mean_j += c.j;
    report.mean_f += c.f;
    report.mean_jf += c.jf;
  }
  report.mean_j /= static_cast<double>(report.clips.size());
  report.mean_f /= static_cast<double>(report.clips.size());
  report.mean_jf /= static_cast<double>(report.clips.size());
  return report;
}

std::string format_metric_table(const MetricReport& report) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  std::size_t idw = 4;
  for (const auto& c : report.clips) idw = std::max(idw, c.clip_id.size());
  os << std::left << std::setw(static_cast<int>(idw) + 2) << "clip" << std::right << std::setw(8) << "J&F"
     << std::setw(8) << "J" << std::setw(8) << "F" << "\n";
  for (const auto& c : report.clips)
    os << std::left << std::setw(static_cast<int>(idw) + 2) << c.clip_id << std::right << std::setw(8) << c.jf
       << std::setw(8) << c.j << std::setw(8) << c.f << "\n";
  os << std::left << std::setw(static_cast<int>(idw) + 2) << "mean" << std::right << std::setw(8)
     << report.mean_jf << std::setw(8) << report.mean_j << std::setw(8) << report.mean_f << "\n";
  return os.str();
}

std::string format_metric_csv(const MetricReport& report) {
  std::ostringstream os;
  os << std::setprecision(10);
  os << "clip_id,JF,J,F\n";
  for (const auto& c : report.clips) os << c.clip_id << "," << c.jf << "," << c.j << "," << c.f << "\n";
  os << "mean," << report.mean_jf << "," << report.mean_j << "," << report.mean_f << "\n";
  return os.str();
}

}  // namespace refquery
