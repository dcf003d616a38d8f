#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace refquery {

using BinaryMask = std::vector<std::uint8_t>;

// Region similarity J: |pred ∩ gt| / |pred ∪ gt|, 1 when both masks are empty.
double region_similarity(const BinaryMask& pred, const BinaryMask& gt, int h, int w);

// Foreground pixels with a 4-neighbour background or an image-border adjacency.
BinaryMask boundary_map(const BinaryMask& m, int h, int w);

// Boundary F-measure with an exact Euclidean distance tolerance.
double contour_accuracy(const BinaryMask& pred, const BinaryMask& gt, int h, int w, double tol_radius);

// ceil(0.8% of the image diagonal), the usual boundary tolerance.
double default_boundary_tolerance(int h, int w);

struct ClipMetrics {
  std::string clip_id;
  double j = 0.0, f = 0.0, jf = 0.0;
};

struct MetricReport {
  std::vector<ClipMetrics> clips;
  double mean_j = 0.0, mean_f = 0.0, mean_jf = 0.0;
};

// Per-clip metrics (frame means of J and F against the union of target
// object masks), then dataset means. Predictions live in
// <predictions_dir>/<clip_id>.json. Missing clips or frame-count mismatches
// raise ValidationError listing the offenders. Honors REFQUERY_THREADS.
MetricReport evaluate_dataset(const std::vector<std::string>& gt_manifests, const std::string& predictions_dir);

std::string format_metric_table(const MetricReport& report);
std::string format_metric_csv(const MetricReport& report);

}  // namespace refquery
