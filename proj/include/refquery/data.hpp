#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace refquery {

struct ScaleInfo {
  int h = 0, w = 0, channels = 0;
};

// Per-object ground truth: one binary mask per frame at base resolution.
struct ObjectAnnotation {
  int id = 0;
  std::vector<std::vector<std::uint8_t>> masks;  // [frame][base_h*base_w], values 0/1
};

// One (video, text) sample as frozen-backbone features plus ground truth.
struct FeatureClip {
  std::string clip_id;
  std::string expression;
  int frames = 0;
  int base_h = 0, base_w = 0;  // ground-truth mask resolution
  std::vector<ScaleInfo> scales;
  // visual[t][l]: h_l x w_l x c_l floats, row-major (y, x, channel)
  std::vector<std::vector<std::vector<float>>> visual;
  int text_tokens_n = 0;
  int text_channels = 0;
  std::vector<float> text_tokens;    // text_tokens_n x text_channels
  std::vector<float> text_sentence;  // text_channels
  std::vector<ObjectAnnotation> objects;
  std::vector<int> target_ids;
  // Provenance note for real-data exports (e.g. a resize rule applied before
  // feature extraction); carried through the manifest, never enforced.
  std::string resize_rule;

  void validate() const;  // throws ValidationError naming the offending field
};

// One moving disk; gt mask is the rasterized disk per frame.
struct DiskSpec {
  float cx = 0, cy = 0;  // initial center, base pixels
  float radius = 4;
  float vx = 0, vy = 0;  // pixels per frame; bounces off borders
};

// Deterministic stand-in for the frozen backbone. Same seed, same bytes.
struct SyntheticSpec {
  std::uint64_t seed = 1;
  int frames = 8;
  int base_h = 64, base_w = 64;
  std::vector<ScaleInfo> scales = {{16, 16, 64}, {8, 8, 64}, {4, 4, 64}};
  int text_channels = 64;
  int text_tokens = 4;
  int num_objects = 2;
  float min_radius = 8.0f;
  float max_radius = 14.0f;
  float max_speed = 1.5f;
  float feature_noise = 0.02f;
  int target_index = -1;          // -1: drawn from the seed
  std::vector<DiskSpec> objects;  // optional explicit geometry; overrides num_objects
};

FeatureClip generate_synthetic(const SyntheticSpec& spec);

// Run-length codec for binary masks: alternating background/foreground run
// lengths in row-major order, starting with background.
std::vector<std::int64_t> rle_encode(const std::vector<std::uint8_t>& mask);
std::vector<std::uint8_t> rle_decode(const std::vector<std::int64_t>& runs, std::int64_t expected_size);

// Clip on-disk format: <dir>/manifest.json plus raw little-endian .f32 tensor
// files; masks RLE-embedded in the manifest. Writes are atomic (temp+rename).
void save_clip(const FeatureClip& clip, const std::string& dir);
FeatureClip load_clip(const std::string& manifest_path);

// Inference output: per-frame binary masks at base resolution.
struct ClipPrediction {
  std::string clip_id;
  int h = 0, w = 0;
  std::vector<std::vector<std::uint8_t>> frame_masks;
};

void save_prediction(const ClipPrediction& pred, const std::string& path);
ClipPrediction load_prediction(const std::string& path);

namespace io {
std::vector<float> read_f32_file(const std::string& path, std::int64_t expected_count);
void write_file_atomic(const std::string& path, const void* data, std::size_t bytes);
void write_text_atomic(const std::string& path, const std::string& text);
}  // namespace io

}  // namespace refquery
