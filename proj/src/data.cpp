#include "refquery/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <json.hpp>

#include "refquery/errors.hpp"
#include "refquery/rng.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace refquery {

namespace io {

std::vector<float> read_f32_file(const std::string& path, std::int64_t expected_count) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw ValidationError("missing tensor file: " + path);
  const std::streamsize bytes = in.tellg();
  if (bytes != static_cast<std::streamsize>(expected_count * 4))
    throw ValidationError("tensor file " + path + ": expected " + std::to_string(expected_count * 4) +
                          " bytes, found " + std::to_string(bytes));
  in.seekg(0);
  std::vector<float> out(static_cast<std::size_t>(expected_count));
  in.read(reinterpret_cast<char*>(out.data()), bytes);
  if (!in) throw ValidationError("short read on tensor file: " + path);
  return out;
}

void write_file_atomic(const std::string& path, const void* data, std::size_t bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot write file: " + tmp);
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
    if (!out) throw ValidationError("short write on file: " + tmp);
  }
  fs::rename(tmp, path);
}

void write_text_atomic(const std::string& path, const std::string& text) {
  write_file_atomic(path, text.data(), text.size());
}

}  // namespace io

void FeatureClip::validate() const {
  if (frames < 1) throw ValidationError("clip " + clip_id + ": frames must be >= 1");
  if (base_h < 1 || base_w < 1) throw ValidationError("clip " + clip_id + ": invalid base resolution");
  if (scales.empty()) throw ValidationError("clip " + clip_id + ": no feature scales");
  for (std::size_t l = 0; l + 1 < scales.size(); ++l) {
    if (!(scales[l + 1].h < scales[l].h && scales[l + 1].w < scales[l].w))
      throw ValidationError("clip " + clip_id + ": scale " + std::to_string(l + 1) +
                            " is not strictly smaller than scale " + std::to_string(l));
  }
  if (static_cast<int>(visual.size()) != frames)
    throw ValidationError("clip " + clip_id + ": visual feature frame count mismatch");
  for (int t = 0; t < frames; ++t) {
    if (visual[static_cast<std::size_t>(t)].size() != scales.size())
      throw ValidationError("clip " + clip_id + ": frame " + std::to_string(t) + " scale count mismatch");
    for (std::size_t l = 0; l < scales.size(); ++l) {
      const auto& s = scales[l];
      const std::size_t want = static_cast<std::size_t>(s.h) * s.w * s.channels;
      if (visual[static_cast<std::size_t>(t)][l].size() != want)
        throw ValidationError("clip " + clip_id + ": visual_features frame " + std::to_string(t) +
                              " scale " + std::to_string(l) + " has wrong element count");
    }
  }
  if (text_tokens_n < 1) throw ValidationError("clip " + clip_id + ": text_tokens must be >= 1");
  if (text_channels < 1) throw ValidationError("clip " + clip_id + ": text_channels must be >= 1");
  if (text_tokens.size() != static_cast<std::size_t>(text_tokens_n) * text_channels)
    throw ValidationError("clip " + clip_id + ": text_tokens size mismatch");
  if (text_sentence.size() != static_cast<std::size_t>(text_channels))
    throw ValidationError("clip " + clip_id + ": text_sentence size mismatch");
  const std::size_t px = static_cast<std::size_t>(base_h) * base_w;
  for (const auto& obj : objects) {
    if (static_cast<int>(obj.masks.size()) != frames)
      throw ValidationError("clip " + clip_id + ": object " + std::to_string(obj.id) + " mask frame count mismatch");
    for (const auto& m : obj.masks) {
      if (m.size() != px)
        throw ValidationError("clip " + clip_id + ": object " + std::to_string(obj.id) + " gt_mask resolution mismatch");
      for (auto v : m)
        if (v > 1)
          throw ValidationError("clip " + clip_id + ": object " + std::to_string(obj.id) + " gt_mask has non-binary values");
    }
  }
  for (int id : target_ids) {
    bool found = false;
    for (const auto& obj : objects) found = found || obj.id == id;
    if (!found) throw ValidationError("clip " + clip_id + ": target_ids references unknown object " + std::to_string(id));
  }
}

std::vector<std::int64_t> rle_encode(const std::vector<std::uint8_t>& mask) {
  std::vector<std::int64_t> runs;
  std::uint8_t cur = 0;  // background first
  std::int64_t len = 0;
  for (std::uint8_t v : mask) {
    if ((v != 0) == (cur != 0)) {
      ++len;
    } else {
      runs.push_back(len);
      cur = v;
      len = 1;
    }
  }
  runs.push_back(len);
  return runs;
}

std::vector<std::uint8_t> rle_decode(const std::vector<std::int64_t>& runs, std::int64_t expected_size) {
  std::vector<std::uint8_t> mask;
  mask.reserve(static_cast<std::size_t>(expected_size));
  std::uint8_t cur = 0;
  for (std::int64_t r : runs) {
    if (r < 0) throw ValidationError("mask runs: negative run length");
    mask.insert(mask.end(), static_cast<std::size_t>(r), cur);
    cur = cur ? 0 : 1;
  }
  if (static_cast<std::int64_t>(mask.size()) != expected_size)
    throw ValidationError("mask runs: decoded size " + std::to_string(mask.size()) + " does not match expected " +
                          std::to_string(expected_size));
  return mask;
}

namespace {

std::string scale_file(int t, int l) { return "frame" + std::to_string(t) + "_scale" + std::to_string(l) + ".f32"; }

// Fixed per-object-index channel signature; shared between visual features
// and the text encoding so the referring task is learnable across clips.
float index_signature(int object_index, int channel) {
  return std::cos(0.9f * static_cast<float>(channel + 1) * static_cast<float>(object_index + 1) +
                  0.7f * static_cast<float>(object_index + 1));
}

float direction_signature(float angle, int channel) {
  const int k = 1 + channel % 4;
  return std::cos(static_cast<float>(k) * angle + 0.61803399f * static_cast<float>(channel));
}

}  // namespace

FeatureClip generate_synthetic(const SyntheticSpec& spec) {
  if (spec.frames < 1 || spec.base_h < 1 || spec.base_w < 1 || spec.scales.empty() ||
      spec.text_channels < 1 || spec.text_tokens < 1)
    throw ConfigError("synthetic spec: dimensions must be positive");
  Rng rng(spec.seed);

  std::vector<DiskSpec> disks = spec.objects;
  if (disks.empty()) {
    if (spec.num_objects < 1) throw ConfigError("synthetic spec: at least one object required");
    for (int i = 0; i < spec.num_objects; ++i) {
      DiskSpec d;
      d.radius = rng.uniform(spec.min_radius, spec.max_radius);
      d.cx = rng.uniform(d.radius, static_cast<float>(spec.base_w) - 1.0f - d.radius);
      d.cy = rng.uniform(d.radius, static_cast<float>(spec.base_h) - 1.0f - d.radius);
      const float angle = rng.uniform(0.0f, 6.2831853f);
      const float speed = rng.uniform(0.0f, spec.max_speed);
      d.vx = speed * std::cos(angle);
      d.vy = speed * std::sin(angle);
      disks.push_back(d);
    }
  }
  const int n_obj = static_cast<int>(disks.size());
  const int target = spec.target_index >= 0 ? spec.target_index : static_cast<int>(rng.below(static_cast<std::uint32_t>(n_obj)));
  if (target >= n_obj) throw ConfigError("synthetic spec: target_index out of range");

  FeatureClip clip;
  clip.clip_id = "synthetic-" + std::to_string(spec.seed);
  clip.frames = spec.frames;
  clip.base_h = spec.base_h;
  clip.base_w = spec.base_w;
  clip.scales = spec.scales;
  clip.text_tokens_n = spec.text_tokens;
  clip.text_channels = spec.text_channels;

  // Trajectories with border bounce.
  std::vector<std::vector<std::pair<float, float>>> centers(static_cast<std::size_t>(n_obj));
  for (int i = 0; i < n_obj; ++i) {
    float cx = disks[static_cast<std::size_t>(i)].cx, cy = disks[static_cast<std::size_t>(i)].cy;
    float vx = disks[static_cast<std::size_t>(i)].vx, vy = disks[static_cast<std::size_t>(i)].vy;
    const float r = disks[static_cast<std::size_t>(i)].radius;
    for (int t = 0; t < spec.frames; ++t) {
      centers[static_cast<std::size_t>(i)].push_back({cx, cy});
      cx += vx;
      cy += vy;
      const float xmin = std::min(r, (static_cast<float>(spec.base_w) - 1.0f) / 2.0f);
      const float ymin = std::min(r, (static_cast<float>(spec.base_h) - 1.0f) / 2.0f);
      const float xmax = static_cast<float>(spec.base_w) - 1.0f - xmin;
      const float ymax = static_cast<float>(spec.base_h) - 1.0f - ymin;
      if (cx < xmin) { cx = 2 * xmin - cx; vx = -vx; }
      if (cx > xmax) { cx = 2 * xmax - cx; vx = -vx; }
      if (cy < ymin) { cy = 2 * ymin - cy; vy = -vy; }
      if (cy > ymax) { cy = 2 * ymax - cy; vy = -vy; }
    }
  }

  // Ground-truth disks.
  for (int i = 0; i < n_obj; ++i) {
    ObjectAnnotation ann;
    ann.id = i;
    const float r2 = disks[static_cast<std::size_t>(i)].radius * disks[static_cast<std::size_t>(i)].radius;
    for (int t = 0; t < spec.frames; ++t) {
      std::vector<std::uint8_t> m(static_cast<std::size_t>(spec.base_h) * spec.base_w, 0);
      const auto [cx, cy] = centers[static_cast<std::size_t>(i)][static_cast<std::size_t>(t)];
      for (int y = 0; y < spec.base_h; ++y)
        for (int x = 0; x < spec.base_w; ++x) {
          const float dx = static_cast<float>(x) - cx, dy = static_cast<float>(y) - cy;
          if (dx * dx + dy * dy <= r2) m[static_cast<std::size_t>(y) * spec.base_w + x] = 1;
        }
      ann.masks.push_back(std::move(m));
    }
    clip.objects.push_back(std::move(ann));
  }
  clip.target_ids = {target};

  // Visual features: per-object occupancy evaluated at cell centers, box
  // blurred once, weighted by the object's channel signature, plus noise.
  clip.visual.resize(static_cast<std::size_t>(spec.frames));
  for (int t = 0; t < spec.frames; ++t) {
    for (std::size_t l = 0; l < spec.scales.size(); ++l) {
      const auto& sc = spec.scales[l];
      const float sx = static_cast<float>(spec.base_w) / static_cast<float>(sc.w);
      const float sy = static_cast<float>(spec.base_h) / static_cast<float>(sc.h);
      std::vector<std::vector<float>> occ(static_cast<std::size_t>(n_obj),
                                          std::vector<float>(static_cast<std::size_t>(sc.h) * sc.w, 0.0f));
      for (int i = 0; i < n_obj; ++i) {
        const auto [cx, cy] = centers[static_cast<std::size_t>(i)][static_cast<std::size_t>(t)];
        const float r = disks[static_cast<std::size_t>(i)].radius;
        const float falloff = std::max(sx, sy);
        for (int y = 0; y < sc.h; ++y)
          for (int x = 0; x < sc.w; ++x) {
            const float bx = (static_cast<float>(x) + 0.5f) * sx - 0.5f;
            const float by = (static_cast<float>(y) + 0.5f) * sy - 0.5f;
            const float d = std::sqrt((bx - cx) * (bx - cx) + (by - cy) * (by - cy));
            float v = 0.0f;
            if (d <= r) v = 1.0f;
            else if (d < r + falloff) v = 1.0f - (d - r) / falloff;
            occ[static_cast<std::size_t>(i)][static_cast<std::size_t>(y) * sc.w + x] = v;
          }
        // one 3x3 box blur pass
        std::vector<float> blurred(occ[static_cast<std::size_t>(i)].size());
        for (int y = 0; y < sc.h; ++y)
          for (int x = 0; x < sc.w; ++x) {
            float acc = 0.0f;
            int cnt = 0;
            for (int dy = -1; dy <= 1; ++dy)
              for (int dx = -1; dx <= 1; ++dx) {
                const int yy = y + dy, xx = x + dx;
                if (yy < 0 || yy >= sc.h || xx < 0 || xx >= sc.w) continue;
                acc += occ[static_cast<std::size_t>(i)][static_cast<std::size_t>(yy) * sc.w + xx];
                ++cnt;
              }
            blurred[static_cast<std::size_t>(y) * sc.w + x] = acc / static_cast<float>(cnt);
          }
        occ[static_cast<std::size_t>(i)] = std::move(blurred);
      }
      std::vector<float> feat(static_cast<std::size_t>(sc.h) * sc.w * sc.channels);
      for (int y = 0; y < sc.h; ++y)
        for (int x = 0; x < sc.w; ++x)
          for (int c = 0; c < sc.channels; ++c) {
            float v = 0.0f;
            for (int i = 0; i < n_obj; ++i)
              v += index_signature(i, c) * occ[static_cast<std::size_t>(i)][static_cast<std::size_t>(y) * sc.w + x];
            v += spec.feature_noise * (rng.uniform() * 2.0f - 1.0f);
            feat[(static_cast<std::size_t>(y) * sc.w + x) * sc.channels + c] = v;
          }
      clip.visual[static_cast<std::size_t>(t)].push_back(std::move(feat));
    }
  }

  // Text: token 0 encodes the target index, token 1 its motion direction,
  // remaining tokens are fixed filler. Sentence = token mean.
  const float angle = std::atan2(disks[static_cast<std::size_t>(target)].vy, disks[static_cast<std::size_t>(target)].vx);
  clip.text_tokens.assign(static_cast<std::size_t>(spec.text_tokens) * spec.text_channels, 0.0f);
  for (int c = 0; c < spec.text_channels; ++c) {
    clip.text_tokens[static_cast<std::size_t>(c)] = index_signature(target, c);
    if (spec.text_tokens > 1)
      clip.text_tokens[static_cast<std::size_t>(spec.text_channels) + c] = direction_signature(angle, c);
    for (int tok = 2; tok < spec.text_tokens; ++tok)
      clip.text_tokens[static_cast<std::size_t>(tok) * spec.text_channels + c] =
          0.3f * std::sin(0.37f * static_cast<float>((tok + 1) * (c + 3)));
  }
  clip.text_sentence.assign(static_cast<std::size_t>(spec.text_channels), 0.0f);
  for (int tok = 0; tok < spec.text_tokens; ++tok)
    for (int c = 0; c < spec.text_channels; ++c)
      clip.text_sentence[static_cast<std::size_t>(c)] +=
          clip.text_tokens[static_cast<std::size_t>(tok) * spec.text_channels + c] / static_cast<float>(spec.text_tokens);

  std::ostringstream expr;
  expr << "object " << target << " moving at angle " << angle;
  clip.expression = expr.str();
  clip.validate();
  return clip;
}

void save_clip(const FeatureClip& clip, const std::string& dir) {
  clip.validate();
  fs::create_directories(dir);
  json m;
  m["format_version"] = 1;
  m["clip_id"] = clip.clip_id;
  m["expression"] = clip.expression;
  m["frames"] = clip.frames;
  m["base_height"] = clip.base_h;
  m["base_width"] = clip.base_w;
  m["text"] = {{"tokens", clip.text_tokens_n},
               {"channels", clip.text_channels},
               {"tokens_file", "text_tokens.f32"},
               {"sentence_file", "text_sentence.f32"}};
  m["scales"] = json::array();
  for (std::size_t l = 0; l < clip.scales.size(); ++l) {
    json s;
    s["height"] = clip.scales[l].h;
    s["width"] = clip.scales[l].w;
    s["channels"] = clip.scales[l].channels;
    json files = json::array();
    for (int t = 0; t < clip.frames; ++t) files.push_back(scale_file(t, static_cast<int>(l)));
    s["files"] = files;
    m["scales"].push_back(s);
  }
  m["objects"] = json::array();
  for (const auto& obj : clip.objects) {
    json o;
    o["id"] = obj.id;
    json masks = json::array();
    for (const auto& mask : obj.masks) masks.push_back(rle_encode(mask));
    o["masks"] = masks;
    m["objects"].push_back(o);
  }
  m["target_ids"] = clip.target_ids;
  if (!clip.resize_rule.empty()) m["resize_rule"] = clip.resize_rule;

  for (int t = 0; t < clip.frames; ++t)
    for (std::size_t l = 0; l < clip.scales.size(); ++l) {
      const auto& data = clip.visual[static_cast<std::size_t>(t)][l];
      io::write_file_atomic((fs::path(dir) / scale_file(t, static_cast<int>(l))).string(), data.data(),
                            data.size() * 4);
    }
  io::write_file_atomic((fs::path(dir) / "text_tokens.f32").string(), clip.text_tokens.data(),
                        clip.text_tokens.size() * 4);
  io::write_file_atomic((fs::path(dir) / "text_sentence.f32").string(), clip.text_sentence.data(),
                        clip.text_sentence.size() * 4);
  io::write_text_atomic((fs::path(dir) / "manifest.json").string(), m.dump(2) + "\n");
}

FeatureClip load_clip(const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw ValidationError("missing manifest: " + manifest_path);
  json m;
  try {
    in >> m;
  } catch (const json::exception& e) {
    throw ValidationError("manifest " + manifest_path + ": " + e.what());
  }
  const fs::path dir = fs::path(manifest_path).parent_path();
  FeatureClip clip;
  try {
    if (m.value("format_version", 0) != 1)
      throw ValidationError("manifest " + manifest_path + ": unsupported format_version");
    clip.clip_id = m.at("clip_id").get<std::string>();
    clip.expression = m.value("expression", "");
    clip.frames = m.at("frames").get<int>();
    clip.base_h = m.at("base_height").get<int>();
    clip.base_w = m.at("base_width").get<int>();
    const auto& text = m.at("text");
    clip.text_tokens_n = text.at("tokens").get<int>();
    clip.text_channels = text.at("channels").get<int>();
    if (clip.frames < 1) throw ValidationError("manifest " + manifest_path + ": frames must be >= 1");
    std::vector<std::vector<std::string>> files_per_scale;
    for (const auto& s : m.at("scales")) {
      ScaleInfo sc;
      sc.h = s.at("height").get<int>();
      sc.w = s.at("width").get<int>();
      sc.channels = s.at("channels").get<int>();
      clip.scales.push_back(sc);
      auto files = s.at("files").get<std::vector<std::string>>();
      if (static_cast<int>(files.size()) != clip.frames)
        throw ValidationError("manifest " + manifest_path + ": scale " + std::to_string(files_per_scale.size()) +
                              " lists " + std::to_string(files.size()) + " files for " + std::to_string(clip.frames) +
                              " frames");
      files_per_scale.push_back(std::move(files));
    }
    clip.visual.resize(static_cast<std::size_t>(clip.frames));
    for (int t = 0; t < clip.frames; ++t)
      for (std::size_t l = 0; l < clip.scales.size(); ++l) {
        const auto& sc = clip.scales[l];
        clip.visual[static_cast<std::size_t>(t)].push_back(io::read_f32_file(
            (dir / files_per_scale[l][static_cast<std::size_t>(t)]).string(),
            static_cast<std::int64_t>(sc.h) * sc.w * sc.channels));
      }
    clip.text_tokens = io::read_f32_file((dir / text.at("tokens_file").get<std::string>()).string(),
                                         static_cast<std::int64_t>(clip.text_tokens_n) * clip.text_channels);
    clip.text_sentence =
        io::read_f32_file((dir / text.at("sentence_file").get<std::string>()).string(), clip.text_channels);
    const std::int64_t px = static_cast<std::int64_t>(clip.base_h) * clip.base_w;
    for (const auto& o : m.at("objects")) {
      ObjectAnnotation ann;
      ann.id = o.at("id").get<int>();
      for (const auto& runs : o.at("masks")) ann.masks.push_back(rle_decode(runs.get<std::vector<std::int64_t>>(), px));
      clip.objects.push_back(std::move(ann));
    }
    clip.target_ids = m.value("target_ids", std::vector<int>{});
    clip.resize_rule = m.value("resize_rule", std::string{});
  } catch (const json::exception& e) {
    throw ValidationError("manifest " + manifest_path + ": " + e.what());
  }
  clip.validate();
  return clip;
}

void save_prediction(const ClipPrediction& pred, const std::string& path) {
  json p;
  p["format_version"] = 1;
  p["clip_id"] = pred.clip_id;
  p["height"] = pred.h;
  p["width"] = pred.w;
  json masks = json::array();
  for (const auto& m : pred.frame_masks) masks.push_back(rle_encode(m));
  p["masks"] = masks;
  io::write_text_atomic(path, p.dump(2) + "\n");
}

ClipPrediction load_prediction(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("missing prediction file: " + path);
  json p;
  try {
    in >> p;
  } catch (const json::exception& e) {
    throw ValidationError("prediction " + path + ": " + e.what());
  }
  ClipPrediction pred;
  try {
    pred.clip_id = p.at("clip_id").get<std::string>();
    pred.h = p.at("height").get<int>();
    pred.w = p.at("width").get<int>();
    for (const auto& runs : p.at("masks"))
      pred.frame_masks.push_back(rle_decode(runs.get<std::vector<std::int64_t>>(),
                                            static_cast<std::int64_t>(pred.h) * pred.w));
  } catch (const json::exception& e) {
    throw ValidationError("prediction " + path + ": " + e.what());
  }
  return pred;
}

}  // namespace refquery
