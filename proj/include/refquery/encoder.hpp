#pragma once

#include <string>
#include <vector>

#include "refquery/attention.hpp"
#include "refquery/config.hpp"
#include "refquery/data.hpp"
#include "refquery/params.hpp"
#include "refquery/tensor.hpp"

namespace refquery {

// Enhanced features after cross-modal fusion. Visual maps keep their input
// spatial shapes, all projected to the shared width C.
template <typename S>
struct FusedFeatures {
  std::vector<std::vector<Tensor<S>>> visual;  // [frame][scale], (H_l*W_l) x C
  Tensor<S> text;                              // N_t x C token features
  Tensor<S> sentence;                          // 1 x C, mean of enhanced tokens
  std::vector<ScaleShape> shapes;
};

template <typename S>
void declare_encoder_params(ParamStore<S>& ps, const ModelConfig& cfg, Rng& rng) {
  const int C = cfg.channels;
  for (std::size_t l = 0; l < cfg.scale_channels.size(); ++l)
    declare_linear(ps, "in_proj.s" + std::to_string(l), cfg.scale_channels[l], C, rng);
  declare_linear(ps, "text_proj", cfg.text_channels, C, rng);
  for (int i = 0; i < cfg.enc_layers; ++i) {
    const std::string p = "enc" + std::to_string(i);
    if (cfg.fusion == FusionMode::Deformable)
      declare_deform(ps, p + ".self", C, cfg.heads, static_cast<int>(cfg.scale_channels.size()),
                     cfg.deform_points, rng);
    else
      declare_mha(ps, p + ".self", C, rng);
    declare_norm(ps, p + ".norm_v1", C, rng);
    declare_mha(ps, p + ".i2t", C, rng);
    declare_norm(ps, p + ".norm_v2", C, rng);
    declare_mha(ps, p + ".t2i", C, rng);
    declare_norm(ps, p + ".norm_t1", C, rng);
    declare_ffn(ps, p + ".ffn_v", C, C * cfg.ffn_mult, rng);
    declare_norm(ps, p + ".norm_v3", C, rng);
    declare_ffn(ps, p + ".ffn_t", C, C * cfg.ffn_mult, rng);
    declare_norm(ps, p + ".norm_t2", C, rng);
  }
}

namespace detail {

template <typename S>
std::vector<Tensor<S>> split_scales(const Tensor<S>& stream, const std::vector<ScaleShape>& shapes) {
  std::vector<Tensor<S>> out;
  int off = 0;
  for (const auto& s : shapes) {
    out.push_back(slice_rows(stream, off, off + s.h * s.w));
    off += s.h * s.w;
  }
  return out;
}

}  // namespace detail

// Raw backbone features as tensors, the differentiable entry point of the
// pipeline (gradient checks treat these as leaves).
template <typename S>
struct EncoderInputs {
  std::vector<std::vector<Tensor<S>>> visual;  // [frame][scale], (H_l*W_l) x C_l
  Tensor<S> text_tokens;                       // N_t x C_t
  std::vector<ScaleShape> shapes;
};

template <typename S>
EncoderInputs<S> encoder_inputs_from_clip(const FeatureClip& clip) {
  EncoderInputs<S> in;
  for (const auto& s : clip.scales) in.shapes.push_back({s.h, s.w});
  in.visual.resize(static_cast<std::size_t>(clip.frames));
  for (int t = 0; t < clip.frames; ++t)
    for (std::size_t l = 0; l < clip.scales.size(); ++l) {
      const auto& sc = clip.scales[l];
      std::vector<S> raw(clip.visual[static_cast<std::size_t>(t)][l].begin(),
                         clip.visual[static_cast<std::size_t>(t)][l].end());
      in.visual[static_cast<std::size_t>(t)].push_back(Tensor<S>::from({sc.h * sc.w, sc.channels}, std::move(raw)));
    }
  std::vector<S> tok(clip.text_tokens.begin(), clip.text_tokens.end());
  in.text_tokens = Tensor<S>::from({clip.text_tokens_n, clip.text_channels}, std::move(tok));
  return in;
}

// Cross-modal fusion: per layer, visual self-attention (deformable or dense)
// per frame, image-to-text cross-attention, text-to-image cross-attention
// averaged over frames, then feed-forward blocks. Residual + pre-norm around
// every sublayer, so zeroed output projections leave streams untouched.
template <typename S>
FusedFeatures<S> encode(const EncoderInputs<S>& in, const ParamStore<S>& ps, const ModelConfig& cfg) {
  if (in.shapes.size() != cfg.scale_channels.size())
    throw ConfigError("encode: input has " + std::to_string(in.shapes.size()) + " scales, model expects " +
                      std::to_string(cfg.scale_channels.size()));
  if (in.visual.empty()) throw ConfigError("encode: no frames");
  for (std::size_t l = 0; l < in.shapes.size(); ++l)
    if (in.visual[0][l].cols() != cfg.scale_channels[l])
      throw ConfigError("encode: scale " + std::to_string(l) + " has " +
                        std::to_string(in.visual[0][l].cols()) + " channels, model expects " +
                        std::to_string(cfg.scale_channels[l]));
  if (in.text_tokens.cols() != cfg.text_channels)
    throw ConfigError("encode: text channels mismatch");

  const int T = static_cast<int>(in.visual.size());
  const int C = cfg.channels;
  const int L = static_cast<int>(in.shapes.size());
  const std::vector<ScaleShape>& shapes = in.shapes;
  int tokens_per_frame = 0;
  for (const auto& s : shapes) tokens_per_frame += s.h * s.w;
  const int n_text = in.text_tokens.rows();

  // 1x1 input projections to the shared width.
  std::vector<Tensor<S>> frame_stream(static_cast<std::size_t>(T));  // per frame, (sum HW) x C
  for (int t = 0; t < T; ++t) {
    std::vector<Tensor<S>> per_scale;
    for (int l = 0; l < L; ++l)
      per_scale.push_back(apply_linear(ps, "in_proj.s" + std::to_string(l),
                                       in.visual[static_cast<std::size_t>(t)][static_cast<std::size_t>(l)]));
    frame_stream[static_cast<std::size_t>(t)] = concat_rows(per_scale);
  }
  Tensor<S> text = apply_linear(ps, "text_proj", in.text_tokens);

  for (int i = 0; i < cfg.enc_layers; ++i) {
    const std::string p = "enc" + std::to_string(i);
    // (1) visual self-attention, frames independent
    for (int t = 0; t < T; ++t) {
      auto& x = frame_stream[static_cast<std::size_t>(t)];
      auto h = apply_norm(ps, p + ".norm_v1", x, cfg.ln_eps);
      Tensor<S> upd;
      if (cfg.fusion == FusionMode::Deformable) {
        upd = deformable_self_attention(h, detail::split_scales(h, shapes), shapes, cfg.heads,
                                        cfg.deform_points, fetch_deform(ps, p + ".self"));
      } else {
        upd = multi_head_attention(h, h, h, cfg.heads, fetch_mha(ps, p + ".self"));
      }
      x = add(x, upd);
    }
    // (2) image-to-text cross-attention, visual tokens read text (batched over frames)
    {
      auto all = concat_rows(frame_stream);
      auto h = apply_norm(ps, p + ".norm_v2", all, cfg.ln_eps);
      all = add(all, multi_head_attention(h, text, text, cfg.heads, fetch_mha(ps, p + ".i2t")));
      for (int t = 0; t < T; ++t)
        frame_stream[static_cast<std::size_t>(t)] = slice_rows(all, t * tokens_per_frame, (t + 1) * tokens_per_frame);
    }
    // (3) text-to-image cross-attention, averaged over frames
    {
      auto h = apply_norm(ps, p + ".norm_t1", text, cfg.ln_eps);
      Tensor<S> acc;
      for (int t = 0; t < T; ++t) {
        auto upd = multi_head_attention(h, frame_stream[static_cast<std::size_t>(t)],
                                        frame_stream[static_cast<std::size_t>(t)], cfg.heads,
                                        fetch_mha(ps, p + ".t2i"));
        acc = t == 0 ? upd : add(acc, upd);
      }
      text = add(text, scale(acc, 1.0 / T));
    }
    // (4) feed-forward
    for (int t = 0; t < T; ++t) {
      auto& x = frame_stream[static_cast<std::size_t>(t)];
      x = add(x, apply_ffn(ps, p + ".ffn_v", apply_norm(ps, p + ".norm_v3", x, cfg.ln_eps)));
    }
    text = add(text, apply_ffn(ps, p + ".ffn_t", apply_norm(ps, p + ".norm_t2", text, cfg.ln_eps)));

    check_finite(frame_stream[0], "cross-modal encoder layer " + std::to_string(i));
    check_finite(text, "cross-modal encoder layer " + std::to_string(i) + " (text)");
  }

  FusedFeatures<S> out;
  out.shapes = shapes;
  out.visual.resize(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t)
    out.visual[static_cast<std::size_t>(t)] = detail::split_scales(frame_stream[static_cast<std::size_t>(t)], shapes);
  out.text = text;
  // Sentence feature re-derived as the mean of enhanced tokens.
  Tensor<S> ones = Tensor<S>::full({1, n_text}, S(1) / static_cast<S>(n_text));
  out.sentence = matmul(ones, text);
  return out;
}

template <typename S>
FusedFeatures<S> encode(const FeatureClip& clip, const ParamStore<S>& ps, const ModelConfig& cfg) {
  return encode(encoder_inputs_from_clip<S>(clip), ps, cfg);
}

}  // namespace refquery
