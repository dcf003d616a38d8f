#pragma once

#include <string>
#include <vector>

#include "refquery/encoder.hpp"

namespace refquery {

template <typename S>
void declare_frame_decoder_params(ParamStore<S>& ps, const ModelConfig& cfg, Rng& rng) {
  const int C = cfg.channels;
  ps.declare("fq.pos", {cfg.frame_queries, C}, ParamStore<S>::Init::RowEmbed, rng);
  declare_linear(ps, "fq.init", C, C, rng);
  for (int i = 0; i < cfg.frame_layers; ++i) {
    const std::string p = "fq" + std::to_string(i);
    declare_mha(ps, p + ".text", C, rng);
    declare_norm(ps, p + ".norm1", C, rng);
    declare_mha(ps, p + ".img", C, rng);
    declare_norm(ps, p + ".norm2", C, rng);
    declare_mha(ps, p + ".self", C, rng);
    declare_norm(ps, p + ".norm3", C, rng);
    declare_ffn(ps, p + ".ffn", C, C * cfg.ffn_mult, rng);
    declare_norm(ps, p + ".norm4", C, rng);
  }
}

// Query i = positional embedding i + projected sentence feature; the same
// initialization is used for every frame.
template <typename S>
Tensor<S> init_frame_queries(const Tensor<S>& sentence, const ParamStore<S>& ps) {
  auto proj = apply_linear(ps, "fq.init", sentence);  // 1 x C
  return add_rowvec(ps.get("fq.pos"), reshape(proj, {proj.cols()}));
}

// Decodes one frame: text cross-attention, image cross-attention over the
// frame's flattened multi-scale tokens, self-attention, FFN per layer.
template <typename S>
Tensor<S> decode_one_frame(const Tensor<S>& init, const std::vector<Tensor<S>>& frame_scales,
                           const Tensor<S>& text, const ParamStore<S>& ps, const ModelConfig& cfg,
                           int frame_index) {
  auto q = init;
  auto img_keys = concat_rows(frame_scales);
  for (int i = 0; i < cfg.frame_layers; ++i) {
    const std::string p = "fq" + std::to_string(i);
    q = add(q, multi_head_attention(apply_norm(ps, p + ".norm1", q, cfg.ln_eps), text, text, cfg.heads,
                                    fetch_mha(ps, p + ".text")));
    q = add(q, multi_head_attention(apply_norm(ps, p + ".norm2", q, cfg.ln_eps), img_keys, img_keys,
                                    cfg.heads, fetch_mha(ps, p + ".img")));
    {
      auto h = apply_norm(ps, p + ".norm3", q, cfg.ln_eps);
      q = add(q, multi_head_attention(h, h, h, cfg.heads, fetch_mha(ps, p + ".self")));
    }
    q = add(q, apply_ffn(ps, p + ".ffn", apply_norm(ps, p + ".norm4", q, cfg.ln_eps)));
    check_finite(q, "frame query decoder frame " + std::to_string(frame_index) + " layer " + std::to_string(i));
  }
  return q;
}

// Frame queries Q_f for every frame independently (frames share nothing but
// parameters and the fused text features).
template <typename S>
std::vector<Tensor<S>> decode_frames(const FusedFeatures<S>& fused, const ParamStore<S>& ps,
                                     const ModelConfig& cfg) {
  auto init = init_frame_queries(fused.sentence, ps);
  std::vector<Tensor<S>> out;
  out.reserve(fused.visual.size());
  for (std::size_t t = 0; t < fused.visual.size(); ++t)
    out.push_back(decode_one_frame(init, fused.visual[t], fused.text, ps, cfg, static_cast<int>(t)));
  return out;
}

}  // namespace refquery
