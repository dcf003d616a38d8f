#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "refquery/encoder.hpp"
#include "refquery/metrics.hpp"

namespace refquery {

template <typename S>
void declare_video_decoder_params(ParamStore<S>& ps, const ModelConfig& cfg, Rng& rng) {
  const int C = cfg.channels;
  for (int i = 0; i < cfg.video_layers; ++i) {
    const std::string p = "vq" + std::to_string(i);
    declare_mha(ps, p + ".text", C, rng);
    declare_norm(ps, p + ".norm1", C, rng);
    declare_mha(ps, p + ".query", C, rng);
    declare_norm(ps, p + ".norm2", C, rng);
    declare_mha(ps, p + ".self", C, rng);
    declare_norm(ps, p + ".norm3", C, rng);
    declare_ffn(ps, p + ".ffn", C, C * cfg.ffn_mult, rng);
    declare_norm(ps, p + ".norm4", C, rng);
  }
  declare_linear(ps, "mask_embed", C, C, rng);
  declare_linear(ps, "cls", C, 1, rng);
  declare_linear(ps, "frame_mask_embed", C, C, rng);
  declare_linear(ps, "frame_cls", C, 1, rng);
  declare_linear(ps, "sim_proj", C, C, rng);
}

// Layer-by-layer refinement: text cross-attention, query cross-attention over
// all T*N_f rearranged frame queries, self-attention, FFN.
template <typename S>
Tensor<S> decode_video(const Tensor<S>& video_queries_init, const std::vector<Tensor<S>>& reordered,
                       const Tensor<S>& text, const ParamStore<S>& ps, const ModelConfig& cfg) {
  auto q = video_queries_init;
  auto frame_keys = concat_rows(reordered);
  for (int i = 0; i < cfg.video_layers; ++i) {
    const std::string p = "vq" + std::to_string(i);
    q = add(q, multi_head_attention(apply_norm(ps, p + ".norm1", q, cfg.ln_eps), text, text, cfg.heads,
                                    fetch_mha(ps, p + ".text")));
    q = add(q, multi_head_attention(apply_norm(ps, p + ".norm2", q, cfg.ln_eps), frame_keys, frame_keys,
                                    cfg.heads, fetch_mha(ps, p + ".query")));
    {
      auto h = apply_norm(ps, p + ".norm3", q, cfg.ln_eps);
      q = add(q, multi_head_attention(h, h, h, cfg.heads, fetch_mha(ps, p + ".self")));
    }
    q = add(q, apply_ffn(ps, p + ".ffn", apply_norm(ps, p + ".norm4", q, cfg.ln_eps)));
    check_finite(q, "video query decoder layer " + std::to_string(i));
  }
  return q;
}

// Per-query per-frame mask logits plus referral score logits. The mask logit
// at (n, t, h, w) is the dot product of query n's mask embedding with the
// highest-resolution fused feature at that position.
template <typename S>
struct MaskPredictionT {
  std::vector<Tensor<S>> mask_logits;  // per frame: N x (H1*W1)
  Tensor<S> score_logits;              // N x 1
  int h = 0, w = 0;

  Tensor<S> soft_masks(int frame) const { return sigmoid(mask_logits[static_cast<std::size_t>(frame)]); }
  Tensor<S> referral_scores() const { return sigmoid(score_logits); }
};

template <typename S>
MaskPredictionT<S> predict_masks(const Tensor<S>& queries, const FusedFeatures<S>& fused,
                                 const ParamStore<S>& ps, const std::string& embed_prefix,
                                 const std::string& cls_prefix) {
  MaskPredictionT<S> out;
  out.h = fused.shapes[0].h;
  out.w = fused.shapes[0].w;
  auto emb = apply_linear(ps, embed_prefix, queries);
  out.mask_logits.reserve(fused.visual.size());
  for (const auto& frame : fused.visual) out.mask_logits.push_back(matmul_transb(emb, frame[0]));
  out.score_logits = apply_linear(ps, cls_prefix, queries);
  return out;
}

// Inference head: select queries with referral score above 0.5 (falling back
// to the argmax query), binarize their masks at `threshold`, union them,
// bilinearly upsample the union to ground-truth resolution and threshold.
inline std::vector<BinaryMask> select_and_binarize(const MaskPredictionT<float>& pred, int base_h,
                                                   int base_w, double threshold) {
  if (threshold <= 0.0 || threshold >= 1.0) throw ConfigError("select_and_binarize: threshold must be in (0,1)");
  const int n = pred.score_logits.rows();
  std::vector<int> selected;
  int argmax = 0;
  for (int i = 0; i < n; ++i) {
    if (pred.score_logits.value()[static_cast<std::size_t>(i)] >
        pred.score_logits.value()[static_cast<std::size_t>(argmax)])
      argmax = i;
    if (pred.score_logits.value()[static_cast<std::size_t>(i)] > 0.0f) selected.push_back(i);  // sigmoid > 0.5
  }
  if (selected.empty()) selected.push_back(argmax);

  // Binarizing sigmoid(logit) at `threshold` is thresholding the logit.
  const float logit_thresh = static_cast<float>(std::log(threshold / (1.0 - threshold)));
  const std::size_t px = static_cast<std::size_t>(pred.h) * pred.w;
  const auto table = BilinearTable::make(pred.h, pred.w, base_h, base_w);
  std::vector<BinaryMask> out;
  out.reserve(pred.mask_logits.size());
  for (const auto& logits : pred.mask_logits) {
    std::vector<float> uni(px, 0.0f);
    for (int q : selected)
      for (std::size_t i = 0; i < px; ++i)
        if (logits.value()[static_cast<std::size_t>(q) * px + i] > logit_thresh) uni[i] = 1.0f;
    std::vector<float> up(static_cast<std::size_t>(base_h) * base_w);
    table.apply(uni.data(), up.data());
    BinaryMask mask(up.size());
    for (std::size_t i = 0; i < up.size(); ++i) mask[i] = up[i] >= 0.5f ? 1 : 0;
    out.push_back(std::move(mask));
  }
  return out;
}

}  // namespace refquery
