#pragma once

#include <string>
#include <vector>

#include "refquery/config.hpp"
#include "refquery/encoder.hpp"
#include "refquery/frame_decoder.hpp"
#include "refquery/video_decoder.hpp"
#include "refquery/video_init.hpp"

namespace refquery {

// The full pipeline's parameters, declared in a fixed order from one seeded
// stream (the order doubles as the checkpoint layout).
template <typename S>
struct Model {
  ModelConfig cfg;
  ParamStore<S> params;

  Model(const ModelConfig& c, std::uint64_t seed) : cfg(c) {
    cfg.validate();
    Rng rng(Rng::derive(seed, 0x7061726du));  // independent stream for init
    declare_encoder_params(params, cfg, rng);
    declare_frame_decoder_params(params, cfg, rng);
    declare_aggregate_params(params, cfg.channels, rng);
    declare_video_decoder_params(params, cfg, rng);
  }

  template <typename T>
  Model<T> cast() const {
    Model<T> m(cfg, 0);
    m.params = params.template cast<T>();
    return m;
  }
};

template <typename S>
struct PipelineResult {
  FusedFeatures<S> fused;
  std::vector<Tensor<S>> frame_queries;  // final layer, per frame, N_f x C
  std::vector<Tensor<S>> reordered;      // rearranged frame queries
  std::vector<std::vector<int>> permutations;
  Tensor<S> video_queries_init;  // N_v x C
  Tensor<S> video_queries;       // refined N_v x C
  MaskPredictionT<S> video_masks;
  std::vector<Tensor<S>> frame_mask_logits;   // per frame, N_f x (H1*W1)
  std::vector<Tensor<S>> frame_score_logits;  // per frame, N_f x 1
};

// encode -> decode_frames -> reorder -> aggregate -> decode_video -> masks.
template <typename S>
PipelineResult<S> run_pipeline(const ModelConfig& cfg, const ParamStore<S>& ps, const EncoderInputs<S>& in) {
  PipelineResult<S> r;
  r.fused = encode(in, ps, cfg);
  r.frame_queries = decode_frames(r.fused, ps, cfg);
  r.reordered = reorder_frame_queries(r.frame_queries, cfg.chained_matching, &r.permutations);
  r.video_queries_init = aggregate_video_queries(r.reordered, ps);
  r.video_queries = decode_video(r.video_queries_init, r.reordered, r.fused.text, ps, cfg);
  r.video_masks = predict_masks(r.video_queries, r.fused, ps, "mask_embed", "cls");
  for (std::size_t t = 0; t < r.frame_queries.size(); ++t) {
    auto femb = apply_linear(ps, "frame_mask_embed", r.frame_queries[t]);
    r.frame_mask_logits.push_back(matmul_transb(femb, r.fused.visual[t][0]));
    r.frame_score_logits.push_back(apply_linear(ps, "frame_cls", r.frame_queries[t]));
  }
  return r;
}

template <typename S>
PipelineResult<S> run_pipeline(const ModelConfig& cfg, const ParamStore<S>& ps, const FeatureClip& clip) {
  return run_pipeline(cfg, ps, encoder_inputs_from_clip<S>(clip));
}

// Inference on one clip: full pipeline plus mask selection, at ground-truth
// resolution.
inline ClipPrediction infer_clip(const Model<float>& model, const FeatureClip& clip) {
  PipelineResult<float> r = run_pipeline(model.cfg, model.params, clip);
  ClipPrediction pred;
  pred.clip_id = clip.clip_id;
  pred.h = clip.base_h;
  pred.w = clip.base_w;
  pred.frame_masks = select_and_binarize(r.video_masks, clip.base_h, clip.base_w, model.cfg.mask_threshold);
  return pred;
}

}  // namespace refquery
