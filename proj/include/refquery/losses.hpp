#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "refquery/hungarian.hpp"
#include "refquery/model.hpp"

namespace refquery {

struct LossBreakdown {
  double l_v = 0.0, l_f = 0.0, l_sim = 0.0, l_train = 0.0;
};

namespace lossdetail {

// Detached per-query probabilities at ground-truth resolution (upsampled
// logits through sigmoid), for cost matrices only.
template <typename S>
std::vector<std::vector<double>> upsampled_probs(const Tensor<S>& logits, int h, int w, int H, int W) {
  const int n = logits.rows();
  const auto table = BilinearTable::make(h, w, H, W);
  std::vector<std::vector<double>> out(static_cast<std::size_t>(n));
  std::vector<double> row(static_cast<std::size_t>(h) * w);
  for (int q = 0; q < n; ++q) {
    for (std::size_t i = 0; i < row.size(); ++i)
      row[i] = static_cast<double>(logits.value()[static_cast<std::size_t>(q) * row.size() + i]);
    std::vector<double> up(static_cast<std::size_t>(H) * W);
    table.apply(row.data(), up.data());
    out[static_cast<std::size_t>(q)].resize(up.size());
    for (std::size_t i = 0; i < up.size(); ++i)
      out[static_cast<std::size_t>(q)][i] = 1.0 / (1.0 + std::exp(-up[i]));
  }
  return out;
}

inline double dice_cost(const std::vector<double>& p, const std::vector<std::uint8_t>& g) {
  double inter = 0, ps = 0, gs = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += p[i] * g[i];
    ps += p[i];
    gs += g[i];
  }
  return 1.0 - (2.0 * inter + 1.0) / (ps + gs + 1.0);
}

inline double bce_cost(const std::vector<double>& p, const std::vector<std::uint8_t>& g) {
  double acc = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pi = std::min(std::max(p[i], 1e-6), 1.0 - 1e-6);
    acc += g[i] ? -std::log(pi) : -std::log(1.0 - pi);
  }
  return acc / static_cast<double>(p.size());
}

inline double sigmoid_value(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace lossdetail

// Hungarian matching of queries to ground-truth objects. `cost[q][o]` must be
// n_queries x n_objects with n_queries >= n_objects; unmatched queries are
// absorbed by constant-cost padding columns. Returns, per object, the matched
// query index.
inline std::vector<int> match_queries_to_objects(const std::vector<std::vector<double>>& cost) {
  const int nq = static_cast<int>(cost.size());
  const int no = nq > 0 ? static_cast<int>(cost[0].size()) : 0;
  if (no > nq)
    throw ConfigError("matching: " + std::to_string(no) + " ground-truth objects exceed " +
                      std::to_string(nq) + " queries");
  if (no == 0) return {};
  constexpr double kPad = 1e6;  // same constant for every dummy column
  std::vector<std::vector<double>> square(static_cast<std::size_t>(nq),
                                          std::vector<double>(static_cast<std::size_t>(nq), kPad));
  for (int q = 0; q < nq; ++q)
    for (int o = 0; o < no; ++o) square[static_cast<std::size_t>(q)][static_cast<std::size_t>(o)] = cost[static_cast<std::size_t>(q)][static_cast<std::size_t>(o)];
  const Assignment a = hungarian(square);
  std::vector<int> query_of_object(static_cast<std::size_t>(no), -1);
  for (int q = 0; q < nq; ++q)
    if (a.permutation[static_cast<std::size_t>(q)] < no)
      query_of_object[static_cast<std::size_t>(a.permutation[static_cast<std::size_t>(q)])] = q;
  return query_of_object;
}

template <typename S>
struct LossTerms {
  Tensor<S> l_v, l_f, l_sim, total;
  std::vector<int> video_match;  // per object, matched query (video-level)

  // Reported breakdown. The total is recombined from the reported components
  // in double so the L_train identity holds exactly in logs; the f32 `total`
  // node is the same sum and is what backward runs on.
  LossBreakdown values(double lambda_sim) const {
    LossBreakdown b;
    b.l_v = static_cast<double>(l_v.item());
    b.l_f = static_cast<double>(l_f.item());
    b.l_sim = static_cast<double>(l_sim.item());
    b.l_train = b.l_v + b.l_f + lambda_sim * b.l_sim;
    return b;
  }
};

namespace lossdetail {

// Tape-side dice + bce of one predicted mask row against a constant target.
template <typename S>
struct MaskLossTerm {
  Tensor<S> dice, bce;
};

template <typename S>
MaskLossTerm<S> mask_loss_term(const Tensor<S>& logits_frame, int query, const std::vector<std::uint8_t>& gt,
                               int h, int w, int H, int W) {
  auto row = gather_rows(logits_frame, {query});
  auto up = upsample_bilinear(row, h, w, H, W);
  std::vector<S> gvals(gt.begin(), gt.end());
  auto g = Tensor<S>::from({1, H * W}, std::move(gvals));
  double gsum = 0;
  for (auto v : gt) gsum += v;
  auto p = sigmoid(up);
  auto inter = sum_all(mul(p, g));
  auto num = add_const(scale(inter, 2.0), 1.0);
  auto den = add_const(sum_all(p), gsum + 1.0);
  MaskLossTerm<S> out;
  out.dice = sub(Tensor<S>::scalar(S(1)), div(num, den));
  out.bce = bce_with_logits_mean(up, g);
  return out;
}

}  // namespace lossdetail

// Full training objective on one clip: video loss (trajectory-level
// matching), frame loss (per-frame matching), similarity loss between
// target-matched video queries and the sentence feature.
template <typename S>
LossTerms<S> training_loss(const ModelConfig& mcfg, const LossConfig& lc, const ParamStore<S>& ps,
                           const PipelineResult<S>& pr, const FeatureClip& clip) {
  const int T = clip.frames;
  const int H0 = clip.base_h, W0 = clip.base_w;
  const int h1 = pr.video_masks.h, w1 = pr.video_masks.w;
  const int n_obj = static_cast<int>(clip.objects.size());
  const int n_q = mcfg.video_queries;

  std::vector<bool> is_target(static_cast<std::size_t>(n_obj), false);
  for (int o = 0; o < n_obj; ++o)
    for (int id : clip.target_ids)
      if (clip.objects[static_cast<std::size_t>(o)].id == id) is_target[static_cast<std::size_t>(o)] = true;

  // ---- video loss: one matching over whole trajectories -------------------
  std::vector<std::vector<std::vector<double>>> video_probs;  // [t][q][pixel]
  video_probs.reserve(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t)
    video_probs.push_back(lossdetail::upsampled_probs(pr.video_masks.mask_logits[static_cast<std::size_t>(t)], h1, w1, H0, W0));

  std::vector<int> video_match;
  if (n_obj > 0) {
    std::vector<std::vector<double>> cost(static_cast<std::size_t>(n_q), std::vector<double>(static_cast<std::size_t>(n_obj), 0.0));
    for (int q = 0; q < n_q; ++q) {
      const double score = lossdetail::sigmoid_value(pr.video_masks.score_logits.value()[static_cast<std::size_t>(q)]);
      for (int o = 0; o < n_obj; ++o) {
        double c = lc.lambda_cls * (is_target[static_cast<std::size_t>(o)] ? 1.0 - score : score);
        for (int t = 0; t < T; ++t) {
          const auto& g = clip.objects[static_cast<std::size_t>(o)].masks[static_cast<std::size_t>(t)];
          c += lc.lambda_dice * lossdetail::dice_cost(video_probs[static_cast<std::size_t>(t)][static_cast<std::size_t>(q)], g);
          c += lc.lambda_bce * lossdetail::bce_cost(video_probs[static_cast<std::size_t>(t)][static_cast<std::size_t>(q)], g);
        }
        cost[static_cast<std::size_t>(q)][static_cast<std::size_t>(o)] = c;
      }
    }
    video_match = match_queries_to_objects(cost);
  }

  Tensor<S> l_v = Tensor<S>::scalar(S(0));
  if (n_obj > 0) {
    Tensor<S> mask_acc = Tensor<S>::scalar(S(0));
    for (int o = 0; o < n_obj; ++o) {
      const int q = video_match[static_cast<std::size_t>(o)];
      for (int t = 0; t < T; ++t) {
        auto term = lossdetail::mask_loss_term(pr.video_masks.mask_logits[static_cast<std::size_t>(t)], q,
                                               clip.objects[static_cast<std::size_t>(o)].masks[static_cast<std::size_t>(t)], h1, w1, H0, W0);
        auto pair_loss = add(scale(term.dice, lc.lambda_dice), scale(term.bce, lc.lambda_bce));
        mask_acc = add(mask_acc, pair_loss);
      }
    }
    l_v = scale(mask_acc, 1.0 / (static_cast<double>(n_obj) * T));
  }
  {
    std::vector<S> labels(static_cast<std::size_t>(n_q), S(0));
    for (int o = 0; o < n_obj; ++o)
      if (is_target[static_cast<std::size_t>(o)]) labels[static_cast<std::size_t>(video_match[static_cast<std::size_t>(o)])] = S(1);
    auto lt = Tensor<S>::from({n_q, 1}, std::move(labels));
    l_v = add(l_v, scale(bce_with_logits_mean(pr.video_masks.score_logits, lt), lc.lambda_cls));
  }

  // ---- frame loss: independent matching per frame --------------------------
  Tensor<S> l_f_acc = Tensor<S>::scalar(S(0));
  for (int t = 0; t < T; ++t) {
    const auto probs = lossdetail::upsampled_probs(pr.frame_mask_logits[static_cast<std::size_t>(t)], h1, w1, H0, W0);
    std::vector<int> frame_match;
    if (n_obj > 0) {
      std::vector<std::vector<double>> cost(static_cast<std::size_t>(n_q), std::vector<double>(static_cast<std::size_t>(n_obj), 0.0));
      for (int q = 0; q < n_q; ++q) {
        const double score = lossdetail::sigmoid_value(pr.frame_score_logits[static_cast<std::size_t>(t)].value()[static_cast<std::size_t>(q)]);
        for (int o = 0; o < n_obj; ++o) {
          const auto& g = clip.objects[static_cast<std::size_t>(o)].masks[static_cast<std::size_t>(t)];
          cost[static_cast<std::size_t>(q)][static_cast<std::size_t>(o)] =
              lc.lambda_dice * lossdetail::dice_cost(probs[static_cast<std::size_t>(q)], g) +
              lc.lambda_bce * lossdetail::bce_cost(probs[static_cast<std::size_t>(q)], g) +
              lc.lambda_cls * (is_target[static_cast<std::size_t>(o)] ? 1.0 - score : score);
        }
      }
      frame_match = match_queries_to_objects(cost);
    }
    Tensor<S> frame_loss = Tensor<S>::scalar(S(0));
    if (n_obj > 0) {
      Tensor<S> mask_acc = Tensor<S>::scalar(S(0));
      for (int o = 0; o < n_obj; ++o) {
        auto term = lossdetail::mask_loss_term(pr.frame_mask_logits[static_cast<std::size_t>(t)],
                                               frame_match[static_cast<std::size_t>(o)],
                                               clip.objects[static_cast<std::size_t>(o)].masks[static_cast<std::size_t>(t)], h1, w1, H0, W0);
        mask_acc = add(mask_acc, add(scale(term.dice, lc.lambda_dice), scale(term.bce, lc.lambda_bce)));
      }
      frame_loss = scale(mask_acc, 1.0 / n_obj);
    }
    std::vector<S> labels(static_cast<std::size_t>(n_q), S(0));
    for (int o = 0; o < n_obj; ++o)
      if (is_target[static_cast<std::size_t>(o)]) labels[static_cast<std::size_t>(frame_match[static_cast<std::size_t>(o)])] = S(1);
    auto lt = Tensor<S>::from({n_q, 1}, std::move(labels));
    frame_loss = add(frame_loss, scale(bce_with_logits_mean(pr.frame_score_logits[static_cast<std::size_t>(t)], lt), lc.lambda_cls));
    l_f_acc = add(l_f_acc, frame_loss);
  }
  Tensor<S> l_f = scale(l_f_acc, 1.0 / T);

  // ---- similarity loss ------------------------------------------------------
  Tensor<S> l_sim = Tensor<S>::scalar(S(0));
  {
    std::vector<int> target_queries;
    for (int o = 0; o < n_obj; ++o)
      if (is_target[static_cast<std::size_t>(o)]) target_queries.push_back(video_match[static_cast<std::size_t>(o)]);
    if (!target_queries.empty()) {
      Tensor<S> acc = Tensor<S>::scalar(S(0));
      for (int q : target_queries) {
        auto proj = apply_linear(ps, "sim_proj", gather_rows(pr.video_queries, {q}));
        auto cos = cosine_similarity(proj, pr.fused.sentence);
        acc = add(acc, sub(Tensor<S>::scalar(S(1)), cos));
      }
      l_sim = scale(acc, 1.0 / static_cast<double>(target_queries.size()));
    }
  }

  LossTerms<S> out;
  out.l_v = l_v;
  out.l_f = l_f;
  out.l_sim = l_sim;
  out.total = add(add(l_v, l_f), scale(l_sim, lc.lambda_sim));
  out.video_match = video_match;
  return out;
}

}  // namespace refquery
