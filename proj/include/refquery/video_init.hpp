#pragma once

#include <cmath>
#include <vector>

#include "refquery/hungarian.hpp"
#include "refquery/params.hpp"
#include "refquery/tensor.hpp"

namespace refquery {

// 1 - cosine similarity between rows of the anchor and candidate frame.
// Cosine with a zero-norm row is defined as 0 (cost 1).
template <typename S>
std::vector<std::vector<double>> query_matching_cost(const Tensor<S>& anchor, const Tensor<S>& candidate) {
  const int n = anchor.rows(), c = anchor.cols();
  if (candidate.rows() != n || candidate.cols() != c)
    throw ShapeError("query_matching_cost: " + shape_str(anchor.shape()) + " vs " +
                     shape_str(candidate.shape()));
  std::vector<double> norm_a(static_cast<std::size_t>(n)), norm_b(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    double na = 0, nb = 0;
    for (int j = 0; j < c; ++j) {
      const double av = anchor.value()[static_cast<std::size_t>(i) * c + j];
      const double bv = candidate.value()[static_cast<std::size_t>(i) * c + j];
      na += av * av;
      nb += bv * bv;
    }
    norm_a[static_cast<std::size_t>(i)] = std::sqrt(na);
    norm_b[static_cast<std::size_t>(i)] = std::sqrt(nb);
  }
  std::vector<std::vector<double>> cost(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(n)));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double dot = 0;
      for (int k = 0; k < c; ++k)
        dot += static_cast<double>(anchor.value()[static_cast<std::size_t>(i) * c + k]) *
               candidate.value()[static_cast<std::size_t>(j) * c + k];
      const double denom = norm_a[static_cast<std::size_t>(i)] * norm_b[static_cast<std::size_t>(j)];
      const double cosine = denom > 0 ? dot / denom : 0.0;
      cost[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = 1.0 - cosine;
    }
  return cost;
}

// Chained Hungarian rearrangement: frame 1 anchors the instance order; each
// later frame is matched to the (already rearranged, unless chained=false)
// previous frame and its rows permuted to follow it. The assignment indices
// are treated as constants on the tape; gradients flow through the gathered
// values only.
template <typename S>
std::vector<Tensor<S>> reorder_frame_queries(const std::vector<Tensor<S>>& frame_queries, bool chained,
                                             std::vector<std::vector<int>>* permutations_out = nullptr) {
  if (frame_queries.empty()) throw ShapeError("reorder_frame_queries: need at least one frame");
  std::vector<Tensor<S>> out;
  out.reserve(frame_queries.size());
  out.push_back(frame_queries[0]);
  const int n = frame_queries[0].rows();
  if (permutations_out) {
    permutations_out->clear();
    std::vector<int> identity(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) identity[static_cast<std::size_t>(i)] = i;
    permutations_out->push_back(identity);
  }
  for (std::size_t t = 1; t < frame_queries.size(); ++t) {
    const Tensor<S>& anchor = chained ? out[t - 1] : frame_queries[t - 1];
    const Assignment a = hungarian(query_matching_cost(anchor, frame_queries[t]));
    out.push_back(gather_rows(frame_queries[t], a.permutation));
    if (permutations_out) permutations_out->push_back(a.permutation);
  }
  return out;
}

template <typename S>
void declare_aggregate_params(ParamStore<S>& ps, int channels, Rng& rng) {
  declare_linear(ps, "agg", channels, 1, rng);
}

// Q_v[n] = sum_t softmax_t(Linear(Q~_f^t)[n]) * Q~_f^t[n]; the per-slot
// weights are normalized across frames.
template <typename S>
Tensor<S> aggregate_video_queries(const std::vector<Tensor<S>>& reordered, const ParamStore<S>& ps) {
  const int T = static_cast<int>(reordered.size());
  if (T == 0) throw ShapeError("aggregate_video_queries: empty input");
  const int n = reordered[0].rows(), c = reordered[0].cols();
  std::vector<Tensor<S>> score_rows;
  score_rows.reserve(static_cast<std::size_t>(T));
  for (const auto& q : reordered) score_rows.push_back(reshape(apply_linear(ps, "agg", q), {1, n}));
  auto weights = softmax(concat_rows(score_rows), 0);  // T x n, columns sum to 1
  Tensor<S> acc;
  for (int t = 0; t < T; ++t) {
    auto w_t = broadcast_cols(reshape(slice_rows(weights, t, t + 1), {n, 1}), c);
    auto term = mul(w_t, reordered[static_cast<std::size_t>(t)]);
    acc = t == 0 ? term : add(acc, term);
  }
  return acc;
}

}  // namespace refquery
