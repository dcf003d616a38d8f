#pragma once

#include <algorithm>
#include <functional>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "refquery/gradcheck.hpp"
#include "refquery/metrics.hpp"
#include "refquery/model.hpp"
#include "refquery/video_init.hpp"

namespace refquery {

struct SelfCheckResult {
  std::string name;
  bool pass = false;
  double max_err = 0.0;  // gradient rel error or metric deviation
  std::string detail;
};

namespace selfcheck_detail {

inline Tensor<float> random_tensor(Shape shape, Rng& rng, float lo = -1.0f, float hi = 1.0f) {
  Tensor<float> t = Tensor<float>::zeros(std::move(shape));
  for (auto& v : t.raw()) v = rng.uniform(lo, hi);
  return t;
}

template <typename Fn>
SelfCheckResult grad_check(const std::string& name, Fn&& f, std::vector<Tensor<float>> params,
                           double step = 1e-4, double tol = 1e-4) {
  auto report = finite_diff_check(std::forward<Fn>(f), params, step, tol);
  SelfCheckResult r;
  r.name = name;
  r.pass = report.pass;
  r.max_err = report.max_rel_err;
  r.detail = report.message;
  return r;
}

// Exhaustive assignment oracle.
inline double brute_force_min_cost(const std::vector<std::vector<double>>& cost) {
  const int n = static_cast<int>(cost.size());
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double c = 0;
    for (int i = 0; i < n; ++i) c += cost[static_cast<std::size_t>(i)][static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
    best = std::min(best, c);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

inline double oracle_j(const BinaryMask& a, const BinaryMask& b) {
  std::int64_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += (a[i] && b[i]) ? 1 : 0;
    uni += (a[i] || b[i]) ? 1 : 0;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline double oracle_f(const BinaryMask& pred, const BinaryMask& gt, int h, int w, double tol) {
  auto pixels = [&](const BinaryMask& m) {
    std::vector<std::pair<int, int>> out;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        if (!m[static_cast<std::size_t>(y) * w + x]) continue;
        bool edge = y == 0 || y == h - 1 || x == 0 || x == w - 1;
        if (!edge)
          edge = !m[static_cast<std::size_t>(y - 1) * w + x] || !m[static_cast<std::size_t>(y + 1) * w + x] ||
                 !m[static_cast<std::size_t>(y) * w + x - 1] || !m[static_cast<std::size_t>(y) * w + x + 1];
        if (edge) out.push_back({y, x});
      }
    return out;
  };
  bool pe = std::all_of(pred.begin(), pred.end(), [](std::uint8_t v) { return !v; });
  bool ge = std::all_of(gt.begin(), gt.end(), [](std::uint8_t v) { return !v; });
  if (pe && ge) return 1.0;
  if (pe || ge) return 0.0;
  auto bp = pixels(pred), bg = pixels(gt);
  auto frac = [&](const auto& src, const auto& ref) {
    std::int64_t hit = 0;
    for (auto [y, x] : src) {
      double best = 1e18;
      for (auto [gy, gx] : ref)
        best = std::min(best, std::sqrt(static_cast<double>((y - gy) * (y - gy) + (x - gx) * (x - gx))));
      if (best <= tol) ++hit;
    }
    return static_cast<double>(hit) / static_cast<double>(src.size());
  };
  const double p = frac(bp, bg), r = frac(bg, bp);
  return p + r == 0 ? 0.0 : 2 * p * r / (p + r);
}

}  // namespace selfcheck_detail

// Gradient checks for every differentiable op, the Hungarian brute-force
// oracle suite and the metric oracles. Prints one line per check.
inline std::vector<SelfCheckResult> run_selfcheck(std::ostream& os) {
  using namespace selfcheck_detail;
  std::vector<SelfCheckResult> results;

  auto push = [&](SelfCheckResult r) {
    os << (r.pass ? "[PASS] " : "[FAIL] ") << std::left << std::setw(28) << r.name << " max rel err "
       << std::scientific << std::setprecision(3) << r.max_err << std::defaultfloat;
    if (!r.detail.empty()) os << "  (" << r.detail << ")";
    os << "\n";
    results.push_back(std::move(r));
  };

  // --- per-op gradient checks (5 seeds each) -------------------------------
  struct OpCheck {
    std::string name;
    std::function<SelfCheckResult(Rng&)> run;
  };
  std::vector<OpCheck> ops;
  ops.push_back({"matmul", [](Rng& rng) {
                   return grad_check("matmul",
                                     [](auto& ps) { return sum_all(matmul(ps[0], ps[1])); },
                                     {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)});
                 }});
  ops.push_back({"matmul_transb", [](Rng& rng) {
                   return grad_check("matmul_transb",
                                     [](auto& ps) { return sum_all(matmul_transb(ps[0], ps[1])); },
                                     {random_tensor({3, 4}, rng), random_tensor({5, 4}, rng)});
                 }});
  ops.push_back({"elementwise", [](Rng& rng) {
                   return grad_check(
                       "elementwise",
                       [](auto& ps) {
                         auto y = div(add(mul(ps[0], ps[1]), ps[0]), add_const(mul(ps[1], ps[1]), 1.0));
                         return mean_all(mul(y, sub(ps[0], scale(ps[1], 0.5))));
                       },
                       {random_tensor({4, 5}, rng, 0.2f, 1.5f), random_tensor({4, 5}, rng, 0.2f, 1.5f)});
                 }});
  ops.push_back({"activations", [](Rng& rng) {
                   return grad_check(
                       "activations",
                       [](auto& ps) {
                         return sum_all(mul(sigmoid(ps[0]), sqrt(add_const(relu(ps[1]), 0.3))));
                       },
                       {random_tensor({3, 6}, rng), random_tensor({3, 6}, rng)});
                 }});
  ops.push_back({"softmax", [](Rng& rng) {
                   return grad_check("softmax",
                                     [](auto& ps) { return sum_all(mul(softmax(ps[0], 1), ps[1])); },
                                     {random_tensor({4, 6}, rng, -2, 2), random_tensor({4, 6}, rng)});
                 }});
  ops.push_back({"layer_norm", [](Rng& rng) {
                   return grad_check(
                       "layer_norm",
                       [](auto& ps) { return sum_all(mul(layer_norm(ps[0], ps[1], ps[2], 1e-5), ps[3])); },
                       {random_tensor({4, 8}, rng, -2, 2), random_tensor({8}, rng, 0.5f, 1.5f),
                        random_tensor({8}, rng), random_tensor({4, 8}, rng)});
                 }});
  ops.push_back({"shape_ops", [](Rng& rng) {
                   return grad_check(
                       "shape_ops",
                       [](auto& ps) {
                         using S = typename std::decay_t<decltype(ps[0])>::value_type;
                         auto g = gather_rows(ps[0], {2, 0, 2, 1});
                         auto c = concat_rows<S>({g, slice_rows(ps[1], 0, 2)});
                         auto s = concat_cols<S>({slice_cols(c, 0, 2), slice_cols(c, 3, 5)});
                         return mean_all(mul(reshape(s, {4, 6}), reshape(s, {4, 6})));
                       },
                       {random_tensor({3, 5}, rng), random_tensor({4, 5}, rng)});
                 }});
  ops.push_back({"broadcasts", [](Rng& rng) {
                   return grad_check(
                       "broadcasts",
                       [](auto& ps) {
                         auto y = add_rowvec(ps[0], ps[1]);
                         return mean_all(mul(y, broadcast_cols(ps[2], 5)));
                       },
                       {random_tensor({3, 5}, rng), random_tensor({5}, rng), random_tensor({3}, rng)});
                 }});
  ops.push_back({"reductions", [](Rng& rng) {
                   return grad_check(
                       "reductions",
                       [](auto& ps) { return add(sum_all(mul(ps[0], ps[0])), scale(mean_all(ps[0]), 0.7)); },
                       {random_tensor({4, 4}, rng)});
                 }});
  ops.push_back({"bce_with_logits", [](Rng& rng) {
                   auto targets = random_tensor({3, 4}, rng, 0, 1);
                   for (auto& v : targets.raw()) v = v > 0.5f ? 1.0f : 0.0f;
                   return grad_check(
                       "bce_with_logits",
                       [&](auto& ps) {
                         using S = typename std::decay_t<decltype(ps[0])>::value_type;
                         return bce_with_logits_mean(ps[0], cast_tensor<float, S>(targets));
                       },
                       {random_tensor({3, 4}, rng, -3, 3)});
                 }});
  ops.push_back({"upsample_bilinear", [](Rng& rng) {
                   return grad_check(
                       "upsample_bilinear",
                       [](auto& ps) {
                         auto up = upsample_bilinear(ps[0], 3, 4, 7, 9);
                         return sum_all(mul(up, up));
                       },
                       {random_tensor({2, 12}, rng)});
                 }});
  ops.push_back({"multi_head_attention", [](Rng& rng) {
                   ParamStore<float> ps;
                   declare_mha(ps, "a", 8, rng);
                   auto probe = random_tensor({3, 8}, rng);
                   std::vector<Tensor<float>> params = {random_tensor({3, 8}, rng), random_tensor({5, 8}, rng),
                                                        random_tensor({5, 8}, rng), ps.get("a.q.w"),
                                                        ps.get("a.o.w")};
                   return grad_check(
                       "multi_head_attention",
                       [&](auto& pv) {
                         using S = typename std::decay_t<decltype(pv[0])>::value_type;
                         auto st = ps.template cast<S>();
                         st.replace("a.q.w", pv[3]);
                         st.replace("a.o.w", pv[4]);
                         auto out = multi_head_attention(pv[0], pv[1], pv[2], 2, fetch_mha(st, "a"));
                         return sum_all(mul(out, cast_tensor<float, S>(probe)));
                       },
                       params);
                 }});
  ops.push_back({"ms_deform_sample", [](Rng& rng) {
                   const int heads = 2, K = 2, L = 2, n = 3, C = 4;
                   std::vector<ScaleShape> shapes = {{4, 5}, {2, 3}};
                   auto v0 = random_tensor({20, C}, rng);
                   auto v1 = random_tensor({6, C}, rng);
                   Tensor<float> locs = Tensor<float>::zeros({n, heads * L * K * 2});
                   for (int i = 0; i < n; ++i)
                     for (int p = 0; p < heads * L * K; ++p) {
                       const int l = (p / K) % L;
                       const float jx = 0.15f + 0.2f * rng.uniform();
                       const float jy = 0.15f + 0.2f * rng.uniform();
                       locs.raw()[(i * heads * L * K + p) * 2] = (1.0f + jx) / shapes[l].w;
                       locs.raw()[(i * heads * L * K + p) * 2 + 1] = (0.5f + jy) / shapes[l].h;
                     }
                   auto wlog = random_tensor({n, heads * L * K}, rng);
                   auto probe = random_tensor({n, C}, rng);
                   return grad_check(
                       "ms_deform_sample",
                       [&](auto& pv) {
                         using S = typename std::decay_t<decltype(pv[0])>::value_type;
                         std::vector<Tensor<S>> vals = {pv[0], pv[1]};
                         auto weights =
                             reshape(softmax(reshape(pv[3], {n * heads, L * K}), 1), {n, heads * L * K});
                         auto out = ms_deform_sample(vals, shapes, pv[2], weights, heads);
                         return sum_all(mul(out, cast_tensor<float, S>(probe)));
                       },
                       {v0, v1, locs, wlog}, 5e-5);
                 }});
  ops.push_back({"aggregate_reorder", [](Rng& rng) {
                   ParamStore<float> ps;
                   declare_aggregate_params(ps, 6, rng);
                   auto probe = random_tensor({4, 6}, rng);
                   return grad_check(
                       "aggregate_reorder",
                       [&](auto& pv) {
                         using S = typename std::decay_t<decltype(pv[0])>::value_type;
                         auto st = ps.template cast<S>();
                         st.replace("agg.w", pv[2]);
                         auto reordered = reorder_frame_queries<S>({pv[0], pv[1]}, true);
                         auto qv = aggregate_video_queries(reordered, st);
                         return sum_all(mul(qv, cast_tensor<float, S>(probe)));
                       },
                       {random_tensor({4, 6}, rng), random_tensor({4, 6}, rng), ps.get("agg.w")});
                 }});

  for (auto& op : ops) {
    SelfCheckResult worst;
    worst.name = op.name;
    worst.pass = true;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      Rng rng(seed * 37 + 5);
      auto r = op.run(rng);
      worst.max_err = std::max(worst.max_err, r.max_err);
      worst.pass = worst.pass && r.pass;
      if (!r.detail.empty()) worst.detail = r.detail;
    }
    push(std::move(worst));
  }

  // --- Hungarian brute-force oracle -----------------------------------------
  {
    SelfCheckResult r;
    r.name = "hungarian_oracle";
    r.pass = true;
    Rng rng(404);
    for (int n = 2; n <= 7 && r.pass; ++n) {
      for (int trial = 0; trial < 100; ++trial) {
        std::vector<std::vector<double>> cost(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(n)));
        for (auto& row : cost)
          for (auto& v : row) v = rng.uniform(-5.0f, 5.0f);
        const double got = hungarian(cost).total_cost;
        const double want = brute_force_min_cost(cost);
        if (got != want) {
          r.pass = false;
          r.detail = "mismatch at N=" + std::to_string(n);
          break;
        }
      }
    }
    push(std::move(r));
  }

  // --- metric oracles --------------------------------------------------------
  {
    SelfCheckResult r;
    r.name = "metric_oracles";
    r.pass = true;
    Rng rng(505);
    for (int trial = 0; trial < 50; ++trial) {
      const int h = 4 + static_cast<int>(rng.below(20));
      const int w = 4 + static_cast<int>(rng.below(20));
      BinaryMask a(static_cast<std::size_t>(h) * w), b(static_cast<std::size_t>(h) * w);
      for (auto& v : a) v = rng.below(3) == 0 ? 1 : 0;
      for (auto& v : b) v = rng.below(3) == 0 ? 1 : 0;
      const double tol = default_boundary_tolerance(h, w);
      if (region_similarity(a, b, h, w) != oracle_j(a, b) ||
          contour_accuracy(a, b, h, w, tol) != oracle_f(a, b, h, w, tol)) {
        r.pass = false;
        r.detail = "mismatch at trial " + std::to_string(trial);
        break;
      }
    }
    push(std::move(r));
  }

  return results;
}

}  // namespace refquery
