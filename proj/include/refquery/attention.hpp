#pragma once

#include <cmath>
#include <memory>
#include <utility>
#include <vector>

#include "refquery/tensor.hpp"

namespace refquery {

template <typename S>
struct MhaParams {
  Tensor<S> wq, bq, wk, bk, wv, bv, wo, bo;
};

// Scaled dot-product attention, heads concatenated then projected.
// q: n_q x C, k/v: n_k x C, output n_q x C.
template <typename S>
Tensor<S> multi_head_attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                               int heads, const MhaParams<S>& p) {
  const int C = q.cols();
  if (heads < 1 || C % heads != 0)
    throw ConfigError("multi_head_attention: channels " + std::to_string(C) +
                      " not divisible by heads " + std::to_string(heads));
  if (k.cols() != C || v.cols() != C || k.rows() != v.rows())
    throw ShapeError("multi_head_attention: k/v shapes " + shape_str(k.shape()) + " vs " +
                     shape_str(v.shape()) + " incompatible with q " + shape_str(q.shape()));
  const int d = C / heads;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  auto qp = linear(q, p.wq, p.bq);
  auto kp = linear(k, p.wk, p.bk);
  auto vp = linear(v, p.wv, p.bv);
  std::vector<Tensor<S>> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    auto qh = slice_cols(qp, h * d, (h + 1) * d);
    auto kh = slice_cols(kp, h * d, (h + 1) * d);
    auto vh = slice_cols(vp, h * d, (h + 1) * d);
    auto attn = softmax(scale(matmul_transb(qh, kh), inv_sqrt_d), 1);
    outs.push_back(matmul(attn, vh));
  }
  return linear(concat_cols(outs), p.wo, p.bo);
}

template <typename S>
struct DeformParams {
  Tensor<S> w_off, b_off;  // C -> heads*L*K*2 sampling offsets
  Tensor<S> w_wgt, b_wgt;  // C -> heads*L*K attention logits
  Tensor<S> w_val, b_val;  // C -> C value projection
  Tensor<S> w_out, b_out;  // C -> C output projection
};

// Spatial shape of one feature scale.
struct ScaleShape {
  int h = 0, w = 0;
};

namespace detail {

// Pixel-space position for a normalized location, clamped to the map so a
// constant map samples to that constant for any offset.
template <typename S>
struct SamplePos {
  int x0, x1, y0, y1;
  S lx, ly;
  bool clamped_x, clamped_y;
};

template <typename S>
inline SamplePos<S> sample_pos(S nx, S ny, int h, int w) {
  SamplePos<S> s;
  S px = nx * static_cast<S>(w) - S(0.5);
  S py = ny * static_cast<S>(h) - S(0.5);
  s.clamped_x = px < S(0) || px > static_cast<S>(w - 1);
  s.clamped_y = py < S(0) || py > static_cast<S>(h - 1);
  px = std::min(std::max(px, S(0)), static_cast<S>(w - 1));
  py = std::min(std::max(py, S(0)), static_cast<S>(h - 1));
  s.x0 = static_cast<int>(std::floor(px));
  s.y0 = static_cast<int>(std::floor(py));
  s.x1 = std::min(s.x0 + 1, w - 1);
  s.y1 = std::min(s.y0 + 1, h - 1);
  s.lx = px - static_cast<S>(s.x0);
  s.ly = py - static_cast<S>(s.y0);
  return s;
}

}  // namespace detail

// Weighted bilinear sampling of per-scale value maps at learned locations.
// values[l]: (H_l*W_l) x C row-major maps; locs: n x (heads*L*K*2) normalized
// (x, y) pairs; weights: n x (heads*L*K). Output n x C with each head reading
// its own channel slice. Gradients flow to values, locations and weights.
template <typename S>
Tensor<S> ms_deform_sample(const std::vector<Tensor<S>>& values, const std::vector<ScaleShape>& shapes,
                           const Tensor<S>& locs, const Tensor<S>& weights, int heads) {
  const int L = static_cast<int>(values.size());
  if (L == 0 || static_cast<int>(shapes.size()) != L)
    throw ShapeError("ms_deform_sample: values/shapes mismatch");
  const int C = values[0].cols();
  if (C % heads != 0) throw ConfigError("ms_deform_sample: channels not divisible by heads");
  const int d = C / heads;
  const int n = locs.rows();
  const int K = weights.cols() / (heads * L);
  if (weights.cols() != heads * L * K || locs.cols() != heads * L * K * 2 || weights.rows() != n)
    throw ShapeError("ms_deform_sample: locs/weights layout mismatch");

  bool rec = Tape<S>::current() != nullptr && (locs.requires_grad() || weights.requires_grad());
  for (const auto& v : values)
    if (Tape<S>::current() && v.requires_grad()) rec = true;

  Tensor<S> out = detail::make_out<S>({n, C}, rec);
  const int P = heads * L * K;
  for (int i = 0; i < n; ++i) {
    const S* lrow = locs.value().data() + static_cast<std::size_t>(i) * P * 2;
    const S* wrow = weights.value().data() + static_cast<std::size_t>(i) * P;
    S* orow = out.raw().data() + static_cast<std::size_t>(i) * C;
    for (int h = 0; h < heads; ++h) {
      for (int l = 0; l < L; ++l) {
        const S* vmap = values[static_cast<std::size_t>(l)].value().data();
        const int W = shapes[static_cast<std::size_t>(l)].w, Hh = shapes[static_cast<std::size_t>(l)].h;
        for (int k = 0; k < K; ++k) {
          const int pidx = (h * L + l) * K + k;
          const auto sp = detail::sample_pos<S>(lrow[pidx * 2], lrow[pidx * 2 + 1], Hh, W);
          const S aw = wrow[pidx];
          const S w00 = (S(1) - sp.ly) * (S(1) - sp.lx), w01 = (S(1) - sp.ly) * sp.lx;
          const S w10 = sp.ly * (S(1) - sp.lx), w11 = sp.ly * sp.lx;
          const std::size_t p00 = static_cast<std::size_t>(sp.y0 * W + sp.x0) * C;
          const std::size_t p01 = static_cast<std::size_t>(sp.y0 * W + sp.x1) * C;
          const std::size_t p10 = static_cast<std::size_t>(sp.y1 * W + sp.x0) * C;
          const std::size_t p11 = static_cast<std::size_t>(sp.y1 * W + sp.x1) * C;
          for (int cc = 0; cc < d; ++cc) {
            const std::size_t ch = static_cast<std::size_t>(h * d + cc);
            orow[ch] += aw * (w00 * vmap[p00 + ch] + w01 * vmap[p01 + ch] + w10 * vmap[p10 + ch] +
                              w11 * vmap[p11 + ch]);
          }
        }
      }
    }
  }

  if (rec) {
    std::vector<std::shared_ptr<TensorNode<S>>> vns;
    for (const auto& v : values) vns.push_back(v.node());
    auto ln = locs.node(), wn = weights.node(), on = out.node();
    auto shp = shapes;
    Tape<S>::current()->record("ms_deform_sample", on, [vns, ln, wn, on, shp, heads, L, K, C, d, n] {
      const int P = heads * L * K;
      for (int i = 0; i < n; ++i) {
        const S* lrow = ln->value.data() + static_cast<std::size_t>(i) * P * 2;
        const S* wrow = wn->value.data() + static_cast<std::size_t>(i) * P;
        const S* grow = on->grad.data() + static_cast<std::size_t>(i) * C;
        for (int h = 0; h < heads; ++h) {
          for (int l = 0; l < L; ++l) {
            const auto& vn = vns[static_cast<std::size_t>(l)];
            const S* vmap = vn->value.data();
            const int W = shp[static_cast<std::size_t>(l)].w, Hh = shp[static_cast<std::size_t>(l)].h;
            for (int k = 0; k < K; ++k) {
              const int pidx = (h * L + l) * K + k;
              const auto sp = detail::sample_pos<S>(lrow[pidx * 2], lrow[pidx * 2 + 1], Hh, W);
              const S aw = wrow[pidx];
              const S w00 = (S(1) - sp.ly) * (S(1) - sp.lx), w01 = (S(1) - sp.ly) * sp.lx;
              const S w10 = sp.ly * (S(1) - sp.lx), w11 = sp.ly * sp.lx;
              const std::size_t p00 = static_cast<std::size_t>(sp.y0 * W + sp.x0) * C;
              const std::size_t p01 = static_cast<std::size_t>(sp.y0 * W + sp.x1) * C;
              const std::size_t p10 = static_cast<std::size_t>(sp.y1 * W + sp.x0) * C;
              const std::size_t p11 = static_cast<std::size_t>(sp.y1 * W + sp.x1) * C;
              S dw = S(0), dlx = S(0), dly = S(0);
              S* gv = vn->requires_grad ? detail::grad_buf(vn).data() : nullptr;
              for (int cc = 0; cc < d; ++cc) {
                const std::size_t ch = static_cast<std::size_t>(h * d + cc);
                const S go = grow[ch];
                const S v00 = vmap[p00 + ch], v01 = vmap[p01 + ch];
                const S v10 = vmap[p10 + ch], v11 = vmap[p11 + ch];
                dw += go * (w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11);
                dlx += go * ((S(1) - sp.ly) * (v01 - v00) + sp.ly * (v11 - v10));
                dly += go * ((S(1) - sp.lx) * (v10 - v00) + sp.lx * (v11 - v01));
                if (gv) {
                  const S c = go * aw;
                  gv[p00 + ch] += c * w00;
                  gv[p01 + ch] += c * w01;
                  gv[p10 + ch] += c * w10;
                  gv[p11 + ch] += c * w11;
                }
              }
              if (wn->requires_grad) detail::grad_buf(wn)[static_cast<std::size_t>(i) * P + pidx] += dw;
              if (ln->requires_grad) {
                auto& gl = detail::grad_buf(ln);
                if (!sp.clamped_x)
                  gl[static_cast<std::size_t>(i) * P * 2 + pidx * 2] += aw * dlx * static_cast<S>(W);
                if (!sp.clamped_y)
                  gl[static_cast<std::size_t>(i) * P * 2 + pidx * 2 + 1] += aw * dly * static_cast<S>(Hh);
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// Normalized (x, y) cell centers for the flattened multi-scale token order
// (scale-major, then row-major within each scale), replicated per point slot.
template <typename S>
Tensor<S> deform_reference_points(const std::vector<ScaleShape>& shapes, int heads, int K) {
  const int L = static_cast<int>(shapes.size());
  int n = 0;
  for (const auto& s : shapes) n += s.h * s.w;
  const int P = heads * L * K;
  std::vector<S> ref(static_cast<std::size_t>(n) * P * 2);
  int tok = 0;
  for (const auto& s : shapes) {
    for (int y = 0; y < s.h; ++y) {
      for (int x = 0; x < s.w; ++x, ++tok) {
        const S cx = (static_cast<S>(x) + S(0.5)) / static_cast<S>(s.w);
        const S cy = (static_cast<S>(y) + S(0.5)) / static_cast<S>(s.h);
        for (int p = 0; p < P; ++p) {
          ref[(static_cast<std::size_t>(tok) * P + p) * 2] = cx;
          ref[(static_cast<std::size_t>(tok) * P + p) * 2 + 1] = cy;
        }
      }
    }
  }
  return Tensor<S>::from({n, P * 2}, std::move(ref));
}

// Per-scale offset normalization (offsets are learned in cell units of the
// scale they sample from).
template <typename S>
Tensor<S> deform_offset_normalizer(const std::vector<ScaleShape>& shapes, int n_tokens, int heads, int K) {
  const int L = static_cast<int>(shapes.size());
  const int P = heads * L * K;
  std::vector<S> inv(static_cast<std::size_t>(n_tokens) * P * 2);
  for (int tok = 0; tok < n_tokens; ++tok) {
    for (int h = 0; h < heads; ++h) {
      for (int l = 0; l < L; ++l) {
        for (int k = 0; k < K; ++k) {
          const int pidx = (h * L + l) * K + k;
          inv[(static_cast<std::size_t>(tok) * P + pidx) * 2] = S(1) / static_cast<S>(shapes[static_cast<std::size_t>(l)].w);
          inv[(static_cast<std::size_t>(tok) * P + pidx) * 2 + 1] = S(1) / static_cast<S>(shapes[static_cast<std::size_t>(l)].h);
        }
      }
    }
  }
  return Tensor<S>::from({n_tokens, P * 2}, std::move(inv));
}

// One deformable self-attention pass over the flattened multi-scale tokens of
// a single frame. tokens[l]: (H_l*W_l) x C; query stream is their row concat.
template <typename S>
Tensor<S> deformable_self_attention(const Tensor<S>& queries, const std::vector<Tensor<S>>& tokens,
                                    const std::vector<ScaleShape>& shapes, int heads, int K,
                                    const DeformParams<S>& p) {
  const int L = static_cast<int>(tokens.size());
  const int n = queries.rows();
  auto offsets = linear(queries, p.w_off, p.b_off);
  auto logits = linear(queries, p.w_wgt, p.b_wgt);
  auto weights = reshape(softmax(reshape(logits, {n * heads, L * K}), 1), {n, heads * L * K});
  auto locs = add(deform_reference_points<S>(shapes, heads, K),
                  mul(offsets, deform_offset_normalizer<S>(shapes, n, heads, K)));
  std::vector<Tensor<S>> vals;
  vals.reserve(tokens.size());
  for (const auto& t : tokens) vals.push_back(linear(t, p.w_val, p.b_val));
  auto sampled = ms_deform_sample(vals, shapes, locs, weights, heads);
  return linear(sampled, p.w_out, p.b_out);
}

}  // namespace refquery
