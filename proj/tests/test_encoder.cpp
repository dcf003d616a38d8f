#include <doctest.h>

#include <cstring>

#include "refquery/encoder.hpp"
#include "refquery/gradcheck.hpp"
#include "refquery/model.hpp"

using namespace refquery;

namespace {

SyntheticSpec tiny_spec(std::uint64_t seed, int frames = 2) {
  SyntheticSpec s;
  s.seed = seed;
  s.frames = frames;
  s.base_h = 16;
  s.base_w = 16;
  s.scales = {{4, 4, 6}, {2, 2, 6}};
  s.text_channels = 6;
  s.text_tokens = 3;
  s.num_objects = 1;
  s.min_radius = 3;
  s.max_radius = 5;
  s.max_speed = 1.0f;
  return s;
}

ModelConfig tiny_config(FusionMode fusion = FusionMode::Dense) {
  ModelConfig cfg;
  cfg.channels = 8;
  cfg.heads = 2;
  cfg.enc_layers = 2;
  cfg.frame_layers = 2;
  cfg.video_layers = 2;
  cfg.frame_queries = 4;
  cfg.video_queries = 4;
  cfg.deform_points = 2;
  cfg.fusion = fusion;
  cfg.scale_channels = {6, 6};
  cfg.text_channels = 6;
  return cfg;
}

void zero_param(ParamStore<float>& ps, const std::string& name) {
  auto& t = ps.get(name);
  std::fill(t.raw().begin(), t.raw().end(), 0.0f);
}

}  // namespace

TEST_CASE("output shapes are a pure function of input shapes and C") {
  Rng shape_rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    ModelConfig cfg;
    cfg.heads = 1 + static_cast<int>(shape_rng.below(3));
    cfg.channels = cfg.heads * (2 + static_cast<int>(shape_rng.below(4)));
    cfg.enc_layers = 1 + static_cast<int>(shape_rng.below(2));
    cfg.frame_queries = cfg.video_queries = 3;
    cfg.fusion = trial % 2 ? FusionMode::Dense : FusionMode::Deformable;
    cfg.deform_points = 1 + static_cast<int>(shape_rng.below(3));
    const int h0 = 4 + static_cast<int>(shape_rng.below(3));
    const int c0 = 3 + static_cast<int>(shape_rng.below(4));
    const int c1 = 3 + static_cast<int>(shape_rng.below(4));
    cfg.scale_channels = {c0, c1};
    cfg.text_channels = 3 + static_cast<int>(shape_rng.below(4));

    SyntheticSpec s;
    s.seed = 1000 + trial;
    s.frames = 1 + static_cast<int>(shape_rng.below(3));
    s.base_h = s.base_w = 16;
    s.scales = {{h0, h0, c0}, {h0 / 2, h0 / 2, c1}};
    s.text_channels = cfg.text_channels;
    s.text_tokens = 1 + static_cast<int>(shape_rng.below(4));
    s.num_objects = 1;
    s.min_radius = 3;
    s.max_radius = 4;
    auto clip = generate_synthetic(s);

    Model<float> model(cfg, 9);
    auto fused = encode(clip, model.params, cfg);
    CAPTURE(trial);
    REQUIRE(fused.visual.size() == static_cast<std::size_t>(clip.frames));
    for (const auto& frame : fused.visual) {
      REQUIRE(frame.size() == 2);
      CHECK(frame[0].shape() == Shape{h0 * h0, cfg.channels});
      CHECK(frame[1].shape() == Shape{(h0 / 2) * (h0 / 2), cfg.channels});
      check_finite(frame[0], "shape oracle");
      check_finite(frame[1], "shape oracle");
    }
    CHECK(fused.text.shape() == Shape{clip.text_tokens_n, cfg.channels});
    CHECK(fused.sentence.shape() == Shape{1, cfg.channels});
  }
}

TEST_CASE("zeroed output projections leave projected features untouched") {
  for (FusionMode fusion : {FusionMode::Dense, FusionMode::Deformable}) {
    ModelConfig cfg = tiny_config(fusion);
    auto clip = generate_synthetic(tiny_spec(3));
    Model<float> model(cfg, 5);
    for (int i = 0; i < cfg.enc_layers; ++i) {
      const std::string p = "enc" + std::to_string(i);
      if (fusion == FusionMode::Deformable) {
        zero_param(model.params, p + ".self.out.w");
        zero_param(model.params, p + ".self.out.b");
      } else {
        zero_param(model.params, p + ".self.o.w");
        zero_param(model.params, p + ".self.o.b");
      }
      for (const char* attn : {".i2t", ".t2i"}) {
        zero_param(model.params, p + attn + ".o.w");
        zero_param(model.params, p + attn + ".o.b");
      }
      for (const char* ffn : {".ffn_v", ".ffn_t"}) {
        zero_param(model.params, p + ffn + ".fc2.w");
        zero_param(model.params, p + ffn + ".fc2.b");
      }
    }
    auto fused = encode(clip, model.params, cfg);
    // expected: raw inputs through the 1x1 projections only
    auto inputs = encoder_inputs_from_clip<float>(clip);
    for (int t = 0; t < clip.frames; ++t)
      for (std::size_t l = 0; l < clip.scales.size(); ++l) {
        auto expect = apply_linear(model.params, "in_proj.s" + std::to_string(l),
                                   inputs.visual[static_cast<std::size_t>(t)][l]);
        REQUIRE(fused.visual[static_cast<std::size_t>(t)][l].size() == expect.size());
        CHECK(std::memcmp(fused.visual[static_cast<std::size_t>(t)][l].value().data(),
                          expect.value().data(), expect.value().size() * 4) == 0);
      }
  }
}

TEST_CASE("dense degenerate case: single scale 1x1, T=1, N_t=1 stays finite with expected shape") {
  ModelConfig cfg = tiny_config(FusionMode::Dense);
  cfg.scale_channels = {5};
  cfg.text_channels = 4;
  FeatureClip clip;
  clip.clip_id = "degenerate";
  clip.frames = 1;
  clip.base_h = clip.base_w = 4;
  clip.scales = {{1, 1, 5}};
  clip.visual = {{{0.1f, -0.2f, 0.3f, 0.4f, -0.5f}}};
  clip.text_tokens_n = 1;
  clip.text_channels = 4;
  clip.text_tokens = {0.5f, -0.5f, 0.25f, 1.0f};
  clip.text_sentence = clip.text_tokens;
  clip.validate();

  Model<float> model(cfg, 2);
  auto fused = encode(clip, model.params, cfg);
  CHECK(fused.visual[0][0].shape() == Shape{1, cfg.channels});
  CHECK(fused.text.shape() == Shape{1, cfg.channels});
  check_finite(fused.visual[0][0], "degenerate");
}

TEST_CASE("deformable and dense modes produce finite outputs of identical shapes") {
  auto clip = generate_synthetic(tiny_spec(8, 3));
  for (FusionMode fusion : {FusionMode::Dense, FusionMode::Deformable}) {
    ModelConfig cfg = tiny_config(fusion);
    Model<float> model(cfg, 11);
    auto fused = encode(clip, model.params, cfg);
    for (const auto& frame : fused.visual) {
      CHECK(frame[0].shape() == Shape{16, cfg.channels});
      CHECK(frame[1].shape() == Shape{4, cfg.channels});
      check_finite(frame[0], "mode check");
    }
  }
}

TEST_CASE("non-finite input is reported with the layer index") {
  ModelConfig cfg = tiny_config(FusionMode::Dense);
  cfg.enc_layers = 1;
  auto clip = generate_synthetic(tiny_spec(4));
  clip.visual[0][0][3] = std::numeric_limits<float>::quiet_NaN();
  Model<float> model(cfg, 3);
  CHECK_THROWS_WITH_AS(encode(clip, model.params, cfg), doctest::Contains("layer 0"), NumericError);
}

TEST_CASE("gradient through one full encoder layer (dense)") {
  ModelConfig cfg = tiny_config(FusionMode::Dense);
  cfg.enc_layers = 1;
  auto clip = generate_synthetic(tiny_spec(5));
  Model<float> model(cfg, 21);
  Rng wr(3);
  Tensor<float> wsum = Tensor<float>::zeros({16, cfg.channels});
  for (auto& v : wsum.raw()) v = wr.uniform(-1, 1);

  std::vector<std::string> names = {"in_proj.s0.w", "enc0.i2t.q.w", "enc0.t2i.o.w",
                                    "enc0.ffn_v.fc1.w", "enc0.norm_v1.g", "enc0.self.q.w"};
  std::vector<Tensor<float>> params;
  for (const auto& n : names) params.push_back(model.params.get(n));
  auto report = finite_diff_check(
      [&](auto& ps) {
        using S = typename std::decay_t<decltype(ps[0])>::value_type;
        auto store = model.params.template cast<S>();
        for (std::size_t i = 0; i < names.size(); ++i) store.replace(names[i], ps[i]);
        auto fused = encode(encoder_inputs_from_clip<S>(clip), store, cfg);
        auto stacked = concat_rows<S>({fused.visual[0][0], fused.visual[1][0]});
        auto probe = concat_rows<S>({cast_tensor<float, S>(wsum), cast_tensor<float, S>(wsum)});
        return add(sum_all(mul(stacked, probe)), mean_all(mul(fused.text, fused.text)));
      },
      params, 1e-5, 1e-3, names);
  CHECK(report.pass);
  CHECK(report.max_rel_err <= 1e-3);
}

TEST_CASE("gradient through one full encoder layer (deformable)") {
  ModelConfig cfg = tiny_config(FusionMode::Deformable);
  cfg.enc_layers = 1;
  auto clip = generate_synthetic(tiny_spec(6));
  Model<float> model(cfg, 23);
  // Keep sampling locations away from the bilinear cell lattice: small offset
  // weights plus a fixed mid-cell bias. Finite differencing across a lattice
  // kink would compare one-sided slopes; location gradients are exercised all
  // the same.
  {
    auto& w = model.params.get("enc0.self.off.w");
    for (auto& v : w.raw()) v *= 0.02f;
    auto& b = model.params.get("enc0.self.off.b");
    for (std::size_t i = 0; i < b.raw().size(); ++i) b.raw()[i] = i % 2 ? 0.37f : 0.42f;
  }
  Rng wr(5);
  Tensor<float> wsum = Tensor<float>::zeros({16, cfg.channels});
  for (auto& v : wsum.raw()) v = wr.uniform(-1, 1);

  std::vector<std::string> names = {"in_proj.s0.w", "enc0.self.off.w", "enc0.self.wgt.w",
                                    "enc0.self.val.w", "enc0.self.out.b"};
  std::vector<Tensor<float>> params;
  for (const auto& n : names) params.push_back(model.params.get(n));
  auto report = finite_diff_check(
      [&](auto& ps) {
        using S = typename std::decay_t<decltype(ps[0])>::value_type;
        auto store = model.params.template cast<S>();
        for (std::size_t i = 0; i < names.size(); ++i) store.replace(names[i], ps[i]);
        auto fused = encode(encoder_inputs_from_clip<S>(clip), store, cfg);
        auto stacked = concat_rows<S>({fused.visual[0][0], fused.visual[1][0]});
        auto probe = concat_rows<S>({cast_tensor<float, S>(wsum), cast_tensor<float, S>(wsum)});
        return sum_all(mul(stacked, probe));
      },
      params, 1e-4, 1e-3, names);
  CHECK(report.pass);
}
