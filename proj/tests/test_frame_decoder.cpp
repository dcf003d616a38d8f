#include <doctest.h>

#include <cstring>

#include "refquery/frame_decoder.hpp"
#include "refquery/gradcheck.hpp"
#include "refquery/model.hpp"

using namespace refquery;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.channels = 8;
  cfg.heads = 2;
  cfg.enc_layers = 1;
  cfg.frame_layers = 2;
  cfg.video_layers = 1;
  cfg.frame_queries = 4;
  cfg.video_queries = 4;
  cfg.fusion = FusionMode::Dense;
  cfg.scale_channels = {6, 6};
  cfg.text_channels = 6;
  return cfg;
}

// Hand-built fused features, bypassing the encoder.
FusedFeatures<float> make_fused(std::uint64_t seed, int frames, int c) {
  Rng rng(seed);
  FusedFeatures<float> f;
  f.shapes = {{3, 3}, {2, 2}};
  f.visual.resize(frames);
  for (int t = 0; t < frames; ++t) {
    for (const auto& s : f.shapes) {
      Tensor<float> m = Tensor<float>::zeros({s.h * s.w, c});
      for (auto& v : m.raw()) v = rng.uniform(-1, 1);
      f.visual[t].push_back(m);
    }
  }
  f.text = Tensor<float>::zeros({3, c});
  for (auto& v : f.text.raw()) v = rng.uniform(-1, 1);
  f.sentence = Tensor<float>::zeros({1, c});
  for (auto& v : f.sentence.raw()) v = rng.uniform(-1, 1);
  return f;
}

}  // namespace

TEST_CASE("frame query initialization") {
  ModelConfig cfg = tiny_config();
  Model<float> model(cfg, 7);

  SUBCASE("zero sentence feature gives the positional embeddings alone") {
    auto q = init_frame_queries(Tensor<float>::zeros({1, cfg.channels}), model.params);
    const auto& pos = model.params.get("fq.pos");
    CHECK(q.shape() == Shape{cfg.frame_queries, cfg.channels});
    CHECK(std::memcmp(q.value().data(), pos.value().data(), pos.value().size() * 4) == 0);
  }

  SUBCASE("identical text features give identical initial queries") {
    auto f1 = make_fused(3, 1, cfg.channels);
    auto q1 = init_frame_queries(f1.sentence, model.params);
    auto q2 = init_frame_queries(f1.sentence, model.params);
    CHECK(std::memcmp(q1.value().data(), q2.value().data(), q1.value().size() * 4) == 0);
  }

  SUBCASE("shape contract") {
    ModelConfig big = cfg;
    big.frame_queries = big.video_queries = 20;
    big.channels = 64;
    big.heads = 4;
    Model<float> m2(big, 1);
    auto q = init_frame_queries(Tensor<float>::zeros({1, 64}), m2.params);
    CHECK(q.shape() == Shape{20, 64});
  }
}

TEST_CASE("decode_frames shape and T=1 degeneracy") {
  ModelConfig cfg = tiny_config();
  Model<float> model(cfg, 9);
  auto fused = make_fused(5, 1, cfg.channels);
  auto qf = decode_frames(fused, model.params, cfg);
  REQUIRE(qf.size() == 1);
  CHECK(qf[0].shape() == Shape{cfg.frame_queries, cfg.channels});
}

TEST_CASE("permuting image token order leaves frame queries unchanged") {
  ModelConfig cfg = tiny_config();
  Model<float> model(cfg, 11);
  auto fused = make_fused(7, 1, cfg.channels);
  auto q1 = decode_frames(fused, model.params, cfg)[0];

  // permute rows inside each scale (keys and values move together)
  auto permuted = fused;
  permuted.visual[0][0] = gather_rows(fused.visual[0][0], {8, 2, 5, 0, 7, 1, 4, 6, 3});
  permuted.visual[0][1] = gather_rows(fused.visual[0][1], {3, 1, 0, 2});
  auto q2 = decode_frames(permuted, model.params, cfg)[0];
  for (std::int64_t i = 0; i < q1.size(); ++i)
    CHECK(std::abs(q1.value()[i] - q2.value()[i]) <= 1e-6);
}

TEST_CASE("frames are decoded independently (bitwise)") {
  ModelConfig cfg = tiny_config();
  Model<float> model(cfg, 13);
  auto fused = make_fused(9, 3, cfg.channels);
  auto base = decode_frames(fused, model.params, cfg);

  // replacing frame 1's features changes only row 1 of the stack
  auto altered = fused;
  Rng rng(99);
  for (auto& t : altered.visual[1]) {
    Tensor<float> fresh = Tensor<float>::zeros(t.shape());
    for (auto& v : fresh.raw()) v = rng.uniform(-1, 1);
    t = fresh;
  }
  auto changed = decode_frames(altered, model.params, cfg);
  CHECK(std::memcmp(base[0].value().data(), changed[0].value().data(), base[0].value().size() * 4) == 0);
  CHECK(std::memcmp(base[2].value().data(), changed[2].value().data(), base[2].value().size() * 4) == 0);
  CHECK(std::memcmp(base[1].value().data(), changed[1].value().data(), base[1].value().size() * 4) != 0);
}

TEST_CASE("duplicated frames decode to bitwise identical queries") {
  ModelConfig cfg = tiny_config();
  Model<float> model(cfg, 17);
  auto fused = make_fused(21, 1, cfg.channels);
  auto dup = fused;
  dup.visual.push_back(fused.visual[0]);
  auto qf = decode_frames(dup, model.params, cfg);
  REQUIRE(qf.size() == 2);
  CHECK(std::memcmp(qf[0].value().data(), qf[1].value().data(), qf[0].value().size() * 4) == 0);
}

TEST_CASE("text injection changes decoded queries") {
  ModelConfig cfg = tiny_config();
  Model<float> model(cfg, 19);
  auto fused = make_fused(25, 1, cfg.channels);
  auto q1 = decode_frames(fused, model.params, cfg)[0];
  auto zeroed = fused;
  zeroed.text = Tensor<float>::zeros(fused.text.shape());
  zeroed.sentence = Tensor<float>::zeros(fused.sentence.shape());
  auto q2 = decode_frames(zeroed, model.params, cfg)[0];
  CHECK(std::memcmp(q1.value().data(), q2.value().data(), q1.value().size() * 4) != 0);
}

TEST_CASE("non-finite intermediates report frame and layer") {
  ModelConfig cfg = tiny_config();
  Model<float> model(cfg, 23);
  auto fused = make_fused(27, 2, cfg.channels);
  fused.visual[1][0].raw()[0] = std::numeric_limits<float>::infinity();
  CHECK_THROWS_WITH_AS(decode_frames(fused, model.params, cfg), doctest::Contains("frame 1"),
                       NumericError);
}

TEST_CASE("gradient through one frame decoder layer") {
  ModelConfig cfg = tiny_config();
  cfg.frame_layers = 1;
  Model<float> model(cfg, 29);
  auto fused = make_fused(31, 1, cfg.channels);
  Rng wr(8);
  Tensor<float> probe = Tensor<float>::zeros({cfg.frame_queries, cfg.channels});
  for (auto& v : probe.raw()) v = wr.uniform(-1, 1);

  std::vector<std::string> names = {"fq.pos", "fq.init.w", "fq0.text.q.w", "fq0.img.v.w",
                                    "fq0.self.o.w", "fq0.ffn.fc1.b"};
  std::vector<Tensor<float>> params;
  for (const auto& n : names) params.push_back(model.params.get(n));
  params.push_back(fused.sentence);
  params.push_back(fused.visual[0][0]);
  auto names_full = names;
  names_full.push_back("sentence");
  names_full.push_back("visual00");
  auto report = finite_diff_check(
      [&](auto& ps) {
        using S = typename std::decay_t<decltype(ps[0])>::value_type;
        auto store = model.params.template cast<S>();
        for (std::size_t i = 0; i < names.size(); ++i) store.replace(names[i], ps[i]);
        FusedFeatures<S> f;
        f.shapes = fused.shapes;
        f.visual.resize(1);
        f.visual[0].push_back(ps[names.size() + 1]);
        f.visual[0].push_back(cast_tensor<float, S>(fused.visual[0][1]));
        f.text = cast_tensor<float, S>(fused.text);
        f.sentence = ps[names.size()];
        auto qf = decode_frames(f, store, cfg);
        return sum_all(mul(qf[0], cast_tensor<float, S>(probe)));
      },
      params, 1e-5, 1e-3, names_full);
  CHECK(report.pass);
}
