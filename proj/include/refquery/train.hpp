#pragma once

#include <cmath>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "refquery/checkpoint.hpp"
#include "refquery/losses.hpp"

namespace refquery {

struct AdamWState {
  std::vector<std::vector<float>> m, v;  // follows the store's parameter order
  std::int64_t step = 0;
};

// One decoupled-weight-decay adaptive-moment step. Math in double, state and
// parameters in f32; walking parameters in declaration order keeps runs
// bit-reproducible.
inline void adamw_step(ParamStore<float>& ps, AdamWState& st, const LossConfig& lc) {
  const auto& names = ps.names();
  if (st.m.empty()) {
    st.m.resize(names.size());
    st.v.resize(names.size());
    for (std::size_t i = 0; i < names.size(); ++i) {
      st.m[i].assign(static_cast<std::size_t>(ps.get(names[i]).size()), 0.0f);
      st.v[i].assign(static_cast<std::size_t>(ps.get(names[i]).size()), 0.0f);
    }
  }
  st.step += 1;
  const double bc1 = 1.0 - std::pow(lc.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(lc.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < names.size(); ++i) {
    auto& t = ps.get(names[i]);
    const bool has_grad = t.has_grad();
    auto& data = t.raw();
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = has_grad ? static_cast<double>(t.grad()[j]) : 0.0;
      const double m = lc.beta1 * st.m[i][j] + (1.0 - lc.beta1) * g;
      const double v = lc.beta2 * st.v[i][j] + (1.0 - lc.beta2) * g * g;
      st.m[i][j] = static_cast<float>(m);
      st.v[i][j] = static_cast<float>(v);
      const double update = (m / bc1) / (std::sqrt(v / bc2) + 1e-8) + lc.weight_decay * data[j];
      data[j] = static_cast<float>(data[j] - lc.learning_rate * update);
    }
  }
}

// Sorted distinct frame subset, deterministic in (seed, iteration).
inline FeatureClip sample_clip_frames(const FeatureClip& clip, int max_frames, std::uint64_t seed,
                                      std::int64_t iteration) {
  if (clip.frames <= max_frames) return clip;
  Rng rng(Rng::derive(seed, 0xF4A3E5 + static_cast<std::uint64_t>(iteration)));
  std::vector<int> idx(static_cast<std::size_t>(clip.frames));
  for (int i = 0; i < clip.frames; ++i) idx[static_cast<std::size_t>(i)] = i;
  for (int i = 0; i < max_frames; ++i) {
    const int j = i + static_cast<int>(rng.below(static_cast<std::uint32_t>(clip.frames - i)));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  idx.resize(static_cast<std::size_t>(max_frames));
  std::sort(idx.begin(), idx.end());

  FeatureClip out = clip;
  out.frames = max_frames;
  out.visual.clear();
  for (int i : idx) out.visual.push_back(clip.visual[static_cast<std::size_t>(i)]);
  for (std::size_t o = 0; o < out.objects.size(); ++o) {
    out.objects[o].masks.clear();
    for (int i : idx) out.objects[o].masks.push_back(clip.objects[o].masks[static_cast<std::size_t>(i)]);
  }
  return out;
}

struct TrainRecord {
  int iteration = 0;
  LossBreakdown loss;
};

// Deterministic single-threaded loop over the clip list (one clip per
// iteration, round-robin). Aborts with NumericError on a non-finite loss.
inline std::vector<TrainRecord> train_model(Model<float>& model, AdamWState& adam, int start_iteration,
                                            const std::vector<FeatureClip>& clips, const LossConfig& lc,
                                            std::uint64_t seed) {
  if (clips.empty()) throw ValidationError("train: dataset is empty");
  model.params.set_requires_grad(true);
  std::vector<TrainRecord> records;
  records.reserve(static_cast<std::size_t>(lc.iterations));
  for (int it = start_iteration + 1; it <= start_iteration + lc.iterations; ++it) {
    const FeatureClip& full = clips[static_cast<std::size_t>((it - 1) % static_cast<int>(clips.size()))];
    const FeatureClip clip = sample_clip_frames(full, lc.clip_length, seed, it);
    Tape<float> tape;
    LossTerms<float> terms;
    try {
      typename Tape<float>::Scope scope(tape);
      PipelineResult<float> pr = run_pipeline(model.cfg, model.params, clip);
      terms = training_loss(model.cfg, lc, model.params, pr, clip);
      const LossBreakdown b = terms.values(lc.lambda_sim);
      if (!std::isfinite(b.l_train)) {
        std::ostringstream os;
        os << "non-finite loss (L_v=" << b.l_v << " L_f=" << b.l_f << " L_sim=" << b.l_sim << ")";
        throw NumericError(os.str());
      }
      tape.backward(terms.total);
      records.push_back({it, b});
    } catch (const NumericError& e) {
      throw NumericError("iteration " + std::to_string(it) + ": " + e.what());
    } catch (const ValidationError& e) {
      throw NumericError("iteration " + std::to_string(it) + ": " + e.what());
    }
    adamw_step(model.params, adam, lc);
    model.params.zero_grads();
    tape.clear();
  }
  return records;
}

// --- checkpoint round trip ---------------------------------------------------

inline CheckpointData make_checkpoint(const RunConfig& rc, const Model<float>& model,
                                      const AdamWState& adam, int iteration) {
  CheckpointData ckpt;
  nlohmann::json j = to_json(rc);
  j["iteration"] = iteration;
  ckpt.config_json = j.dump();
  const auto& names = model.params.names();
  for (const auto& n : names) ckpt.tensors.emplace_back(n, model.params.get(n));
  for (std::size_t i = 0; i < adam.m.size(); ++i) {
    ckpt.tensors.emplace_back("adam.m." + names[i],
                              Tensor<float>::from({static_cast<int>(adam.m[i].size())}, adam.m[i]));
    ckpt.tensors.emplace_back("adam.v." + names[i],
                              Tensor<float>::from({static_cast<int>(adam.v[i].size())}, adam.v[i]));
  }
  ckpt.tensors.emplace_back("adam.step", Tensor<float>::from({1}, {static_cast<float>(adam.step)}));
  return ckpt;
}

// Strict load: every model parameter must be present with its exact shape;
// mismatches are reported by tensor name.
inline void load_model_params(const CheckpointData& ckpt, ParamStore<float>& ps) {
  for (const auto& name : ps.names()) {
    const Tensor<float>* found = nullptr;
    for (const auto& [n, t] : ckpt.tensors)
      if (n == name) {
        found = &t;
        break;
      }
    if (!found) throw ValidationError("checkpoint is missing tensor '" + name + "'");
    auto& dst = ps.get(name);
    if (found->shape() != dst.shape())
      throw ValidationError("checkpoint tensor '" + name + "' has shape " + shape_str(found->shape()) +
                            ", model expects " + shape_str(dst.shape()));
    dst.raw() = found->value();
  }
}

inline void load_adam_state(const CheckpointData& ckpt, const ParamStore<float>& ps, AdamWState& adam) {
  const auto& names = ps.names();
  adam.m.assign(names.size(), {});
  adam.v.assign(names.size(), {});
  auto find = [&](const std::string& n) -> const Tensor<float>* {
    for (const auto& [name, t] : ckpt.tensors)
      if (name == n) return &t;
    return nullptr;
  };
  for (std::size_t i = 0; i < names.size(); ++i) {
    const Tensor<float>* m = find("adam.m." + names[i]);
    const Tensor<float>* v = find("adam.v." + names[i]);
    if (!m || !v) throw ValidationError("checkpoint is missing optimizer state for '" + names[i] + "'");
    adam.m[i] = m->value();
    adam.v[i] = v->value();
  }
  const Tensor<float>* step = find("adam.step");
  if (!step) throw ValidationError("checkpoint is missing optimizer state 'adam.step'");
  adam.step = static_cast<std::int64_t>(step->value()[0]);
}

inline std::string format_loss_csv(const std::vector<TrainRecord>& records, bool header = true) {
  std::ostringstream os;
  os << std::setprecision(9);
  if (header) os << "iteration,L_v,L_f,L_sim,L_train\n";
  for (const auto& r : records)
    os << r.iteration << "," << r.loss.l_v << "," << r.loss.l_f << "," << r.loss.l_sim << ","
       << r.loss.l_train << "\n";
  return os.str();
}

}  // namespace refquery
