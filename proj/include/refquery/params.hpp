#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "refquery/attention.hpp"
#include "refquery/rng.hpp"
#include "refquery/tensor.hpp"

namespace refquery {

// Named learnable tensors in declaration order. Order is part of the
// determinism contract: initialization draws from one RNG stream in this
// order, and the optimizer walks parameters in this order.
template <typename S>
class ParamStore {
 public:
  enum class Init { FanIn, RowEmbed, Zero, One };

  Tensor<S>& declare(const std::string& name, Shape shape, Init init, Rng& rng) {
    if (by_name_.count(name)) throw ConfigError("parameter redeclared: " + name);
    Tensor<S> t = Tensor<S>::zeros(shape);
    switch (init) {
      case Init::Zero:
        break;
      case Init::One:
        std::fill(t.raw().begin(), t.raw().end(), S(1));
        break;
      case Init::FanIn: {
        const int fan_in = shape.empty() ? 1 : shape[0];
        const float b = 1.0f / std::sqrt(static_cast<float>(std::max(1, fan_in)));
        for (auto& v : t.raw()) v = static_cast<S>(rng.uniform(-b, b));
        break;
      }
      case Init::RowEmbed: {
        const int c = shape.empty() ? 1 : shape.back();
        const float b = 1.0f / std::sqrt(static_cast<float>(std::max(1, c)));
        for (auto& v : t.raw()) v = static_cast<S>(rng.uniform(-b, b));
        break;
      }
    }
    order_.push_back(name);
    by_name_.emplace(name, t);
    return by_name_.at(name);
  }

  bool has(const std::string& name) const { return by_name_.count(name) > 0; }

  Tensor<S>& get(const std::string& name) {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }
  const Tensor<S>& get(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }
  Tensor<S>& operator()(const std::string& name) { return get(name); }

  // Swap in an externally owned tensor (gradient checks drive this).
  void replace(const std::string& name, const Tensor<S>& t) {
    auto& cur = get(name);
    if (cur.shape() != t.shape())
      throw ShapeError("parameter " + name + ": shape " + shape_str(t.shape()) +
                       " does not match " + shape_str(cur.shape()));
    cur = t;
  }

  const std::vector<std::string>& names() const { return order_; }

  void set_requires_grad(bool b) {
    for (const auto& n : order_) by_name_.at(n).set_requires_grad(b);
  }

  void zero_grads() {
    for (const auto& n : order_) by_name_.at(n).zero_grad();
  }

  std::int64_t total_size() const {
    std::int64_t s = 0;
    for (const auto& n : order_) s += by_name_.at(n).size();
    return s;
  }

  template <typename T>
  ParamStore<T> cast() const {
    ParamStore<T> out;
    for (const auto& n : order_) {
      out.order_.push_back(n);
      out.by_name_.emplace(n, cast_tensor<S, T>(by_name_.at(n)));
    }
    return out;
  }

  template <typename T>
  friend class ParamStore;

 private:
  std::vector<std::string> order_;
  std::unordered_map<std::string, Tensor<S>> by_name_;
};

// --- declaration/fetch helpers for common blocks ---------------------------

template <typename S>
void declare_linear(ParamStore<S>& ps, const std::string& prefix, int in, int out, Rng& rng) {
  ps.declare(prefix + ".w", {in, out}, ParamStore<S>::Init::FanIn, rng);
  ps.declare(prefix + ".b", {out}, ParamStore<S>::Init::Zero, rng);
}

template <typename S>
Tensor<S> apply_linear(const ParamStore<S>& ps, const std::string& prefix, const Tensor<S>& x) {
  return linear(x, ps.get(prefix + ".w"), ps.get(prefix + ".b"));
}

template <typename S>
void declare_norm(ParamStore<S>& ps, const std::string& prefix, int c, Rng& rng) {
  ps.declare(prefix + ".g", {c}, ParamStore<S>::Init::One, rng);
  ps.declare(prefix + ".b", {c}, ParamStore<S>::Init::Zero, rng);
}

template <typename S>
Tensor<S> apply_norm(const ParamStore<S>& ps, const std::string& prefix, const Tensor<S>& x, double eps) {
  return layer_norm(x, ps.get(prefix + ".g"), ps.get(prefix + ".b"), eps);
}

template <typename S>
void declare_mha(ParamStore<S>& ps, const std::string& prefix, int c, Rng& rng) {
  declare_linear(ps, prefix + ".q", c, c, rng);
  declare_linear(ps, prefix + ".k", c, c, rng);
  declare_linear(ps, prefix + ".v", c, c, rng);
  declare_linear(ps, prefix + ".o", c, c, rng);
}

template <typename S>
MhaParams<S> fetch_mha(const ParamStore<S>& ps, const std::string& prefix) {
  MhaParams<S> p;
  p.wq = ps.get(prefix + ".q.w");
  p.bq = ps.get(prefix + ".q.b");
  p.wk = ps.get(prefix + ".k.w");
  p.bk = ps.get(prefix + ".k.b");
  p.wv = ps.get(prefix + ".v.w");
  p.bv = ps.get(prefix + ".v.b");
  p.wo = ps.get(prefix + ".o.w");
  p.bo = ps.get(prefix + ".o.b");
  return p;
}

template <typename S>
void declare_deform(ParamStore<S>& ps, const std::string& prefix, int c, int heads, int scales,
                    int points, Rng& rng) {
  declare_linear(ps, prefix + ".off", c, heads * scales * points * 2, rng);
  declare_linear(ps, prefix + ".wgt", c, heads * scales * points, rng);
  declare_linear(ps, prefix + ".val", c, c, rng);
  declare_linear(ps, prefix + ".out", c, c, rng);
}

template <typename S>
DeformParams<S> fetch_deform(const ParamStore<S>& ps, const std::string& prefix) {
  DeformParams<S> p;
  p.w_off = ps.get(prefix + ".off.w");
  p.b_off = ps.get(prefix + ".off.b");
  p.w_wgt = ps.get(prefix + ".wgt.w");
  p.b_wgt = ps.get(prefix + ".wgt.b");
  p.w_val = ps.get(prefix + ".val.w");
  p.b_val = ps.get(prefix + ".val.b");
  p.w_out = ps.get(prefix + ".out.w");
  p.b_out = ps.get(prefix + ".out.b");
  return p;
}

// Two-layer feed-forward block with ReLU.
template <typename S>
void declare_ffn(ParamStore<S>& ps, const std::string& prefix, int c, int hidden, Rng& rng) {
  declare_linear(ps, prefix + ".fc1", c, hidden, rng);
  declare_linear(ps, prefix + ".fc2", hidden, c, rng);
}

template <typename S>
Tensor<S> apply_ffn(const ParamStore<S>& ps, const std::string& prefix, const Tensor<S>& x) {
  return apply_linear(ps, prefix + ".fc2", relu(apply_linear(ps, prefix + ".fc1", x)));
}

}  // namespace refquery
