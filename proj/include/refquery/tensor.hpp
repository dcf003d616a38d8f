#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "refquery/errors.hpp"

namespace refquery {

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

template <typename S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatMap = Eigen::Map<MatX<S>>;
template <typename S>
using MatCMap = Eigen::Map<const MatX<S>>;
template <typename S>
using ArrMap = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>;
template <typename S>
using ArrCMap = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;

template <typename S>
struct TensorNode {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // sized on first accumulation during backward
  bool requires_grad = false;
};

// Dense n-d value participating in reverse-mode differentiation. A Tensor is
// a cheap shared handle; the engine instantiates S = float, the gradient
// checker additionally instantiates S = double. Tensors that participate in a
// live tape must not be mutated in place.
template <typename S>
class Tensor {
 public:
  using value_type = S;

  Tensor() = default;

  static Tensor zeros(Shape shape) {
    Tensor t;
    t.node_ = std::make_shared<TensorNode<S>>();
    t.node_->shape = std::move(shape);
    t.node_->value.assign(static_cast<std::size_t>(numel(t.node_->shape)), S(0));
    return t;
  }

  static Tensor full(Shape shape, S v) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.node_->value.begin(), t.node_->value.end(), v);
    return t;
  }

  static Tensor scalar(S v) { return full({1}, v); }

  static Tensor from(Shape shape, std::vector<S> data) {
    if (static_cast<std::int64_t>(data.size()) != numel(shape))
      throw ShapeError("tensor: data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    Tensor t;
    t.node_ = std::make_shared<TensorNode<S>>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(data);
    return t;
  }

  bool valid() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(node_->value.size()); }

  // 2-d view: trailing axis as columns, everything else flattened to rows.
  int cols() const { return node_->shape.empty() ? 1 : node_->shape.back(); }
  int rows() const { return static_cast<int>(size() / std::max(1, cols())); }

  const std::vector<S>& value() const { return node_->value; }
  std::vector<S>& raw() { return node_->value; }
  S item() const { return node_->value.at(0); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    node_->requires_grad = b;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<S>& grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  MatCMap<S> mat() const { return MatCMap<S>(node_->value.data(), rows(), cols()); }
  MatMap<S> mat_mut() { return MatMap<S>(node_->value.data(), rows(), cols()); }

  std::shared_ptr<TensorNode<S>>& node() { return node_; }
  const std::shared_ptr<TensorNode<S>>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode<S>> node_;
};

template <typename From, typename To>
Tensor<To> cast_tensor(const Tensor<From>& t) {
  std::vector<To> d(t.value().begin(), t.value().end());
  return Tensor<To>::from(t.shape(), std::move(d));
}

// Test hook: scales the upstream adjoint of every op with a matching name
// during backward. Used by selfcheck's negative control.
struct FaultInjection {
  std::string op;
  double scale = 1.01;
};
inline FaultInjection& fault_injection() {
  static FaultInjection f;
  return f;
}

namespace detail {
template <typename S>
inline std::vector<S>& grad_buf(const std::shared_ptr<TensorNode<S>>& n) {
  if (n->grad.empty()) n->grad.assign(n->value.size(), S(0));
  return n->grad;
}
}  // namespace detail

// Ordered record of executed operations. Replaying entries in reverse yields
// gradients for every leaf that participated. One tape per optimization step;
// distinct tapes are independent (thread_local active pointer).
template <typename S>
class Tape {
 public:
  class Scope {
   public:
    explicit Scope(Tape& t) : prev_(current_) { current_ = &t; }
    ~Scope() { current_ = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

  static Tape* current() { return current_; }

  void record(const char* op, std::shared_ptr<TensorNode<S>> out, std::function<void()> fn) {
    entries_.push_back(Entry{op, std::move(out), std::move(fn)});
  }

  void backward(const Tensor<S>& loss) {
    if (loss.size() != 1) throw ShapeError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
    detail::grad_buf(loss.node())[0] = S(1);
    const auto& fault = fault_injection();
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (it->out->grad.empty()) continue;  // output never influenced the loss
      if (!fault.op.empty() && fault.op == it->op) {
        for (auto& g : it->out->grad) g *= static_cast<S>(fault.scale);
      }
      it->backward();
    }
  }

  void clear() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }

 private:
  struct Entry {
    const char* op;
    std::shared_ptr<TensorNode<S>> out;
    std::function<void()> backward;
  };
  std::vector<Entry> entries_;
  static thread_local Tape* current_;
};

template <typename S>
thread_local Tape<S>* Tape<S>::current_ = nullptr;

namespace detail {

template <typename S>
inline bool tracing(std::initializer_list<const Tensor<S>*> ins) {
  if (Tape<S>::current() == nullptr) return false;
  for (const Tensor<S>* t : ins) {
    if (t->requires_grad()) return true;
  }
  return false;
}

template <typename S>
inline Tensor<S> make_out(Shape shape, bool req) {
  Tensor<S> t = Tensor<S>::zeros(std::move(shape));
  t.set_requires_grad(req);
  return t;
}

template <typename S>
inline void require_same_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

}  // namespace detail

template <typename S>
void check_finite(const Tensor<S>& t, const std::string& context) {
  for (S v : t.value()) {
    if (!std::isfinite(static_cast<double>(v)))
      throw NumericError("non-finite value in " + context);
  }
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape("add", a, b);
  const bool rec = detail::tracing<S>({&a, &b});
  Tensor<S> out = detail::make_out<S>(a.shape(), rec);
  for (std::int64_t i = 0; i < a.size(); ++i) out.raw()[i] = a.value()[i] + b.value()[i];
  if (rec) {
    auto an = a.node(), bn = b.node(), on = out.node();
    Tape<S>::current()->record("add", on, [an, bn, on] {
      const auto& g = on->grad;
      if (an->requires_grad) {
        auto& ga = detail::grad_buf(an);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bn->requires_grad) {
        auto& gb = detail::grad_buf(bn);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape("sub", a, b);
  const bool rec = detail::tracing<S>({&a, &b});
  Tensor<S> out = detail::make_out<S>(a.shape(), rec);
  for (std::int64_t i = 0; i < a.size(); ++i) out.raw()[i] = a.value()[i] - b.value()[i];
  if (rec) {
    auto an = a.node(), bn = b.node(), on = out.node();
    Tape<S>::current()->record("sub", on, [an, bn, on] {
      const auto& g = on->grad;
      if (an->requires_grad) {
        auto& ga = detail::grad_buf(an);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bn->requires_grad) {
        auto& gb = detail::grad_buf(bn);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape("mul", a, b);
  const bool rec = detail::tracing<S>({&a, &b});
  Tensor<S> out = detail::make_out<S>(a.shape(), rec);
  for (std::int64_t i = 0; i < a.size(); ++i) out.raw()[i] = a.value()[i] * b.value()[i];
  if (rec) {
    auto an = a.node(), bn = b.node(), on = out.node();
    Tape<S>::current()->record("mul", on, [an, bn, on] {
      const auto& g = on->grad;
      if (an->requires_grad) {
        auto& ga = detail::grad_buf(an);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bn->value[i];
      }
      if (bn->requires_grad) {
        auto& gb = detail::grad_buf(bn);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * an->value[i];
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape("div", a, b);
  const bool rec = detail::tracing<S>({&a, &b});
  Tensor<S> out = detail::make_out<S>(a.shape(), rec);
  for (std::int64_t i = 0; i < a.size(); ++i) out.raw()[i] = a.value()[i] / b.value()[i];
  if (rec) {
    auto an = a.node(), bn = b.node(), on = out.node();
    Tape<S>::current()->record("div", on, [an, bn, on] {
      const auto& g = on->grad;
      if (an->requires_grad) {
        auto& ga = detail::grad_buf(an);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bn->value[i];
      }
      if (bn->requires_grad) {
        auto& gb = detail::grad_buf(bn);
        for (std::size_t i = 0; i < g.size(); ++i)
          gb[i] -= g[i] * an->value[i] / (bn->value[i] * bn->value[i]);
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, double c) {
  const bool rec = detail::tracing<S>({&a});
  Tensor<S> out = detail::make_out<S>(a.shape(), rec);
  const S cs = static_cast<S>(c);
  for (std::int64_t i = 0; i < a.size(); ++i) out.raw()[i] = a.value()[i] * cs;
  if (rec) {
    auto an = a.node(), on = out.node();
    Tape<S>::current()->record("scale", on, [an, on, cs] {
      auto& ga = detail::grad_buf(an);
      for (std::size_t i = 0; i < on->grad.size(); ++i) ga[i] += on->grad[i] * cs;
    });
  }
  return out;
}

template <typename S>
Tensor<S> add_const(const Tensor<S>& a, double c) {
  const bool rec = detail::tracing<S>({&a});
  Tensor<S> out = detail::make_out<S>(a.shape(), rec);
  const S cs = static_cast<S>(c);
  for (std::int64_t i = 0; i < a.size(); ++i) out.raw()[i] = a.value()[i] + cs;
  if (rec) {
    auto an = a.node(), on = out.node();
    Tape<S>::current()->record("add_const", on, [an, on] {
      auto& ga = detail::grad_buf(an);
      for (std::size_t i = 0; i < on->grad.size(); ++i) ga[i] += on->grad[i];
    });
  }
  return out;
}

template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
  const bool rec = detail::tracing<S>({&a});
  Tensor<S> out = detail::make_out<S>(a.shape(), rec);
  for (std::int64_t i = 0; i < a.size(); ++i) out.raw()[i] = a.value()[i] > S(0) ? a.value()[i] : S(0);
  if (rec) {
    auto an = a.node(), on = out.node();
    Tape<S>::current()->record("relu", on, [an, on] {
      auto& ga = detail::grad_buf(an);
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        if (an->value[i] > S(0)) ga[i] += on->grad[i];
    });
  }
  return out;
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  const bool rec = detail::tracing<S>({&a});
  Tensor<S> out = detail::make_out<S>(a.shape(), rec);
  for (std::int64_t i = 0; i < a.size(); ++i) {
    const S x = a.value()[i];
    out.raw()[i] = x >= S(0) ? S(1) / (S(1) + std::exp(-x)) : std::exp(x) / (S(1) + std::exp(x));
  }
  if (rec) {
    auto an = a.node(), on = out.node();
    Tape<S>::current()->record("sigmoid", on, [an, on] {
      auto& ga = detail::grad_buf(an);
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        const S y = on->value[i];
        ga[i] += on->grad[i] * y * (S(1) - y);
      }
    });
  }
  return out;
}

// Derivative is unbounded at 0; callers keep arguments away from it (eps).
template <typename S>
Tensor<S> sqrt(const Tensor<S>& a) {
  const bool rec = detail::tracing<S>({&a});
  Tensor<S> out = detail::make_out<S>(a.shape(), rec);
  for (std::int64_t i = 0; i < a.size(); ++i) out.raw()[i] = std::sqrt(a.value()[i]);
  if (rec) {
    auto an = a.node(), on = out.node();
    Tape<S>::current()->record("sqrt", on, [an, on] {
      auto& ga = detail::grad_buf(an);
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        ga[i] += on->grad[i] * S(0.5) / on->value[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> sum_all(const Tensor<S>& a) {
  const bool rec = detail::tracing<S>({&a});
  Tensor<S> out = detail::make_out<S>({1}, rec);
  S acc = S(0);
  for (std::int64_t i = 0; i < a.size(); ++i) acc += a.value()[i];
  out.raw()[0] = acc;
  if (rec) {
    auto an = a.node(), on = out.node();
    Tape<S>::current()->record("sum_all", on, [an, on] {
      auto& ga = detail::grad_buf(an);
      const S g = on->grad[0];
      for (auto& v : ga) v += g;
    });
  }
  return out;
}

template <typename S>
Tensor<S> mean_all(const Tensor<S>& a) {
  const bool rec = detail::tracing<S>({&a});
  Tensor<S> out = detail::make_out<S>({1}, rec);
  S acc = S(0);
  for (std::int64_t i = 0; i < a.size(); ++i) acc += a.value()[i];
  const S inv = S(1) / static_cast<S>(a.size());
  out.raw()[0] = acc * inv;
  if (rec) {
    auto an = a.node(), on = out.node();
    Tape<S>::current()->record("mean_all", on, [an, on, inv] {
      auto& ga = detail::grad_buf(an);
      const S g = on->grad[0] * inv;
      for (auto& v : ga) v += g;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix products (Eigen-backed)
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const bool rec = detail::tracing<S>({&a, &b});
  Tensor<S> out = detail::make_out<S>({m, n}, rec);
  MatMap<S>(out.raw().data(), m, n).noalias() =
      MatCMap<S>(a.value().data(), m, k) * MatCMap<S>(b.value().data(), k, n);
  if (rec) {
    auto an = a.node(), bn = b.node(), on = out.node();
    Tape<S>::current()->record("matmul", on, [an, bn, on, m, k, n] {
      MatCMap<S> g(on->grad.data(), m, n);
      if (an->requires_grad) {
        auto& ga = detail::grad_buf(an);
        MatMap<S>(ga.data(), m, k).noalias() += g * MatCMap<S>(bn->value.data(), k, n).transpose();
      }
      if (bn->requires_grad) {
        auto& gb = detail::grad_buf(bn);
        MatMap<S>(gb.data(), k, n).noalias() += MatCMap<S>(an->value.data(), m, k).transpose() * g;
      }
    });
  }
  return out;
}

// c = a * b^T with a: m x k, b: n x k.
template <typename S>
Tensor<S> matmul_transb(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(1))
    throw ShapeError("matmul_transb: incompatible shapes " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  const bool rec = detail::tracing<S>({&a, &b});
  Tensor<S> out = detail::make_out<S>({m, n}, rec);
  MatMap<S>(out.raw().data(), m, n).noalias() =
      MatCMap<S>(a.value().data(), m, k) * MatCMap<S>(b.value().data(), n, k).transpose();
  if (rec) {
    auto an = a.node(), bn = b.node(), on = out.node();
    Tape<S>::current()->record("matmul_transb", on, [an, bn, on, m, k, n] {
      MatCMap<S> g(on->grad.data(), m, n);
      if (an->requires_grad) {
        auto& ga = detail::grad_buf(an);
        MatMap<S>(ga.data(), m, k).noalias() += g * MatCMap<S>(bn->value.data(), n, k);
      }
      if (bn->requires_grad) {
        auto& gb = detail::grad_buf(bn);
        MatMap<S>(gb.data(), n, k).noalias() += g.transpose() * MatCMap<S>(an->value.data(), m, k);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  if (numel(shape) != a.size())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  const bool rec = detail::tracing<S>({&a});
  Tensor<S> out = detail::make_out<S>(std::move(shape), rec);
  out.raw() = a.value();
  if (rec) {
    auto an = a.node(), on = out.node();
    Tape<S>::current()->record("reshape", on, [an, on] {
      auto& ga = detail::grad_buf(an);
      for (std::size_t i = 0; i < on->grad.size(); ++i) ga[i] += on->grad[i];
    });
  }
  return out;
}

template <typename S>
Tensor<S> slice_cols(const Tensor<S>& a, int c0, int c1) {
  const int r = a.rows(), c = a.cols();
  if (c0 < 0 || c1 > c || c0 >= c1)
    throw ShapeError("slice_cols: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                     ") invalid for " + shape_str(a.shape()));
  const int w = c1 - c0;
  const bool rec = detail::tracing<S>({&a});
  Tensor<S> out = detail::make_out<S>({r, w}, rec);
  for (int i = 0; i < r; ++i)
    std::copy_n(a.value().data() + static_cast<std::size_t>(i) * c + c0, w,
                out.raw().data() + static_cast<std::size_t>(i) * w);
  if (rec) {
    auto an = a.node(), on = out.node();
    Tape<S>::current()->record("slice_cols", on, [an, on, r, c, c0, w] {
      auto& ga = detail::grad_buf(an);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < w; ++j)
          ga[static_cast<std::size_t>(i) * c + c0 + j] += on->grad[static_cast<std::size_t>(i) * w + j];
    });
  }
  return out;
}

template <typename S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: empty input");
  const int r = parts[0].rows();
  int c = 0;
  bool rec = false;
  for (const auto& p : parts) {
    if (p.rows() != r) throw ShapeError("concat_cols: row mismatch");
    c += p.cols();
    if (Tape<S>::current() && p.requires_grad()) rec = true;
  }
  Tensor<S> out = detail::make_out<S>({r, c}, rec);
  int off = 0;
  for (const auto& p : parts) {
    const int w = p.cols();
    for (int i = 0; i < r; ++i)
      std::copy_n(p.value().data() + static_cast<std::size_t>(i) * w, w,
                  out.raw().data() + static_cast<std::size_t>(i) * c + off);
    off += w;
  }
  if (rec) {
    std::vector<std::shared_ptr<TensorNode<S>>> ins;
    for (const auto& p : parts) ins.push_back(p.node());
    auto on = out.node();
    Tape<S>::current()->record("concat_cols", on, [ins, on, r, c] {
      int off2 = 0;
      for (const auto& n : ins) {
        const int w = static_cast<int>(n->value.size()) / r;
        if (n->requires_grad) {
          auto& g = detail::grad_buf(n);
          for (int i = 0; i < r; ++i)
            for (int j = 0; j < w; ++j)
              g[static_cast<std::size_t>(i) * w + j] += on->grad[static_cast<std::size_t>(i) * c + off2 + j];
        }
        off2 += w;
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: empty input");
  const int c = parts[0].cols();
  int r = 0;
  bool rec = false;
  for (const auto& p : parts) {
    if (p.cols() != c) throw ShapeError("concat_rows: column mismatch");
    r += p.rows();
    if (Tape<S>::current() && p.requires_grad()) rec = true;
  }
  Tensor<S> out = detail::make_out<S>({r, c}, rec);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().begin(), p.value().end(), out.raw().begin() + static_cast<std::ptrdiff_t>(off));
    off += p.value().size();
  }
  if (rec) {
    std::vector<std::shared_ptr<TensorNode<S>>> ins;
    for (const auto& p : parts) ins.push_back(p.node());
    auto on = out.node();
    Tape<S>::current()->record("concat_rows", on, [ins, on] {
      std::size_t off2 = 0;
      for (const auto& n : ins) {
        if (n->requires_grad) {
          auto& g = detail::grad_buf(n);
          for (std::size_t i = 0; i < n->value.size(); ++i) g[i] += on->grad[off2 + i];
        }
        off2 += n->value.size();
      }
    });
  }
  return out;
}

// Contiguous row range [r0, r1).
template <typename S>
Tensor<S> slice_rows(const Tensor<S>& a, int r0, int r1) {
  const int r = a.rows(), c = a.cols();
  if (r0 < 0 || r1 > r || r0 >= r1)
    throw ShapeError("slice_rows: range [" + std::to_string(r0) + "," + std::to_string(r1) +
                     ") invalid for " + shape_str(a.shape()));
  const int h = r1 - r0;
  const bool rec = detail::tracing<S>({&a});
  Tensor<S> out = detail::make_out<S>({h, c}, rec);
  std::copy_n(a.value().data() + static_cast<std::size_t>(r0) * c, static_cast<std::size_t>(h) * c,
              out.raw().data());
  if (rec) {
    auto an = a.node(), on = out.node();
    Tape<S>::current()->record("slice_rows", on, [an, on, r0, c] {
      auto& ga = detail::grad_buf(an);
      for (std::size_t i = 0; i < on->grad.size(); ++i) ga[static_cast<std::size_t>(r0) * c + i] += on->grad[i];
    });
  }
  return out;
}

// Row gather; gradient scatter-adds into the source. Indices carry no grad.
template <typename S>
Tensor<S> gather_rows(const Tensor<S>& a, std::vector<int> idx) {
  const int r = a.rows(), c = a.cols();
  for (int i : idx)
    if (i < 0 || i >= r) throw ShapeError("gather_rows: index " + std::to_string(i) + " out of range");
  const bool rec = detail::tracing<S>({&a});
  Tensor<S> out = detail::make_out<S>({static_cast<int>(idx.size()), c}, rec);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(a.value().data() + static_cast<std::size_t>(idx[i]) * c, c, out.raw().data() + i * c);
  if (rec) {
    auto an = a.node(), on = out.node();
    Tape<S>::current()->record("gather_rows", on, [an, on, idx, c] {
      auto& ga = detail::grad_buf(an);
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (int j = 0; j < c; ++j)
          ga[static_cast<std::size_t>(idx[i]) * c + j] += on->grad[i * static_cast<std::size_t>(c) + j];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Broadcasts
// ---------------------------------------------------------------------------

// x: r x c, b: length-c bias row added to every row.
template <typename S>
Tensor<S> add_rowvec(const Tensor<S>& x, const Tensor<S>& b) {
  const int r = x.rows(), c = x.cols();
  if (b.size() != c)
    throw ShapeError("add_rowvec: bias " + shape_str(b.shape()) + " vs columns " + std::to_string(c));
  const bool rec = detail::tracing<S>({&x, &b});
  Tensor<S> out = detail::make_out<S>(x.shape(), rec);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out.raw()[static_cast<std::size_t>(i) * c + j] = x.value()[static_cast<std::size_t>(i) * c + j] + b.value()[static_cast<std::size_t>(j)];
  if (rec) {
    auto xn = x.node(), bn = b.node(), on = out.node();
    Tape<S>::current()->record("add_rowvec", on, [xn, bn, on, r, c] {
      if (xn->requires_grad) {
        auto& gx = detail::grad_buf(xn);
        for (std::size_t i = 0; i < on->grad.size(); ++i) gx[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        auto& gb = detail::grad_buf(bn);
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) gb[static_cast<std::size_t>(j)] += on->grad[static_cast<std::size_t>(i) * c + j];
      }
    });
  }
  return out;
}

// v: length-n column replicated m times -> n x m.
template <typename S>
Tensor<S> broadcast_cols(const Tensor<S>& v, int m) {
  const int n = static_cast<int>(v.size());
  const bool rec = detail::tracing<S>({&v});
  Tensor<S> out = detail::make_out<S>({n, m}, rec);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) out.raw()[static_cast<std::size_t>(i) * m + j] = v.value()[static_cast<std::size_t>(i)];
  if (rec) {
    auto vn = v.node(), on = out.node();
    Tape<S>::current()->record("broadcast_cols", on, [vn, on, n, m] {
      auto& gv = detail::grad_buf(vn);
      for (int i = 0; i < n; ++i) {
        S acc = S(0);
        for (int j = 0; j < m; ++j) acc += on->grad[static_cast<std::size_t>(i) * m + j];
        gv[static_cast<std::size_t>(i)] += acc;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalizations
// ---------------------------------------------------------------------------

// Numerically stable softmax along `axis` (max subtraction).
template <typename S>
Tensor<S> softmax(const Tensor<S>& x, int axis) {
  if (axis < 0 || axis >= x.ndim())
    throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_str(x.shape()));
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  const std::int64_t n = x.dim(axis);
  for (int i = axis + 1; i < x.ndim(); ++i) inner *= x.dim(i);
  const bool rec = detail::tracing<S>({&x});
  Tensor<S> out = detail::make_out<S>(x.shape(), rec);
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * n * inner + in;
      S mx = x.value()[static_cast<std::size_t>(base)];
      for (std::int64_t i = 1; i < n; ++i) mx = std::max(mx, x.value()[static_cast<std::size_t>(base + i * inner)]);
      S denom = S(0);
      for (std::int64_t i = 0; i < n; ++i) {
        const S e = std::exp(x.value()[static_cast<std::size_t>(base + i * inner)] - mx);
        out.raw()[static_cast<std::size_t>(base + i * inner)] = e;
        denom += e;
      }
      const S inv = S(1) / denom;
      for (std::int64_t i = 0; i < n; ++i) out.raw()[static_cast<std::size_t>(base + i * inner)] *= inv;
    }
  }
  if (rec) {
    auto xn = x.node(), on = out.node();
    Tape<S>::current()->record("softmax", on, [xn, on, outer, n, inner] {
      auto& gx = detail::grad_buf(xn);
      for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
          const std::int64_t base = o * n * inner + in;
          S dot = S(0);
          for (std::int64_t i = 0; i < n; ++i) {
            const std::size_t k = static_cast<std::size_t>(base + i * inner);
            dot += on->grad[k] * on->value[k];
          }
          for (std::int64_t i = 0; i < n; ++i) {
            const std::size_t k = static_cast<std::size_t>(base + i * inner);
            gx[k] += on->value[k] * (on->grad[k] - dot);
          }
        }
      }
    });
  }
  return out;
}

// Layer norm over the trailing axis with affine gain/bias (length = cols).
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias, double eps) {
  const int r = x.rows(), c = x.cols();
  if (eps <= 0) throw ConfigError("layer_norm: eps must be > 0");
  if (gain.size() != c || bias.size() != c)
    throw ShapeError("layer_norm: gain/bias length must equal trailing axis " + std::to_string(c));
  const bool rec = detail::tracing<S>({&x, &gain, &bias});
  Tensor<S> out = detail::make_out<S>(x.shape(), rec);
  std::vector<S> xhat(static_cast<std::size_t>(x.size()));
  std::vector<S> inv_std(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    const S* row = x.value().data() + static_cast<std::size_t>(i) * c;
    S mean = S(0);
    for (int j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<S>(c);
    S var = S(0);
    for (int j = 0; j < c; ++j) {
      const S d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<S>(c);
    const S is = S(1) / std::sqrt(var + static_cast<S>(eps));
    inv_std[static_cast<std::size_t>(i)] = is;
    for (int j = 0; j < c; ++j) {
      const S xh = (row[j] - mean) * is;
      xhat[static_cast<std::size_t>(i) * c + j] = xh;
      out.raw()[static_cast<std::size_t>(i) * c + j] = xh * gain.value()[static_cast<std::size_t>(j)] + bias.value()[static_cast<std::size_t>(j)];
    }
  }
  if (rec) {
    auto xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node();
    Tape<S>::current()->record("layer_norm", on, [xn, gn, bn, on, xhat, inv_std, r, c] {
      for (int i = 0; i < r; ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * c;
        S mean_dxh = S(0), mean_dxh_xh = S(0);
        for (int j = 0; j < c; ++j) {
          const S dxh = on->grad[base + j] * gn->value[static_cast<std::size_t>(j)];
          mean_dxh += dxh;
          mean_dxh_xh += dxh * xhat[base + j];
        }
        mean_dxh /= static_cast<S>(c);
        mean_dxh_xh /= static_cast<S>(c);
        if (xn->requires_grad) {
          auto& gx = detail::grad_buf(xn);
          for (int j = 0; j < c; ++j) {
            const S dxh = on->grad[base + j] * gn->value[static_cast<std::size_t>(j)];
            gx[base + j] += (dxh - mean_dxh - xhat[base + j] * mean_dxh_xh) * inv_std[static_cast<std::size_t>(i)];
          }
        }
        if (gn->requires_grad) {
          auto& gg = detail::grad_buf(gn);
          for (int j = 0; j < c; ++j) gg[static_cast<std::size_t>(j)] += on->grad[base + j] * xhat[base + j];
        }
        if (bn->requires_grad) {
          auto& gb = detail::grad_buf(bn);
          for (int j = 0; j < c; ++j) gb[static_cast<std::size_t>(j)] += on->grad[base + j];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses and resampling
// ---------------------------------------------------------------------------

// Mean binary cross-entropy on logits; stable form. No gradient to targets.
template <typename S>
Tensor<S> bce_with_logits_mean(const Tensor<S>& logits, const Tensor<S>& targets) {
  detail::require_same_shape("bce_with_logits_mean", logits, targets);
  const bool rec = detail::tracing<S>({&logits});
  Tensor<S> out = detail::make_out<S>({1}, rec);
  S acc = S(0);
  for (std::int64_t i = 0; i < logits.size(); ++i) {
    const S x = logits.value()[i], t = targets.value()[i];
    acc += std::max(x, S(0)) - x * t + std::log1p(std::exp(-std::abs(x)));
  }
  const S inv = S(1) / static_cast<S>(logits.size());
  out.raw()[0] = acc * inv;
  if (rec) {
    auto ln = logits.node(), tn = targets.node(), on = out.node();
    Tape<S>::current()->record("bce_with_logits", on, [ln, tn, on, inv] {
      auto& gl = detail::grad_buf(ln);
      const S g = on->grad[0] * inv;
      for (std::size_t i = 0; i < gl.size(); ++i) {
        const S x = ln->value[i];
        const S sig = x >= S(0) ? S(1) / (S(1) + std::exp(-x)) : std::exp(x) / (S(1) + std::exp(x));
        gl[i] += g * (sig - tn->value[i]);
      }
    });
  }
  return out;
}

// Fixed bilinear resampling table between two grids (half-pixel centers,
// clamped at borders). Shared by the differentiable op, mask binarization
// and the evaluation pipeline so all paths resample identically.
struct BilinearTable {
  int src_h = 0, src_w = 0, dst_h = 0, dst_w = 0;
  std::vector<std::array<int, 4>> idx;     // per output pixel: 4 source indices
  std::vector<std::array<double, 4>> wgt;  // matching corner weights

  static BilinearTable make(int sh, int sw, int dh, int dw) {
    BilinearTable t;
    t.src_h = sh;
    t.src_w = sw;
    t.dst_h = dh;
    t.dst_w = dw;
    t.idx.resize(static_cast<std::size_t>(dh) * dw);
    t.wgt.resize(static_cast<std::size_t>(dh) * dw);
    const double sy = static_cast<double>(sh) / dh;
    const double sx = static_cast<double>(sw) / dw;
    for (int y = 0; y < dh; ++y) {
      for (int x = 0; x < dw; ++x) {
        double fy = (y + 0.5) * sy - 0.5;
        double fx = (x + 0.5) * sx - 0.5;
        fy = std::min(std::max(fy, 0.0), static_cast<double>(sh - 1));
        fx = std::min(std::max(fx, 0.0), static_cast<double>(sw - 1));
        const int y0 = static_cast<int>(std::floor(fy));
        const int x0 = static_cast<int>(std::floor(fx));
        const int y1 = std::min(y0 + 1, sh - 1);
        const int x1 = std::min(x0 + 1, sw - 1);
        const double ly = fy - y0, lx = fx - x0;
        const std::size_t k = static_cast<std::size_t>(y) * dw + x;
        t.idx[k] = {y0 * sw + x0, y0 * sw + x1, y1 * sw + x0, y1 * sw + x1};
        t.wgt[k] = {(1 - ly) * (1 - lx), (1 - ly) * lx, ly * (1 - lx), ly * lx};
      }
    }
    return t;
  }

  // Value-level resample of one row-major src plane.
  template <typename S>
  void apply(const S* src, S* dst) const {
    for (std::size_t k = 0; k < idx.size(); ++k) {
      dst[k] = static_cast<S>(wgt[k][0]) * src[idx[k][0]] + static_cast<S>(wgt[k][1]) * src[idx[k][1]] +
               static_cast<S>(wgt[k][2]) * src[idx[k][2]] + static_cast<S>(wgt[k][3]) * src[idx[k][3]];
    }
  }
};

// x: n x (h*w) planes -> n x (H*W); linear map, adjoint is the scatter.
template <typename S>
Tensor<S> upsample_bilinear(const Tensor<S>& x, int h, int w, int H, int W) {
  if (x.cols() != h * w)
    throw ShapeError("upsample_bilinear: expected " + std::to_string(h * w) + " columns, got " +
                     std::to_string(x.cols()));
  const int n = x.rows();
  const bool rec = detail::tracing<S>({&x});
  Tensor<S> out = detail::make_out<S>({n, H * W}, rec);
  auto table = std::make_shared<BilinearTable>(BilinearTable::make(h, w, H, W));
  for (int i = 0; i < n; ++i)
    table->apply(x.value().data() + static_cast<std::size_t>(i) * h * w,
                 out.raw().data() + static_cast<std::size_t>(i) * H * W);
  if (rec) {
    auto xn = x.node(), on = out.node();
    Tape<S>::current()->record("upsample_bilinear", on, [xn, on, table, n, h, w, H, W] {
      auto& gx = detail::grad_buf(xn);
      for (int i = 0; i < n; ++i) {
        const S* g = on->grad.data() + static_cast<std::size_t>(i) * H * W;
        S* gi = gx.data() + static_cast<std::size_t>(i) * h * w;
        for (std::size_t k = 0; k < table->idx.size(); ++k)
          for (int cnr = 0; cnr < 4; ++cnr)
            gi[table->idx[k][static_cast<std::size_t>(cnr)]] += static_cast<S>(table->wgt[k][static_cast<std::size_t>(cnr)]) * g[k];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Small composites
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  return add_rowvec(matmul(x, w), b);
}

// Scalar cosine similarity of two equal-length vectors (eps-guarded norms).
template <typename S>
Tensor<S> cosine_similarity(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape("cosine_similarity", a, b);
  auto dot = sum_all(mul(a, b));
  auto na = sqrt(add_const(sum_all(mul(a, a)), 1e-12));
  auto nb = sqrt(add_const(sum_all(mul(b, b)), 1e-12));
  return div(dot, mul(na, nb));
}

}  // namespace refquery
