#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dpnav/rng.hpp"

namespace dpnav {

using Shape = std::vector<int>;

struct TensorError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d <= 0) throw TensorError("tensor shape extents must be positive");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

namespace detail {
struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // same length as value when requires_grad
  bool requires_grad = false;
};
}  // namespace detail

// Dense row-major 64-bit tensor. Copying a Tensor copies a handle; the
// underlying buffer is shared. Values are immutable by convention once an op
// has produced them; grad buffers are the only thing mutated afterwards.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
      : node_(std::make_shared<detail::TensorNode>()) {
    node_->shape = std::move(shape);
    node_->value.assign(shape_numel(node_->shape), fill);
    set_requires_grad(requires_grad);
  }

  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false) {
    Tensor t;
    t.node_ = std::make_shared<detail::TensorNode>();
    if (shape_numel(shape) != data.size())
      throw TensorError("from_data: shape " + shape_str(shape) +
                        " does not match data length " + std::to_string(data.size()));
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(data);
    t.set_requires_grad(requires_grad);
    return t;
  }

  static Tensor scalar(double v) { return from_data({1}, {v}); }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0,
                      bool requires_grad = false) {
    Tensor t(std::move(shape), 0.0, requires_grad);
    for (double& x : t.node_->value) x = rng.gaussian(0.0, stddev);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape.at(static_cast<std::size_t>(i)); }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  std::size_t size() const { return node_->value.size(); }
  bool is_scalar() const { return size() == 1; }

  std::vector<double>& values() { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }
  double* data() { return node_->value.data(); }
  const double* data() const { return node_->value.data(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool b) {
    node_->requires_grad = b;
    if (b)
      node_->grad.assign(node_->value.size(), 0.0);
    else
      node_->grad.clear();
  }

  std::vector<double>& grad() {
    if (!node_->requires_grad) throw TensorError("tensor does not track gradients");
    return node_->grad;
  }
  const std::vector<double>& grad() const {
    if (!node_->requires_grad) throw TensorError("tensor does not track gradients");
    return node_->grad;
  }
  void zero_grad() {
    if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  bool same_buffer(const Tensor& o) const { return node_ == o.node_; }

 private:
  std::shared_ptr<detail::TensorNode> node_;
};

inline void check_finite(const Tensor& t, const char* op) {
  for (double v : t.values())
    if (!std::isfinite(v))
      throw TensorError(std::string(op) + ": non-finite value in output");
}

// Ordered record of executed ops. Recording order is a topological order of
// the define-by-run graph, so backward simply replays the record in reverse.
// A tape may be consumed by backward() exactly once; build a fresh tape for
// the next forward pass.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }
  std::size_t size() const { return ops_.size(); }

  void record(std::function<void()> backward_fn) {
    ops_.push_back(std::move(backward_fn));
  }

  void backward(Tensor loss) {
    if (!recording_) throw TensorError("backward on a non-recording tape");
    if (consumed_) throw TensorError("backward already run on this tape; re-record first");
    if (ops_.empty()) throw TensorError("backward on an empty tape");
    if (!loss.is_scalar()) throw TensorError("backward requires a scalar loss");
    if (!loss.requires_grad()) throw TensorError("loss does not require grad");
    loss.grad()[0] = 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    consumed_ = true;
  }

 private:
  std::vector<std::function<void()>> ops_;
  bool recording_;
  bool consumed_ = false;
};

namespace detail {

inline bool track(const Tape& tape, std::initializer_list<const Tensor*> inputs) {
  if (!tape.recording()) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise and scalar ops

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw TensorError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  check_finite(out, "add");
  if (detail::track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor ac = a, bc = b, oc = out;
    tape.record([ac, bc, oc]() mutable {
      const auto& g = oc.grad();
      if (ac.requires_grad())
        for (std::size_t i = 0; i < g.size(); ++i) ac.grad()[i] += g[i];
      if (bc.requires_grad())
        for (std::size_t i = 0; i < g.size(); ++i) bc.grad()[i] += g[i];
    });
  }
  return out;
}

inline Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw TensorError("sub: shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
  check_finite(out, "sub");
  if (detail::track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor ac = a, bc = b, oc = out;
    tape.record([ac, bc, oc]() mutable {
      const auto& g = oc.grad();
      if (ac.requires_grad())
        for (std::size_t i = 0; i < g.size(); ++i) ac.grad()[i] += g[i];
      if (bc.requires_grad())
        for (std::size_t i = 0; i < g.size(); ++i) bc.grad()[i] -= g[i];
    });
  }
  return out;
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw TensorError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  check_finite(out, "mul");
  if (detail::track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor ac = a, bc = b, oc = out;
    tape.record([ac, bc, oc]() mutable {
      const auto& g = oc.grad();
      if (ac.requires_grad())
        for (std::size_t i = 0; i < g.size(); ++i) ac.grad()[i] += g[i] * bc.data()[i];
      if (bc.requires_grad())
        for (std::size_t i = 0; i < g.size(); ++i) bc.grad()[i] += g[i] * ac.data()[i];
    });
  }
  return out;
}

inline Tensor scale(Tape& tape, const Tensor& a, double s) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * s;
  check_finite(out, "scale");
  if (detail::track(tape, {&a})) {
    out.set_requires_grad(true);
    Tensor ac = a, oc = out;
    tape.record([ac, oc, s]() mutable {
      const auto& g = oc.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ac.grad()[i] += g[i] * s;
    });
  }
  return out;
}

inline Tensor abs(Tape& tape, const Tensor& a) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = std::fabs(a.data()[i]);
  check_finite(out, "abs");
  if (detail::track(tape, {&a})) {
    out.set_requires_grad(true);
    Tensor ac = a, oc = out;
    tape.record([ac, oc]() mutable {
      const auto& g = oc.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        double x = ac.data()[i];
        double sgn = (x > 0.0) - (x < 0.0);
        ac.grad()[i] += g[i] * sgn;
      }
    });
  }
  return out;
}

inline Tensor gelu(Tape& tape, const Tensor& a) {
  static constexpr double inv_sqrt2 = 0.70710678118654752440;
  static constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) {
    double x = a.data()[i];
    out.data()[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
  }
  check_finite(out, "gelu");
  if (detail::track(tape, {&a})) {
    out.set_requires_grad(true);
    Tensor ac = a, oc = out;
    tape.record([ac, oc]() mutable {
      const auto& g = oc.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        double x = ac.data()[i];
        double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
        ac.grad()[i] += g[i] * (cdf + x * pdf);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions and reshaping

inline Tensor sum(Tape& tape, const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  Tensor out = Tensor::scalar(s);
  check_finite(out, "sum");
  if (detail::track(tape, {&a})) {
    out.set_requires_grad(true);
    Tensor ac = a, oc = out;
    tape.record([ac, oc]() mutable {
      double g = oc.grad()[0];
      for (double& d : ac.grad()) d += g;
    });
  }
  return out;
}

inline Tensor reshape(Tape& tape, const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size())
    throw TensorError("reshape: element count mismatch");
  Tensor out = Tensor::from_data(std::move(shape), a.values());
  if (detail::track(tape, {&a})) {
    out.set_requires_grad(true);
    Tensor ac = a, oc = out;
    tape.record([ac, oc]() mutable {
      const auto& g = oc.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ac.grad()[i] += g[i];
    });
  }
  return out;
}

namespace detail {

inline std::vector<std::size_t> row_major_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
    st[i] = st[i + 1] * static_cast<std::size_t>(s[i + 1]);
  return st;
}

// out[idx] = in[perm applied to idx]; writing the index map once and reusing
// it in backward keeps forward and reverse transfers exactly inverse.
inline std::vector<std::size_t> permute_index_map(const Shape& in_shape,
                                                  const std::vector<int>& axes) {
  Shape out_shape(axes.size());
  for (std::size_t i = 0; i < axes.size(); ++i)
    out_shape[i] = in_shape[static_cast<std::size_t>(axes[i])];
  auto in_st = row_major_strides(in_shape);
  auto out_st = row_major_strides(out_shape);
  std::size_t n = shape_numel(in_shape);
  std::vector<std::size_t> map(n);
  std::vector<int> idx(out_shape.size(), 0);
  for (std::size_t o = 0; o < n; ++o) {
    std::size_t rem = o, src = 0;
    for (std::size_t d = 0; d < out_shape.size(); ++d) {
      std::size_t c = rem / out_st[d];
      rem %= out_st[d];
      src += c * in_st[static_cast<std::size_t>(axes[d])];
    }
    map[o] = src;
  }
  (void)idx;
  return map;
}

}  // namespace detail

inline Tensor permute(Tape& tape, const Tensor& a, const std::vector<int>& axes) {
  if (static_cast<int>(axes.size()) != a.ndim())
    throw TensorError("permute: axes rank mismatch");
  std::vector<bool> seen(axes.size(), false);
  for (int ax : axes) {
    if (ax < 0 || ax >= a.ndim() || seen[static_cast<std::size_t>(ax)])
      throw TensorError("permute: invalid axis list");
    seen[static_cast<std::size_t>(ax)] = true;
  }
  Shape out_shape(axes.size());
  for (std::size_t i = 0; i < axes.size(); ++i)
    out_shape[i] = a.dim(axes[i]);
  auto map = detail::permute_index_map(a.shape(), axes);
  Tensor out(out_shape);
  for (std::size_t o = 0; o < map.size(); ++o) out.data()[o] = a.data()[map[o]];
  if (detail::track(tape, {&a})) {
    out.set_requires_grad(true);
    Tensor ac = a, oc = out;
    auto m = std::make_shared<std::vector<std::size_t>>(std::move(map));
    tape.record([ac, oc, m]() mutable {
      const auto& g = oc.grad();
      for (std::size_t o = 0; o < g.size(); ++o) ac.grad()[(*m)[o]] += g[o];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// linear algebra

// Batched matrix product: [.., m, k] x [.., k, n] -> [.., m, n]. Leading
// dimensions must match exactly; no implicit broadcasting.
inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.ndim() < 2 || b.ndim() < 2 || a.ndim() != b.ndim())
    throw TensorError("matmul: operands must have equal rank >= 2");
  int nd = a.ndim();
  for (int i = 0; i < nd - 2; ++i)
    if (a.dim(i) != b.dim(i)) throw TensorError("matmul: leading dims mismatch");
  int m = a.dim(nd - 2), k = a.dim(nd - 1);
  int kb = b.dim(nd - 2), n = b.dim(nd - 1);
  if (k != kb)
    throw TensorError("matmul: inner dims mismatch " + shape_str(a.shape()) +
                      " x " + shape_str(b.shape()));
  std::size_t batch = 1;
  for (int i = 0; i < nd - 2; ++i) batch *= static_cast<std::size_t>(a.dim(i));
  Shape out_shape(a.shape());
  out_shape[static_cast<std::size_t>(nd - 1)] = n;
  out_shape[static_cast<std::size_t>(nd - 2)] = m;
  Tensor out(out_shape);

  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  const std::size_t sa = static_cast<std::size_t>(m) * k;
  const std::size_t sb = static_cast<std::size_t>(k) * n;
  const std::size_t so = static_cast<std::size_t>(m) * n;
  for (std::size_t bt = 0; bt < batch; ++bt) {
    const double* A = pa + bt * sa;
    const double* B = pb + bt * sb;
    double* O = po + bt * so;
    for (int i = 0; i < m; ++i) {
      double* orow = O + static_cast<std::size_t>(i) * n;
      for (int kk = 0; kk < k; ++kk) {
        double av = A[static_cast<std::size_t>(i) * k + kk];
        if (av == 0.0) continue;
        const double* brow = B + static_cast<std::size_t>(kk) * n;
        for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
    }
  }
  check_finite(out, "matmul");

  if (detail::track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor ac = a, bc = b, oc = out;
    tape.record([ac, bc, oc, batch, m, k, n, sa, sb, so]() mutable {
      const double* g = oc.grad().data();
      const double* A = ac.data();
      const double* B = bc.data();
      for (std::size_t bt = 0; bt < batch; ++bt) {
        const double* G = g + bt * so;
        const double* Ab = A + bt * sa;
        const double* Bb = B + bt * sb;
        if (ac.requires_grad()) {
          double* dA = ac.grad().data() + bt * sa;
          // dA = G * B^T
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
              double gv = G[static_cast<std::size_t>(i) * n + j];
              if (gv == 0.0) continue;
              const double* brow = Bb;
              for (int kk = 0; kk < k; ++kk)
                dA[static_cast<std::size_t>(i) * k + kk] +=
                    gv * brow[static_cast<std::size_t>(kk) * n + j];
            }
        }
        if (bc.requires_grad()) {
          double* dB = bc.grad().data() + bt * sb;
          // dB = A^T * G
          for (int kk = 0; kk < k; ++kk)
            for (int i = 0; i < m; ++i) {
              double av = Ab[static_cast<std::size_t>(i) * k + kk];
              if (av == 0.0) continue;
              const double* grow = G + static_cast<std::size_t>(i) * n;
              double* drow = dB + static_cast<std::size_t>(kk) * n;
              for (int j = 0; j < n; ++j) drow[j] += av * grow[j];
            }
        }
      }
    });
  }
  return out;
}

// x[.., in] -> [.., out] with weight [out, in] and bias [out].
inline Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.ndim() != 2 || b.ndim() != 1)
    throw TensorError("linear: weight must be 2-D and bias 1-D");
  int in = x.dim(x.ndim() - 1);
  if (w.dim(1) != in || b.dim(0) != w.dim(0))
    throw TensorError("linear: dimension mismatch");
  int out_f = w.dim(0);
  std::size_t rows = x.size() / static_cast<std::size_t>(in);
  Shape out_shape = x.shape();
  out_shape.back() = out_f;
  Tensor out(out_shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * static_cast<std::size_t>(in);
    double* orow = out.data() + r * static_cast<std::size_t>(out_f);
    for (int o = 0; o < out_f; ++o) {
      const double* wr = w.data() + static_cast<std::size_t>(o) * in;
      double acc = b.data()[o];
      for (int i = 0; i < in; ++i) acc += xr[i] * wr[i];
      orow[o] = acc;
    }
  }
  check_finite(out, "linear");
  if (detail::track(tape, {&x, &w, &b})) {
    out.set_requires_grad(true);
    Tensor xc = x, wc = w, bc = b, oc = out;
    tape.record([xc, wc, bc, oc, rows, in, out_f]() mutable {
      const double* g = oc.grad().data();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* grow = g + r * static_cast<std::size_t>(out_f);
        const double* xr = xc.data() + r * static_cast<std::size_t>(in);
        for (int o = 0; o < out_f; ++o) {
          double gv = grow[o];
          if (gv == 0.0) continue;
          if (xc.requires_grad()) {
            const double* wr = wc.data() + static_cast<std::size_t>(o) * in;
            double* dx = xc.grad().data() + r * static_cast<std::size_t>(in);
            for (int i = 0; i < in; ++i) dx[i] += gv * wr[i];
          }
          if (wc.requires_grad()) {
            double* dw = wc.grad().data() + static_cast<std::size_t>(o) * in;
            for (int i = 0; i < in; ++i) dw[i] += gv * xr[i];
          }
          if (bc.requires_grad()) bc.grad()[static_cast<std::size_t>(o)] += gv;
        }
      }
    });
  }
  return out;
}

// Adds a constant (non-trainable) tensor whose shape equals x's shape with
// the leading dimension dropped; used for positional encodings.
inline Tensor add_broadcast0(Tape& tape, const Tensor& x, const Tensor& c) {
  if (x.ndim() < 2) throw TensorError("add_broadcast0: rank must be >= 2");
  Shape tail(x.shape().begin() + 1, x.shape().end());
  if (c.shape() != tail)
    throw TensorError("add_broadcast0: trailing shape mismatch");
  Tensor out(x.shape());
  std::size_t inner = c.size();
  std::size_t b = x.size() / inner;
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < inner; ++j)
      out.data()[i * inner + j] = x.data()[i * inner + j] + c.data()[j];
  check_finite(out, "add_broadcast0");
  if (detail::track(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    tape.record([xc, oc]() mutable {
      const auto& g = oc.grad();
      for (std::size_t i = 0; i < g.size(); ++i) xc.grad()[i] += g[i];
    });
  }
  return out;
}

// [B, C, ...] + [C]
inline Tensor add_channel_bias(Tape& tape, const Tensor& x, const Tensor& b) {
  if (x.ndim() < 2 || b.ndim() != 1 || x.dim(1) != b.dim(0))
    throw TensorError("add_channel_bias: shape mismatch");
  int C = x.dim(1);
  std::size_t inner = 1;
  for (int i = 2; i < x.ndim(); ++i) inner *= static_cast<std::size_t>(x.dim(i));
  std::size_t B = static_cast<std::size_t>(x.dim(0));
  Tensor out(x.shape());
  for (std::size_t bi = 0; bi < B; ++bi)
    for (int c = 0; c < C; ++c) {
      double bias = b.data()[c];
      std::size_t base = (bi * C + static_cast<std::size_t>(c)) * inner;
      for (std::size_t j = 0; j < inner; ++j)
        out.data()[base + j] = x.data()[base + j] + bias;
    }
  check_finite(out, "add_channel_bias");
  if (detail::track(tape, {&x, &b})) {
    out.set_requires_grad(true);
    Tensor xc = x, bc = b, oc = out;
    tape.record([xc, bc, oc, B, C, inner]() mutable {
      const auto& g = oc.grad();
      if (xc.requires_grad())
        for (std::size_t i = 0; i < g.size(); ++i) xc.grad()[i] += g[i];
      if (bc.requires_grad())
        for (std::size_t bi = 0; bi < B; ++bi)
          for (int c = 0; c < C; ++c) {
            std::size_t base = (bi * static_cast<std::size_t>(C) + c) * inner;
            double acc = 0.0;
            for (std::size_t j = 0; j < inner; ++j) acc += g[base + j];
            bc.grad()[static_cast<std::size_t>(c)] += acc;
          }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// convolution

// Cross-correlation over [B, Cin, L] with weight [Cout, Cin/groups, K] and
// bias [Cout]. Lout = floor((L + 2*padding - K)/stride) + 1 and must be >= 1.
inline Tensor conv1d(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b,
                     int stride, int padding, int groups) {
  if (x.ndim() != 3 || w.ndim() != 3 || b.ndim() != 1)
    throw TensorError("conv1d: expected input [B,Cin,L], weight [Cout,Cin/g,K], bias [Cout]");
  if (stride < 1 || padding < 0 || groups < 1) throw TensorError("conv1d: bad hyperparameters");
  int B = x.dim(0), Cin = x.dim(1), L = x.dim(2);
  int Cout = w.dim(0), Cin_g = w.dim(1), K = w.dim(2);
  if (Cin % groups != 0 || Cout % groups != 0)
    throw TensorError("conv1d: channel counts not divisible by groups");
  if (Cin / groups != Cin_g)
    throw TensorError("conv1d: weight channel dim does not match Cin/groups");
  if (b.dim(0) != Cout) throw TensorError("conv1d: bias length mismatch");
  int Lout = (L + 2 * padding - K) / stride + 1;
  if (L + 2 * padding < K || Lout < 1)
    throw TensorError("conv1d: non-positive output length");

  int Cout_g = Cout / groups;
  Tensor out({B, Cout, Lout});
  for (int bi = 0; bi < B; ++bi)
    for (int co = 0; co < Cout; ++co) {
      int gi = co / Cout_g;
      const double* wbase = w.data() + static_cast<std::size_t>(co) * Cin_g * K;
      double* orow = out.data() + (static_cast<std::size_t>(bi) * Cout + co) * Lout;
      for (int lo = 0; lo < Lout; ++lo) {
        double acc = b.data()[co];
        int start = lo * stride - padding;
        for (int ci = 0; ci < Cin_g; ++ci) {
          const double* xrow =
              x.data() + (static_cast<std::size_t>(bi) * Cin + gi * Cin_g + ci) * L;
          const double* wrow = wbase + static_cast<std::size_t>(ci) * K;
          for (int kk = 0; kk < K; ++kk) {
            int li = start + kk;
            if (li < 0 || li >= L) continue;
            acc += xrow[li] * wrow[kk];
          }
        }
        orow[lo] = acc;
      }
    }
  check_finite(out, "conv1d");

  if (detail::track(tape, {&x, &w, &b})) {
    out.set_requires_grad(true);
    Tensor xc = x, wc = w, bc = b, oc = out;
    tape.record([xc, wc, bc, oc, B, Cin, L, Cout, Cin_g, K, Lout, Cout_g, stride,
                 padding]() mutable {
      const double* g = oc.grad().data();
      for (int bi = 0; bi < B; ++bi)
        for (int co = 0; co < Cout; ++co) {
          int gi = co / Cout_g;
          const double* grow = g + (static_cast<std::size_t>(bi) * Cout + co) * Lout;
          const double* wbase = wc.data() + static_cast<std::size_t>(co) * Cin_g * K;
          for (int lo = 0; lo < Lout; ++lo) {
            double gv = grow[lo];
            if (gv == 0.0) continue;
            int start = lo * stride - padding;
            if (bc.requires_grad()) bc.grad()[static_cast<std::size_t>(co)] += gv;
            for (int ci = 0; ci < Cin_g; ++ci) {
              std::size_t xoff =
                  (static_cast<std::size_t>(bi) * Cin + gi * Cin_g + ci) * L;
              const double* wrow = wbase + static_cast<std::size_t>(ci) * K;
              for (int kk = 0; kk < K; ++kk) {
                int li = start + kk;
                if (li < 0 || li >= L) continue;
                if (xc.requires_grad())
                  xc.grad()[xoff + li] += gv * wrow[kk];
                if (wc.requires_grad())
                  wc.grad()[static_cast<std::size_t>(co) * Cin_g * K +
                            static_cast<std::size_t>(ci) * K + kk] +=
                      gv * xc.data()[xoff + li];
              }
            }
          }
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// normalization and activation over structured axes

inline Tensor softmax_lastdim(Tape& tape, const Tensor& x) {
  if (x.ndim() < 1 || x.dim(x.ndim() - 1) < 1)
    throw TensorError("softmax_lastdim: empty reduction axis");
  int n = x.dim(x.ndim() - 1);
  std::size_t rows = x.size() / static_cast<std::size_t>(n);
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * static_cast<std::size_t>(n);
    double* orow = out.data() + r * static_cast<std::size_t>(n);
    double mx = xr[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, xr[i]);
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
      orow[i] = std::exp(xr[i] - mx);
      s += orow[i];
    }
    for (int i = 0; i < n; ++i) orow[i] /= s;
  }
  check_finite(out, "softmax_lastdim");
  if (detail::track(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    tape.record([xc, oc, rows, n]() mutable {
      const double* g = oc.grad().data();
      const double* y = oc.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* gr = g + r * static_cast<std::size_t>(n);
        const double* yr = y + r * static_cast<std::size_t>(n);
        double dot = 0.0;
        for (int i = 0; i < n; ++i) dot += gr[i] * yr[i];
        double* dx = xc.grad().data() + r * static_cast<std::size_t>(n);
        for (int i = 0; i < n; ++i) dx[i] += yr[i] * (gr[i] - dot);
      }
    });
  }
  return out;
}

// Normalizes the last axis to zero mean / unit variance (population), then
// applies the affine pair. eps is tiny since everything runs in 64-bit.
inline Tensor layernorm_lastdim(Tape& tape, const Tensor& x, const Tensor& gamma,
                                const Tensor& beta) {
  static constexpr double eps = 1e-12;
  int n = x.dim(x.ndim() - 1);
  if (gamma.ndim() != 1 || beta.ndim() != 1 || gamma.dim(0) != n || beta.dim(0) != n)
    throw TensorError("layernorm_lastdim: affine shape mismatch");
  std::size_t rows = x.size() / static_cast<std::size_t>(n);
  Tensor out(x.shape());
  std::vector<double> mean(rows), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * static_cast<std::size_t>(n);
    double m = 0.0;
    for (int i = 0; i < n; ++i) m += xr[i];
    m /= n;
    double v = 0.0;
    for (int i = 0; i < n; ++i) v += (xr[i] - m) * (xr[i] - m);
    v /= n;
    mean[r] = m;
    inv_std[r] = 1.0 / std::sqrt(v + eps);
    double* orow = out.data() + r * static_cast<std::size_t>(n);
    for (int i = 0; i < n; ++i)
      orow[i] = (xr[i] - m) * inv_std[r] * gamma.data()[i] + beta.data()[i];
  }
  check_finite(out, "layernorm_lastdim");
  if (detail::track(tape, {&x, &gamma, &beta})) {
    out.set_requires_grad(true);
    Tensor xc = x, gc = gamma, bc = beta, oc = out;
    auto mn = std::make_shared<std::vector<double>>(std::move(mean));
    auto is = std::make_shared<std::vector<double>>(std::move(inv_std));
    tape.record([xc, gc, bc, oc, mn, is, rows, n]() mutable {
      const double* g = oc.grad().data();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* gr = g + r * static_cast<std::size_t>(n);
        const double* xr = xc.data() + r * static_cast<std::size_t>(n);
        double m = (*mn)[r], istd = (*is)[r];
        double sum_gy = 0.0, sum_gyx = 0.0;
        for (int i = 0; i < n; ++i) {
          double gy = gr[i] * gc.data()[i];
          double xh = (xr[i] - m) * istd;
          sum_gy += gy;
          sum_gyx += gy * xh;
        }
        if (xc.requires_grad()) {
          double* dx = xc.grad().data() + r * static_cast<std::size_t>(n);
          for (int i = 0; i < n; ++i) {
            double gy = gr[i] * gc.data()[i];
            double xh = (xr[i] - m) * istd;
            dx[i] += istd * (gy - sum_gy / n - xh * sum_gyx / n);
          }
        }
        if (gc.requires_grad() || bc.requires_grad()) {
          for (int i = 0; i < n; ++i) {
            double xh = (xr[i] - m) * istd;
            if (gc.requires_grad()) gc.grad()[static_cast<std::size_t>(i)] += gr[i] * xh;
            if (bc.requires_grad()) bc.grad()[static_cast<std::size_t>(i)] += gr[i];
          }
        }
      }
    });
  }
  return out;
}

// Batch normalization over [B, C, L] or [B, C], per channel. Training mode
// normalizes with batch statistics and updates the running buffers in place
// (momentum 0.1, unbiased running variance); inference uses the buffers.
inline Tensor batchnorm1d(Tape& tape, const Tensor& x, const Tensor& gamma,
                          const Tensor& beta, Tensor& running_mean,
                          Tensor& running_var, bool training,
                          double momentum = 0.1) {
  static constexpr double eps = 1e-5;
  if (x.ndim() != 3 && x.ndim() != 2)
    throw TensorError("batchnorm1d: expected [B,C,L] or [B,C]");
  int B = x.dim(0);
  int C = x.dim(1);
  int L = x.ndim() == 3 ? x.dim(2) : 1;
  if (B < 1) throw TensorError("batchnorm1d: empty batch");
  if (gamma.dim(0) != C || beta.dim(0) != C || running_mean.dim(0) != C ||
      running_var.dim(0) != C)
    throw TensorError("batchnorm1d: channel mismatch");
  std::size_t n = static_cast<std::size_t>(B) * L;
  if (training && n < 2)
    throw TensorError("batchnorm1d: training needs more than one value per channel");

  std::vector<double> mean(C, 0.0), var(C, 0.0);
  auto at = [&](int b, int c, int l) -> std::size_t {
    return (static_cast<std::size_t>(b) * C + c) * L + l;
  };
  if (training) {
    for (int c = 0; c < C; ++c) {
      double m = 0.0;
      for (int b = 0; b < B; ++b)
        for (int l = 0; l < L; ++l) m += x.data()[at(b, c, l)];
      m /= static_cast<double>(n);
      double v = 0.0;
      for (int b = 0; b < B; ++b)
        for (int l = 0; l < L; ++l) {
          double d = x.data()[at(b, c, l)] - m;
          v += d * d;
        }
      v /= static_cast<double>(n);
      mean[c] = m;
      var[c] = v;
      double unbiased = v * static_cast<double>(n) / static_cast<double>(n - 1);
      running_mean.values()[c] = (1.0 - momentum) * running_mean.values()[c] + momentum * m;
      running_var.values()[c] = (1.0 - momentum) * running_var.values()[c] + momentum * unbiased;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[c] = running_mean.values()[c];
      var[c] = running_var.values()[c];
    }
  }

  Tensor out(x.shape());
  std::vector<double> inv_std(C);
  for (int c = 0; c < C; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int l = 0; l < L; ++l) {
        std::size_t i = at(b, c, l);
        out.data()[i] =
            (x.data()[i] - mean[c]) * inv_std[c] * gamma.data()[c] + beta.data()[c];
      }
  check_finite(out, "batchnorm1d");

  if (detail::track(tape, {&x, &gamma, &beta})) {
    out.set_requires_grad(true);
    Tensor xc = x, gc = gamma, bc = beta, oc = out;
    auto mn = std::make_shared<std::vector<double>>(std::move(mean));
    auto is = std::make_shared<std::vector<double>>(std::move(inv_std));
    tape.record([xc, gc, bc, oc, mn, is, B, C, L, n, training]() mutable {
      auto at = [&](int b, int c, int l) -> std::size_t {
        return (static_cast<std::size_t>(b) * C + c) * L + l;
      };
      const double* g = oc.grad().data();
      for (int c = 0; c < C; ++c) {
        double m = (*mn)[c], istd = (*is)[c];
        double sum_g = 0.0, sum_gx = 0.0;
        for (int b = 0; b < B; ++b)
          for (int l = 0; l < L; ++l) {
            std::size_t i = at(b, c, l);
            double xh = (xc.data()[i] - m) * istd;
            sum_g += g[i];
            sum_gx += g[i] * xh;
          }
        double gam = gc.data()[c];
        for (int b = 0; b < B; ++b)
          for (int l = 0; l < L; ++l) {
            std::size_t i = at(b, c, l);
            double xh = (xc.data()[i] - m) * istd;
            if (xc.requires_grad()) {
              double d = training
                             ? gam * istd *
                                   (g[i] - sum_g / static_cast<double>(n) -
                                    xh * sum_gx / static_cast<double>(n))
                             : gam * istd * g[i];
              xc.grad()[i] += d;
            }
          }
        if (gc.requires_grad()) gc.grad()[static_cast<std::size_t>(c)] += sum_gx;
        if (bc.requires_grad()) bc.grad()[static_cast<std::size_t>(c)] += sum_g;
      }
    });
  }
  return out;
}

inline Tensor global_avg_pool(Tape& tape, const Tensor& x) {
  if (x.ndim() != 3) throw TensorError("global_avg_pool: expected [B,C,L]");
  int B = x.dim(0), C = x.dim(1), L = x.dim(2);
  Tensor out({B, C});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const double* xr = x.data() + (static_cast<std::size_t>(b) * C + c) * L;
      double acc = 0.0;
      for (int l = 0; l < L; ++l) acc += xr[l];
      out.data()[static_cast<std::size_t>(b) * C + c] = acc / L;
    }
  check_finite(out, "global_avg_pool");
  if (detail::track(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    tape.record([xc, oc, B, C, L]() mutable {
      const double* g = oc.grad().data();
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          double gv = g[static_cast<std::size_t>(b) * C + c] / L;
          double* dx = xc.grad().data() + (static_cast<std::size_t>(b) * C + c) * L;
          for (int l = 0; l < L; ++l) dx[l] += gv;
        }
    });
  }
  return out;
}

// Stochastic depth: zeroes the whole per-sample slice (leading axis) with
// probability rate during training and rescales survivors by 1/(1-rate).
inline Tensor droppath(Tape& tape, const Tensor& x, double rate, bool training,
                       Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw TensorError("droppath: rate must be in [0,1)");
  if (!training || rate == 0.0) return x;
  int B = x.dim(0);
  std::size_t inner = x.size() / static_cast<std::size_t>(B);
  auto mask = std::make_shared<std::vector<double>>(static_cast<std::size_t>(B));
  double keep = 1.0 - rate;
  for (int b = 0; b < B; ++b) (*mask)[static_cast<std::size_t>(b)] =
      rng.uniform() < rate ? 0.0 : 1.0 / keep;
  Tensor out(x.shape());
  for (int b = 0; b < B; ++b) {
    double m = (*mask)[static_cast<std::size_t>(b)];
    const double* xr = x.data() + static_cast<std::size_t>(b) * inner;
    double* orow = out.data() + static_cast<std::size_t>(b) * inner;
    for (std::size_t j = 0; j < inner; ++j) orow[j] = xr[j] * m;
  }
  check_finite(out, "droppath");
  if (detail::track(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    tape.record([xc, oc, mask, B, inner]() mutable {
      const double* g = oc.grad().data();
      for (int b = 0; b < B; ++b) {
        double m = (*mask)[static_cast<std::size_t>(b)];
        if (m == 0.0) continue;
        double* dx = xc.grad().data() + static_cast<std::size_t>(b) * inner;
        const double* gr = g + static_cast<std::size_t>(b) * inner;
        for (std::size_t j = 0; j < inner; ++j) dx[j] += gr[j] * m;
      }
    });
  }
  return out;
}

inline Tensor dropout(Tape& tape, const Tensor& x, double rate, bool training,
                      Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw TensorError("dropout: rate must be in [0,1)");
  if (!training || rate == 0.0) return x;
  auto mask = std::make_shared<std::vector<double>>(x.size());
  double keep = 1.0 - rate;
  for (std::size_t i = 0; i < x.size(); ++i)
    (*mask)[i] = rng.uniform() < rate ? 0.0 : 1.0 / keep;
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = x.data()[i] * (*mask)[i];
  check_finite(out, "dropout");
  if (detail::track(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    tape.record([xc, oc, mask]() mutable {
      const auto& g = oc.grad();
      for (std::size_t i = 0; i < g.size(); ++i) xc.grad()[i] += g[i] * (*mask)[i];
    });
  }
  return out;
}

}  // namespace dpnav
