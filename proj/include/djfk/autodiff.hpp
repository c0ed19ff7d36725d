#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "djfk/error.hpp"
#include "djfk/parameter.hpp"
#include "djfk/tensor.hpp"

namespace djfk {

enum class OpKind {
  constant,
  parameter,
  matmul,
  add,
  sub,
  mul,
  scale,
  concat,
  slice,
  softmax_lastdim,
  rms_norm,
  silu,
  transpose_lastdims,
  sum,
  mean_squared_error,
  gather_rows,
  rotary,
  reshape,
  custom,
};

inline std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::constant: return "constant";
    case OpKind::parameter: return "parameter";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::concat: return "concat";
    case OpKind::slice: return "slice";
    case OpKind::softmax_lastdim: return "softmax_lastdim";
    case OpKind::rms_norm: return "rms_norm";
    case OpKind::silu: return "silu";
    case OpKind::transpose_lastdims: return "transpose_lastdims";
    case OpKind::sum: return "sum";
    case OpKind::mean_squared_error: return "mean_squared_error";
    case OpKind::gather_rows: return "gather_rows";
    case OpKind::rotary: return "rotary";
    case OpKind::reshape: return "reshape";
    case OpKind::custom: return "custom";
  }
  return "?";
}

inline constexpr double kRmsNormEps = 1e-6;

template <class T>
class Tape;

/// Handle to a value recorded on a tape.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
};

/// Explicit per-forward-pass computation record.
///
/// Nodes are appended in execution order, so reverse index order is a valid
/// topological order for the backward sweep and every node is visited once.
template <class T>
class Tape {
 public:
  struct Node;
  // Receives the output gradient and one accumulator per input (nullptr for
  // inputs that do not require a gradient).
  using BackwardRule =
      std::function<void(const Tape& tape, const Node& node, const Tensor<T>& grad_out, std::span<Tensor<T>* const> grad_in)>;

  struct Node {
    OpKind kind;
    Tensor<T> value;
    std::vector<std::size_t> inputs;
    BackwardRule rule;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
  };

  explicit Tape(bool checked = false, bool grad_enabled = true) : checked_(checked), grad_enabled_(grad_enabled) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool checked() const noexcept { return checked_; }
  bool grad_enabled() const noexcept { return grad_enabled_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  Var<T> constant(Tensor<T> value) {
    check_finite(value, OpKind::constant);
    nodes_.push_back(Node{OpKind::constant, std::move(value), {}, {}, nullptr, false});
    return {this, nodes_.size() - 1};
  }

  /// Leaf bound to a trainable parameter; backward accumulates into param.grad.
  Var<T> param(Parameter<T>& p) {
    check_finite(p.value, OpKind::parameter);
    nodes_.push_back(Node{OpKind::parameter, p.value, {}, {}, &p, grad_enabled_});
    return {this, nodes_.size() - 1};
  }

  Var<T> record(OpKind kind, Tensor<T> value, std::vector<std::size_t> inputs, BackwardRule rule) {
    check_finite(value, kind);
    bool needs = false;
    if (grad_enabled_) {
      for (auto i : inputs) needs = needs || nodes_.at(i).requires_grad;
    }
    nodes_.push_back(Node{kind, std::move(value), std::move(inputs), needs ? std::move(rule) : BackwardRule{}, nullptr, needs});
    return {this, nodes_.size() - 1};
  }

  /// Reverse sweep from a scalar root; parameter gradients are accumulated.
  void backward(Var<T> root) {
    if (root.tape != this) throw ContractError("backward: root belongs to another tape");
    const Node& r = nodes_.at(root.id);
    if (!r.value.shape().empty()) {
      throw ContractError("backward: root must be a scalar, got shape " + shape_str(r.value.shape()));
    }
    if (!r.requires_grad) return;
    grads_.assign(root.id + 1, Tensor<T>{});
    has_grad_.assign(root.id + 1, false);
    grads_[root.id] = Tensor<T>::scalar(T{1});
    has_grad_[root.id] = true;
    std::vector<Tensor<T>*> slots;
    for (std::size_t i = root.id + 1; i-- > 0;) {
      if (!has_grad_[i]) continue;
      const Node& n = nodes_[i];
      if (n.param != nullptr) {
        auto& g = n.param->grad;
        const auto& src = grads_[i];
        for (std::size_t k = 0; k < g.numel(); ++k) g[k] += src[k];
        continue;
      }
      if (!n.rule) continue;
      slots.assign(n.inputs.size(), nullptr);
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const auto in = n.inputs[k];
        if (!nodes_[in].requires_grad) continue;
        if (!has_grad_[in]) {
          grads_[in] = Tensor<T>(nodes_[in].value.shape());
          has_grad_[in] = true;
        }
        slots[k] = &grads_[in];
      }
      n.rule(*this, n, grads_[i], slots);
      grads_[i] = Tensor<T>{};  // release intermediate memory
    }
  }

 private:
  void check_finite(const Tensor<T>& t, OpKind kind) const {
    if (checked_ && !t.all_finite()) {
      throw NumericError("non-finite value produced by op '" + std::string(op_name(kind)) + "' with shape " +
                         shape_str(t.shape()));
    }
  }

  bool checked_;
  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::vector<Tensor<T>> grads_;
  std::vector<bool> has_grad_;
};

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

inline void require_same_tape(const void* a, const void* b) {
  if (a != b) throw ContractError("operands recorded on different tapes");
}

// b broadcasts onto a when b, with leading 1s removed, is a suffix of a.
inline bool broadcasts_onto(const Shape& a, const Shape& b) {
  std::size_t lead = 0;
  while (lead < b.size() && b[lead] == 1 && b.size() - lead > 0) ++lead;
  const std::size_t rest = b.size() - lead;
  if (rest > a.size()) return false;
  for (std::size_t i = 0; i < rest; ++i) {
    if (b[lead + i] != a[a.size() - rest + i]) return false;
  }
  return true;
}

inline std::size_t normalize_axis(long axis, std::size_t rank) {
  const long r = static_cast<long>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(axis);
}

enum class Binary { add, sub, mul };

template <class T>
Var<T> binary(Binary op, Var<T> a, Var<T> b) {
  require_same_tape(a.tape, b.tape);
  const auto& av = a.value();
  const auto& bv = b.value();
  // Arrange so that `big` carries the output shape.
  bool swapped = false;
  if (av.shape() != bv.shape() && !broadcasts_onto(av.shape(), bv.shape())) {
    if (broadcasts_onto(bv.shape(), av.shape())) {
      swapped = true;
    } else {
      throw ShapeError("elementwise op: incompatible shapes " + shape_str(av.shape()) + " and " + shape_str(bv.shape()));
    }
  }
  const auto& big = swapped ? bv : av;
  const auto& small = swapped ? av : bv;
  const std::size_t n = big.numel();
  const std::size_t m = small.numel();
  Tensor<T> out(big.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const T x = swapped ? small[i % m] : big[i];
    const T y = swapped ? big[i] : small[i % m];
    switch (op) {
      case Binary::add: out[i] = x + y; break;
      case Binary::sub: out[i] = x - y; break;
      case Binary::mul: out[i] = x * y; break;
    }
  }
  const OpKind kind = op == Binary::add ? OpKind::add : op == Binary::sub ? OpKind::sub : OpKind::mul;
  return a.tape->record(kind, std::move(out), {a.id, b.id},
                        [op](const Tape<T>& tape, const auto& node, const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
                          const auto& x = tape.value(node.inputs[0]);
                          const auto& y = tape.value(node.inputs[1]);
                          const std::size_t n = g.numel();
                          const std::size_t nx = x.numel();
                          const std::size_t ny = y.numel();
                          for (std::size_t i = 0; i < n; ++i) {
                            const std::size_t ix = i % nx;
                            const std::size_t iy = i % ny;
                            if (gin[0]) {
                              const T d = op == Binary::mul ? y[iy] : T{1};
                              (*gin[0])[ix] += g[i] * d;
                            }
                            if (gin[1]) {
                              const T d = op == Binary::mul ? x[ix] : op == Binary::sub ? T{-1} : T{1};
                              (*gin[1])[iy] += g[i] * d;
                            }
                          }
                        });
}

}  // namespace detail

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  return detail::binary(detail::Binary::add, a, b);
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  return detail::binary(detail::Binary::sub, a, b);
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  return detail::binary(detail::Binary::mul, a, b);
}

template <class T>
Var<T> scale(Var<T> a, T s) {
  const auto& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.numel(); ++i) out[i] = av[i] * s;
  return a.tape->record(OpKind::scale, std::move(out), {a.id},
                        [s](const Tape<T>&, const auto&, const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
                          for (std::size_t i = 0; i < g.numel(); ++i) (*gin[0])[i] += g[i] * s;
                        });
}

/// a[..., m, k] x b[k, n] (shared) or b[..., k, n] (batched) -> [..., m, n].
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::require_same_tape(a.tape, b.tape);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() < 2 || bv.rank() < 2) {
    throw ShapeError("matmul needs rank >= 2 operands, got " + shape_str(av.shape()) + " and " + shape_str(bv.shape()));
  }
  const std::size_t m = av.dim(av.rank() - 2);
  const std::size_t k = av.dim(av.rank() - 1);
  const std::size_t kb = bv.dim(bv.rank() - 2);
  const std::size_t n = bv.dim(bv.rank() - 1);
  const Shape batch_a(av.shape().begin(), av.shape().end() - 2);
  const Shape batch_b(bv.shape().begin(), bv.shape().end() - 2);
  const bool shared = bv.rank() == 2;
  if (k != kb || (!shared && batch_a != batch_b)) {
    throw ShapeError("matmul shape mismatch: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  }
  const std::size_t batch = shape_numel(batch_a);
  Shape out_shape = batch_a;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<T> out(out_shape);
  using detail::CMapMat;
  using detail::MapMat;
  for (std::size_t i = 0; i < batch; ++i) {
    CMapMat<T> A(av.data().data() + i * m * k, m, k);
    CMapMat<T> B(bv.data().data() + (shared ? 0 : i * k * n), k, n);
    MapMat<T> C(out.data().data() + i * m * n, m, n);
    C.noalias() = A * B;
  }
  return a.tape->record(
      OpKind::matmul, std::move(out), {a.id, b.id},
      [batch, m, k, n, shared](const Tape<T>& tape, const auto& node, const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
        const auto& x = tape.value(node.inputs[0]);
        const auto& y = tape.value(node.inputs[1]);
        for (std::size_t i = 0; i < batch; ++i) {
          CMapMat<T> A(x.data().data() + i * m * k, m, k);
          CMapMat<T> B(y.data().data() + (shared ? 0 : i * k * n), k, n);
          CMapMat<T> G(g.data().data() + i * m * n, m, n);
          if (gin[0]) {
            MapMat<T> GA(gin[0]->data().data() + i * m * k, m, k);
            GA.noalias() += G * B.transpose();
          }
          if (gin[1]) {
            MapMat<T> GB(gin[1]->data().data() + (shared ? 0 : i * k * n), k, n);
            GB.noalias() += A.transpose() * G;
          }
        }
      });
}

template <class T>
Var<T> concat(const std::vector<Var<T>>& parts, long axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const auto& first = parts.front().value();
  const std::size_t ax = detail::normalize_axis(axis, first.rank());
  Shape out_shape = first.shape();
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    detail::require_same_tape(parts.front().tape, p.tape);
    const auto& s = p.shape();
    if (s.size() != first.rank()) throw ShapeError("concat rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != ax && s[d] != first.dim(d)) {
        throw ShapeError("concat shape mismatch: " + shape_str(first.shape()) + " vs " + shape_str(s));
      }
    }
    out_shape[ax] += s[ax];
  }
  const std::size_t outer = shape_numel(Shape(first.shape().begin(), first.shape().begin() + static_cast<long>(ax)));
  const std::size_t inner = shape_numel(Shape(first.shape().begin() + static_cast<long>(ax) + 1, first.shape().end()));
  const std::size_t out_stride = out_shape[ax] * inner;
  Tensor<T> out(out_shape);
  std::vector<std::size_t> ids;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto& v = p.value();
    const std::size_t chunk = v.dim(ax) * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(v.data().begin() + static_cast<long>(o * chunk), chunk, out.data().begin() + static_cast<long>(o * out_stride + off));
    }
    ids.push_back(p.id);
    offsets.push_back(off);
    off += chunk;
  }
  return parts.front().tape->record(
      OpKind::concat, std::move(out), ids,
      [outer, out_stride, offsets](const Tape<T>& tape, const auto& node, const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
        for (std::size_t p = 0; p < gin.size(); ++p) {
          if (!gin[p]) continue;
          const std::size_t chunk = tape.value(node.inputs[p]).numel() / (outer == 0 ? 1 : outer);
          for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t j = 0; j < chunk; ++j) (*gin[p])[o * chunk + j] += g[o * out_stride + offsets[p] + j];
          }
        }
      });
}

/// Elements [begin, end) along `axis`.
template <class T>
Var<T> slice(Var<T> a, long axis, std::size_t begin, std::size_t end) {
  const auto& av = a.value();
  const std::size_t ax = detail::normalize_axis(axis, av.rank());
  if (begin > end || end > av.dim(ax)) {
    throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") out of range for " + shape_str(av.shape()));
  }
  const std::size_t outer = shape_numel(Shape(av.shape().begin(), av.shape().begin() + static_cast<long>(ax)));
  const std::size_t inner = shape_numel(Shape(av.shape().begin() + static_cast<long>(ax) + 1, av.shape().end()));
  const std::size_t in_stride = av.dim(ax) * inner;
  const std::size_t chunk = (end - begin) * inner;
  Shape out_shape = av.shape();
  out_shape[ax] = end - begin;
  Tensor<T> out(out_shape);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(av.data().begin() + static_cast<long>(o * in_stride + begin * inner), chunk, out.data().begin() + static_cast<long>(o * chunk));
  }
  const std::size_t start = begin * inner;
  return a.tape->record(OpKind::slice, std::move(out), {a.id},
                        [outer, in_stride, chunk, start](const Tape<T>&, const auto&, const Tensor<T>& g,
                                                         std::span<Tensor<T>* const> gin) {
                          for (std::size_t o = 0; o < outer; ++o) {
                            for (std::size_t j = 0; j < chunk; ++j) (*gin[0])[o * in_stride + start + j] += g[o * chunk + j];
                          }
                        });
}

template <class T>
Var<T> softmax_lastdim(Var<T> a) {
  const auto& av = a.value();
  const std::size_t c = av.cols();
  const std::size_t r = av.rows();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < r; ++i) {
    const T* x = av.data().data() + i * c;
    T* y = out.data().data() + i * c;
    T mx = c ? x[0] : T{0};
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    T s{0};
    for (std::size_t j = 0; j < c; ++j) {
      y[j] = std::exp(x[j] - mx);
      s += y[j];
    }
    for (std::size_t j = 0; j < c; ++j) y[j] /= s;
  }
  return a.tape->record(OpKind::softmax_lastdim, std::move(out), {a.id},
                        [r, c](const Tape<T>&, const auto& node, const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
                          const auto& y = node.value;
                          for (std::size_t i = 0; i < r; ++i) {
                            T dot{0};
                            for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
                            for (std::size_t j = 0; j < c; ++j) (*gin[0])[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
                          }
                        });
}

/// RMS normalization over the last axis, optionally times a learnable scale.
template <class T>
Var<T> rms_norm(Var<T> x, const Var<T>* scale_var, double eps = kRmsNormEps) {
  const auto& xv = x.value();
  const std::size_t c = xv.cols();
  const std::size_t r = xv.rows();
  if (scale_var) {
    detail::require_same_tape(x.tape, scale_var->tape);
    if (scale_var->value().numel() != c) {
      throw ShapeError("rms_norm scale " + shape_str(scale_var->shape()) + " does not match last dim of " + shape_str(xv.shape()));
    }
  }
  Tensor<T> out(xv.shape());
  std::vector<T> inv(r);
  const T* s = scale_var ? scale_var->value().data().data() : nullptr;
  for (std::size_t i = 0; i < r; ++i) {
    T ms{0};
    for (std::size_t j = 0; j < c; ++j) ms += xv[i * c + j] * xv[i * c + j];
    inv[i] = T{1} / std::sqrt(ms / static_cast<T>(c) + static_cast<T>(eps));
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xv[i * c + j] * inv[i] * (s ? s[j] : T{1});
  }
  std::vector<std::size_t> ids{x.id};
  if (scale_var) ids.push_back(scale_var->id);
  return x.tape->record(
      OpKind::rms_norm, std::move(out), ids,
      [r, c, inv = std::move(inv)](const Tape<T>& tape, const auto& node, const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
        const auto& xv = tape.value(node.inputs[0]);
        const T* s = node.inputs.size() > 1 ? tape.value(node.inputs[1]).data().data() : nullptr;
        for (std::size_t i = 0; i < r; ++i) {
          T dot{0};
          for (std::size_t j = 0; j < c; ++j) {
            const T nrm = xv[i * c + j] * inv[i];
            const T gn = g[i * c + j] * (s ? s[j] : T{1});
            dot += gn * nrm;
            if (gin.size() > 1 && gin[1]) (*gin[1])[j] += g[i * c + j] * nrm;
          }
          dot /= static_cast<T>(c);
          if (gin[0]) {
            for (std::size_t j = 0; j < c; ++j) {
              const T nrm = xv[i * c + j] * inv[i];
              const T gn = g[i * c + j] * (s ? s[j] : T{1});
              (*gin[0])[i * c + j] += inv[i] * (gn - nrm * dot);
            }
          }
        }
      });
}

template <class T>
Var<T> rms_norm(Var<T> x, Var<T> scale_var, double eps = kRmsNormEps) {
  return rms_norm(x, &scale_var, eps);
}

template <class T>
Var<T> rms_norm(Var<T> x) {
  return rms_norm<T>(x, nullptr, kRmsNormEps);
}

template <class T>
Var<T> silu(Var<T> a) {
  const auto& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.numel(); ++i) out[i] = av[i] / (T{1} + std::exp(-av[i]));
  return a.tape->record(OpKind::silu, std::move(out), {a.id},
                        [](const Tape<T>& tape, const auto& node, const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
                          const auto& x = tape.value(node.inputs[0]);
                          for (std::size_t i = 0; i < g.numel(); ++i) {
                            const T sg = T{1} / (T{1} + std::exp(-x[i]));
                            (*gin[0])[i] += g[i] * sg * (T{1} + x[i] * (T{1} - sg));
                          }
                        });
}

template <class T>
Var<T> transpose_lastdims(Var<T> a) {
  const auto& av = a.value();
  if (av.rank() < 2) throw ShapeError("transpose_lastdims needs rank >= 2, got " + shape_str(av.shape()));
  const std::size_t m = av.dim(av.rank() - 2);
  const std::size_t n = av.dim(av.rank() - 1);
  const std::size_t batch = m * n == 0 ? 0 : av.numel() / (m * n);
  Shape out_shape = av.shape();
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  Tensor<T> out(out_shape);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) out[b * m * n + j * m + i] = av[b * m * n + i * n + j];
    }
  }
  return a.tape->record(OpKind::transpose_lastdims, std::move(out), {a.id},
                        [batch, m, n](const Tape<T>&, const auto&, const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
                          for (std::size_t b = 0; b < batch; ++b) {
                            for (std::size_t i = 0; i < m; ++i) {
                              for (std::size_t j = 0; j < n; ++j) (*gin[0])[b * m * n + i * n + j] += g[b * m * n + j * m + i];
                            }
                          }
                        });
}

template <class T>
Var<T> sum(Var<T> a) {
  const auto& av = a.value();
  T s{0};
  for (auto v : av.data()) s += v;
  return a.tape->record(OpKind::sum, Tensor<T>::scalar(s), {a.id},
                        [](const Tape<T>&, const auto&, const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
                          for (auto& v : gin[0]->data()) v += g[0];
                        });
}

/// mean((a - b)^2) over all elements.
template <class T>
Var<T> mean_squared_error(Var<T> a, Var<T> b) {
  detail::require_same_tape(a.tape, b.tape);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.shape() != bv.shape()) {
    throw ShapeError("mean_squared_error shape mismatch: " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  }
  const std::size_t n = av.numel();
  if (n == 0) throw ContractError("mean_squared_error of empty tensors");
  T s{0};
  for (std::size_t i = 0; i < n; ++i) s += (av[i] - bv[i]) * (av[i] - bv[i]);
  return a.tape->record(OpKind::mean_squared_error, Tensor<T>::scalar(s / static_cast<T>(n)), {a.id, b.id},
                        [n](const Tape<T>& tape, const auto& node, const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
                          const auto& x = tape.value(node.inputs[0]);
                          const auto& y = tape.value(node.inputs[1]);
                          const T k = T{2} * g[0] / static_cast<T>(n);
                          for (std::size_t i = 0; i < n; ++i) {
                            const T d = k * (x[i] - y[i]);
                            if (gin[0]) (*gin[0])[i] += d;
                            if (gin[1]) (*gin[1])[i] -= d;
                          }
                        });
}

/// Rows of a rank-2 tensor by index (repeats allowed).
template <class T>
Var<T> gather_rows(Var<T> a, std::vector<std::size_t> index) {
  const auto& av = a.value();
  if (av.rank() != 2) throw ShapeError("gather_rows needs a rank-2 tensor, got " + shape_str(av.shape()));
  const std::size_t c = av.dim(1);
  Tensor<T> out(Shape{index.size(), c});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= av.dim(0)) throw ShapeError("gather_rows index " + std::to_string(index[i]) + " out of range");
    std::copy_n(av.data().begin() + static_cast<long>(index[i] * c), c, out.data().begin() + static_cast<long>(i * c));
  }
  return a.tape->record(OpKind::gather_rows, std::move(out), {a.id},
                        [c, index = std::move(index)](const Tape<T>&, const auto&, const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
                          for (std::size_t i = 0; i < index.size(); ++i) {
                            for (std::size_t j = 0; j < c; ++j) (*gin[0])[index[i] * c + j] += g[i * c + j];
                          }
                        });
}

/// Rotates adjacent pairs (x[2j], x[2j+1]) of each row by angles[row, j].
/// `angles` is a constant [rows, cols/2] tensor.
template <class T>
Var<T> rotary(Var<T> x, const Tensor<T>& angles) {
  const auto& xv = x.value();
  const std::size_t c = xv.cols();
  const std::size_t r = xv.rows();
  if (c % 2 != 0 || angles.cols() != c / 2 || angles.rows() != r) {
    throw ShapeError("rotary: input " + shape_str(xv.shape()) + " incompatible with angles " + shape_str(angles.shape()));
  }
  const std::size_t p = c / 2;
  std::vector<T> cs(r * p), sn(r * p);
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < p; ++j) {
      const T a = angles[i * p + j];
      const T co = std::cos(a), si = std::sin(a);
      cs[i * p + j] = co;
      sn[i * p + j] = si;
      const T x0 = xv[i * c + 2 * j], x1 = xv[i * c + 2 * j + 1];
      out[i * c + 2 * j] = x0 * co - x1 * si;
      out[i * c + 2 * j + 1] = x0 * si + x1 * co;
    }
  }
  return x.tape->record(OpKind::rotary, std::move(out), {x.id},
                        [r, p, c, cs = std::move(cs), sn = std::move(sn)](const Tape<T>&, const auto&, const Tensor<T>& g,
                                                                         std::span<Tensor<T>* const> gin) {
                          for (std::size_t i = 0; i < r; ++i) {
                            for (std::size_t j = 0; j < p; ++j) {
                              const T co = cs[i * p + j], si = sn[i * p + j];
                              const T g0 = g[i * c + 2 * j], g1 = g[i * c + 2 * j + 1];
                              (*gin[0])[i * c + 2 * j] += g0 * co + g1 * si;
                              (*gin[0])[i * c + 2 * j + 1] += -g0 * si + g1 * co;
                            }
                          }
                        });
}

template <class T>
Var<T> reshape(Var<T> a, Shape shape) {
  if (shape_numel(shape) != a.value().numel()) {
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  return a.tape->record(OpKind::reshape, a.value().reshaped(std::move(shape)), {a.id},
                        [](const Tape<T>&, const auto&, const Tensor<T>& g, std::span<Tensor<T>* const> gin) {
                          for (std::size_t i = 0; i < g.numel(); ++i) (*gin[0])[i] += g[i];
                        });
}

}  // namespace djfk
