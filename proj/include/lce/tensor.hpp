#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lce/errors.hpp"

namespace lce {

using Index = std::int64_t;
using Shape = std::vector<Index>;

inline Index numel(const Shape& s) {
  Index n = 1;
  for (Index d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// Per-scalar-path tolerance constants. The double path is the test/oracle
// path; the float path is the training path.
template <typename Scalar>
struct PathTol;
template <>
struct PathTol<double> {
  static constexpr double attention_equiv = 1e-10;
  static constexpr double grad_parity = 1e-8;
  static constexpr double oracle = 1e-9;
};
template <>
struct PathTol<float> {
  static constexpr double attention_equiv = 1e-5;
  static constexpr double grad_parity = 1e-3;
  static constexpr double oracle = 1e-4;
};

template <typename Scalar>
class Tape;

// N-dimensional array handle. Copies share the underlying buffers; values are
// immutable once an op has consumed the tensor, grads accumulate in place.
template <typename Scalar>
struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<Scalar>> values;
  std::shared_ptr<std::vector<Scalar>> grad;  // present iff requires_grad
  Tape<Scalar>* tape = nullptr;
  int node = -1;
  bool requires_grad = false;

  bool defined() const { return static_cast<bool>(values); }
  Index size() const { return values ? static_cast<Index>(values->size()) : 0; }
  int rank() const { return static_cast<int>(shape.size()); }
  Index dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }

  // Handle semantics: accessors hand out mutable views of the shared buffers.
  Scalar* data() const { return values->data(); }
  Scalar* grad_data() const { return grad->data(); }

  Scalar& operator()(Index i) const { return (*values)[static_cast<std::size_t>(i)]; }
  Scalar& operator()(Index i, Index j) const {
    return (*values)[static_cast<std::size_t>(i * shape[1] + j)];
  }

  // Value of a one-element tensor.
  Scalar item() const {
    if (size() != 1) throw ShapeError("item(): tensor has " + std::to_string(size()) + " elements");
    return (*values)[0];
  }
};

// Row-major dense maps; Eigen is the compute backend for every matrix product.
template <typename Scalar>
using ConstMap =
    Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename Scalar>
using MutMap =
    Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// Records one backward rule per forward op; replaying the rules in reverse
// creation order is reverse-topological replay, since an op's inputs always
// exist before its output.
template <typename Scalar>
class Tape {
 public:
  Tensor<Scalar> leaf(const Shape& shape, std::vector<Scalar> data, bool requires_grad = true) {
    check_payload(shape, static_cast<Index>(data.size()));
    Tensor<Scalar> t;
    t.shape = shape;
    t.values = std::make_shared<std::vector<Scalar>>(std::move(data));
    if (requires_grad) t.grad = std::make_shared<std::vector<Scalar>>(t.values->size(), Scalar(0));
    t.requires_grad = requires_grad;
    t.tape = this;
    t.node = next_node_++;
    return t;
  }

  // Leaf over externally owned storage (model parameters): gradients
  // accumulate into the caller's buffer across backward passes.
  Tensor<Scalar> leaf(const Shape& shape, std::shared_ptr<std::vector<Scalar>> vals,
                      std::shared_ptr<std::vector<Scalar>> grad_buf) {
    check_payload(shape, static_cast<Index>(vals->size()));
    if (grad_buf && grad_buf->size() != vals->size())
      throw ShapeError("leaf: grad buffer size mismatch");
    Tensor<Scalar> t;
    t.shape = shape;
    t.values = std::move(vals);
    t.grad = std::move(grad_buf);
    t.requires_grad = static_cast<bool>(t.grad);
    t.tape = this;
    t.node = next_node_++;
    return t;
  }

  Tensor<Scalar> constant(const Shape& shape, std::vector<Scalar> data) {
    return leaf(shape, std::move(data), /*requires_grad=*/false);
  }

  Tensor<Scalar> zeros(const Shape& shape, bool requires_grad = false) {
    return leaf(shape, std::vector<Scalar>(static_cast<std::size_t>(numel(shape)), Scalar(0)),
                requires_grad);
  }

  // Output allocation for ops; requires_grad reflects the inputs.
  Tensor<Scalar> alloc(const Shape& shape, bool requires_grad) {
    return leaf(shape, std::vector<Scalar>(static_cast<std::size_t>(numel(shape)), Scalar(0)),
                requires_grad);
  }

  void record(std::function<void()> backward_rule) { ops_.push_back(std::move(backward_rule)); }

  std::size_t op_count() const { return ops_.size(); }
  bool consumed() const { return consumed_; }

  void backward(const Tensor<Scalar>& loss) {
    if (loss.tape != this) throw TapeError("backward: loss does not belong to this tape");
    if (loss.size() != 1)
      throw TapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape));
    if (consumed_) throw TapeError("backward: tape already consumed");
    consumed_ = true;
    if (!loss.requires_grad) return;  // nothing reachable requires gradients
    (*loss.grad)[0] += Scalar(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

 private:
  static void check_payload(const Shape& shape, Index count) {
    for (Index d : shape)
      if (d <= 0) throw ShapeError("tensor dims must be positive, got " + shape_str(shape));
    if (numel(shape) != count)
      throw ShapeError("data length " + std::to_string(count) + " does not match shape " +
                       shape_str(shape));
  }

  std::vector<std::function<void()>> ops_;
  int next_node_ = 0;
  bool consumed_ = false;
};

namespace detail {

template <typename Scalar>
Tape<Scalar>* common_tape(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.tape == nullptr || a.tape != b.tape)
    throw TapeError("operands live on different tapes");
  return a.tape;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Ops. Each returns a fresh tensor and records its backward rule. Reductions
// run left-to-right so repeated runs are bitwise identical.
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b, bool transpose_b = false) {
  Tape<Scalar>* tape = detail::common_tape(a, b);
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul: expects rank-2 operands, got " + shape_str(a.shape) + " and " +
                     shape_str(b.shape));
  const Index m = a.dim(0), k = a.dim(1);
  const Index bk = transpose_b ? b.dim(1) : b.dim(0);
  const Index n = transpose_b ? b.dim(0) : b.dim(1);
  if (k != bk)
    throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape) + (transpose_b ? " (transposed)" : ""));
  Tensor<Scalar> out = tape->alloc({m, n}, a.requires_grad || b.requires_grad);
  {
    MutMap<Scalar> o(out.data(), m, n);
    ConstMap<Scalar> am(a.data(), m, k);
    if (transpose_b)
      o.noalias() = am * ConstMap<Scalar>(b.data(), n, k).transpose();
    else
      o.noalias() = am * ConstMap<Scalar>(b.data(), k, n);
  }
  if (out.requires_grad) {
    tape->record([a, b, out, m, n, k, transpose_b]() {
      ConstMap<Scalar> g(out.grad_data(), m, n);
      if (a.requires_grad) {
        MutMap<Scalar> ga(a.grad_data(), m, k);
        if (transpose_b)
          ga.noalias() += g * ConstMap<Scalar>(b.data(), n, k);
        else
          ga.noalias() += g * ConstMap<Scalar>(b.data(), k, n).transpose();
      }
      if (b.requires_grad) {
        if (transpose_b) {
          MutMap<Scalar> gb(b.grad_data(), n, k);
          gb.noalias() += g.transpose() * ConstMap<Scalar>(a.data(), m, k);
        } else {
          MutMap<Scalar> gb(b.grad_data(), k, n);
          gb.noalias() += ConstMap<Scalar>(a.data(), m, k).transpose() * g;
        }
      }
    });
  }
  return out;
}

// Elementwise add; also accepts a rank-1 right operand broadcast over the
// last axis (bias add).
template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  Tape<Scalar>* tape = detail::common_tape(a, b);
  const bool bias_bcast = b.rank() == 1 && a.rank() > 1 && a.shape.back() == b.dim(0);
  if (!bias_bcast && a.shape != b.shape)
    throw ShapeError("add: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  Tensor<Scalar> out = tape->alloc(a.shape, a.requires_grad || b.requires_grad);
  const Index total = a.size();
  if (bias_bcast) {
    const Index d = b.dim(0);
    for (Index i = 0; i < total; ++i) (*out.values)[i] = (*a.values)[i] + (*b.values)[i % d];
  } else {
    for (Index i = 0; i < total; ++i) (*out.values)[i] = (*a.values)[i] + (*b.values)[i];
  }
  if (out.requires_grad) {
    tape->record([a, b, out, total, bias_bcast]() {
      if (a.requires_grad)
        for (Index i = 0; i < total; ++i) (*a.grad)[i] += (*out.grad)[i];
      if (b.requires_grad) {
        if (bias_bcast) {
          const Index d = b.dim(0);
          for (Index i = 0; i < total; ++i) (*b.grad)[i % d] += (*out.grad)[i];
        } else {
          for (Index i = 0; i < total; ++i) (*b.grad)[i] += (*out.grad)[i];
        }
      }
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> multiply(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  Tape<Scalar>* tape = detail::common_tape(a, b);
  if (a.shape != b.shape)
    throw ShapeError("multiply: shape mismatch " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape));
  Tensor<Scalar> out = tape->alloc(a.shape, a.requires_grad || b.requires_grad);
  const Index total = a.size();
  for (Index i = 0; i < total; ++i) (*out.values)[i] = (*a.values)[i] * (*b.values)[i];
  if (out.requires_grad) {
    tape->record([a, b, out, total]() {
      if (a.requires_grad)
        for (Index i = 0; i < total; ++i) (*a.grad)[i] += (*out.grad)[i] * (*b.values)[i];
      if (b.requires_grad)
        for (Index i = 0; i < total; ++i) (*b.grad)[i] += (*out.grad)[i] * (*a.values)[i];
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar c) {
  Tensor<Scalar> out = a.tape->alloc(a.shape, a.requires_grad);
  const Index total = a.size();
  for (Index i = 0; i < total; ++i) (*out.values)[i] = (*a.values)[i] * c;
  if (out.requires_grad) {
    a.tape->record([a, out, c, total]() {
      for (Index i = 0; i < total; ++i) (*a.grad)[i] += (*out.grad)[i] * c;
    });
  }
  return out;
}

// Exact GELU: x * Phi(x) with Phi the standard normal CDF.
template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& x) {
  Tensor<Scalar> out = x.tape->alloc(x.shape, x.requires_grad);
  const Index total = x.size();
  const Scalar inv_sqrt2 = Scalar(0.70710678118654752440);
  for (Index i = 0; i < total; ++i) {
    const Scalar v = (*x.values)[i];
    (*out.values)[i] = Scalar(0.5) * v * (Scalar(1) + std::erf(v * inv_sqrt2));
  }
  if (out.requires_grad) {
    x.tape->record([x, out, total, inv_sqrt2]() {
      const Scalar inv_sqrt2pi = Scalar(0.39894228040143267794);
      for (Index i = 0; i < total; ++i) {
        const Scalar v = (*x.values)[i];
        const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(v * inv_sqrt2));
        const Scalar pdf = inv_sqrt2pi * std::exp(Scalar(-0.5) * v * v);
        (*x.grad)[i] += (*out.grad)[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

// Boolean matrix for attention masking.
struct BoolMatrix {
  Index rows = 0;
  Index cols = 0;
  std::vector<std::uint8_t> bits;

  BoolMatrix() = default;
  BoolMatrix(Index r, Index c, bool fill = false)
      : rows(r), cols(c), bits(static_cast<std::size_t>(r * c), fill ? 1 : 0) {}
  bool get(Index i, Index j) const { return bits[static_cast<std::size_t>(i * cols + j)] != 0; }
  void set(Index i, Index j, bool v) { bits[static_cast<std::size_t>(i * cols + j)] = v ? 1 : 0; }
};

// Row-wise softmax over permitted positions; masked positions are exactly 0.
// Stabilized by subtracting the row max over permitted positions.
template <typename Scalar>
Tensor<Scalar> masked_softmax(const Tensor<Scalar>& scores, const BoolMatrix& mask) {
  if (scores.rank() != 2)
    throw ShapeError("masked_softmax: expects rank-2 scores, got " + shape_str(scores.shape));
  const Index n = scores.dim(0), m = scores.dim(1);
  if (mask.rows != n || mask.cols != m)
    throw ShapeError("masked_softmax: mask is " + std::to_string(mask.rows) + "x" +
                     std::to_string(mask.cols) + ", scores are " + shape_str(scores.shape));
  Tensor<Scalar> out = scores.tape->alloc(scores.shape, scores.requires_grad);
  for (Index i = 0; i < n; ++i) {
    Scalar mx = std::numeric_limits<Scalar>::lowest();
    bool any = false;
    for (Index j = 0; j < m; ++j)
      if (mask.get(i, j)) {
        any = true;
        mx = std::max(mx, scores(i, j));
      }
    if (!any)
      throw ValueError("masked_softmax: row " + std::to_string(i) +
                       " has no permitted positions (degenerate attention row)");
    Scalar denom = 0;
    for (Index j = 0; j < m; ++j)
      if (mask.get(i, j)) {
        const Scalar e = std::exp(scores(i, j) - mx);
        (*out.values)[i * m + j] = e;
        denom += e;
      }
    for (Index j = 0; j < m; ++j)
      if (mask.get(i, j)) (*out.values)[i * m + j] /= denom;
  }
  if (out.requires_grad) {
    auto mask_copy = std::make_shared<BoolMatrix>(mask);
    scores.tape->record([scores, out, mask_copy, n, m]() {
      for (Index i = 0; i < n; ++i) {
        Scalar dot = 0;
        for (Index j = 0; j < m; ++j)
          if (mask_copy->get(i, j)) dot += (*out.grad)[i * m + j] * (*out.values)[i * m + j];
        for (Index j = 0; j < m; ++j)
          if (mask_copy->get(i, j))
            (*scores.grad)[i * m + j] +=
                (*out.values)[i * m + j] * ((*out.grad)[i * m + j] - dot);
      }
    });
  }
  return out;
}

// Zero-mean unit-variance normalization over the last axis, then affine.
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gain,
                          const Tensor<Scalar>& bias) {
  constexpr Scalar kEps = Scalar(1e-5);
  if (x.rank() < 1) throw ShapeError("layer_norm: rank-0 input");
  const Index d = x.shape.back();
  if (gain.shape != Shape{d} || bias.shape != Shape{d})
    throw ShapeError("layer_norm: gain/bias must be [" + std::to_string(d) + "]");
  Tape<Scalar>* tape = x.tape;
  const Index rows = x.size() / d;
  Tensor<Scalar> out =
      tape->alloc(x.shape, x.requires_grad || gain.requires_grad || bias.requires_grad);
  auto xhat = std::make_shared<std::vector<Scalar>>(x.size());
  auto inv_std = std::make_shared<std::vector<Scalar>>(rows);
  for (Index r = 0; r < rows; ++r) {
    const Scalar* row = x.data() + r * d;
    Scalar mu = 0;
    for (Index j = 0; j < d; ++j) mu += row[j];
    mu /= Scalar(d);
    Scalar var = 0;
    for (Index j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= Scalar(d);
    const Scalar inv = Scalar(1) / std::sqrt(var + kEps);
    (*inv_std)[r] = inv;
    for (Index j = 0; j < d; ++j) {
      const Scalar h = (row[j] - mu) * inv;
      (*xhat)[r * d + j] = h;
      (*out.values)[r * d + j] = h * (*gain.values)[j] + (*bias.values)[j];
    }
  }
  if (out.requires_grad) {
    tape->record([x, gain, bias, out, xhat, inv_std, rows, d]() {
      for (Index r = 0; r < rows; ++r) {
        const Scalar inv = (*inv_std)[r];
        Scalar mean_dy = 0, mean_dyxh = 0;
        for (Index j = 0; j < d; ++j) {
          const Scalar dy = (*out.grad)[r * d + j] * (*gain.values)[j];
          mean_dy += dy;
          mean_dyxh += dy * (*xhat)[r * d + j];
        }
        mean_dy /= Scalar(d);
        mean_dyxh /= Scalar(d);
        for (Index j = 0; j < d; ++j) {
          const Scalar g = (*out.grad)[r * d + j];
          if (x.requires_grad) {
            const Scalar dy = g * (*gain.values)[j];
            (*x.grad)[r * d + j] += inv * (dy - mean_dy - (*xhat)[r * d + j] * mean_dyxh);
          }
          if (gain.requires_grad) (*gain.grad)[j] += g * (*xhat)[r * d + j];
          if (bias.requires_grad) (*bias.grad)[j] += g;
        }
      }
    });
  }
  return out;
}

// Gather rows of an embedding table.
template <typename Scalar>
Tensor<Scalar> embedding_gather(const Tensor<Scalar>& table, const std::vector<int>& ids) {
  if (table.rank() != 2) throw ShapeError("embedding_gather: table must be rank 2");
  const Index v = table.dim(0), d = table.dim(1);
  const Index n = static_cast<Index>(ids.size());
  if (n == 0) throw ValueError("embedding_gather: empty id list");
  for (int id : ids)
    if (id < 0 || id >= v)
      throw ValueError("embedding_gather: id " + std::to_string(id) + " out of range [0," +
                       std::to_string(v) + ")");
  Tensor<Scalar> out = table.tape->alloc({n, d}, table.requires_grad);
  for (Index i = 0; i < n; ++i)
    std::copy_n(table.data() + static_cast<Index>(ids[i]) * d, d, out.data() + i * d);
  if (out.requires_grad) {
    auto ids_copy = std::make_shared<std::vector<int>>(ids);
    table.tape->record([table, out, ids_copy, n, d]() {
      for (Index i = 0; i < n; ++i) {
        Scalar* dst = table.grad_data() + static_cast<Index>((*ids_copy)[i]) * d;
        const Scalar* src = out.grad_data() + i * d;
        for (Index j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

namespace detail {

inline Index stride_of(const Shape& s, int axis) {
  Index st = 1;
  for (int i = static_cast<int>(s.size()) - 1; i > axis; --i) st *= s[i];
  return st;
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> slice(const Tensor<Scalar>& x, int axis, Index start, Index len) {
  if (axis < 0 || axis >= x.rank()) throw ShapeError("slice: bad axis");
  if (start < 0 || len <= 0 || start + len > x.dim(axis))
    throw ShapeError("slice: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") out of bounds for " + shape_str(x.shape));
  Shape out_shape = x.shape;
  out_shape[axis] = len;
  const Index inner = detail::stride_of(x.shape, axis);
  const Index outer = x.size() / (inner * x.dim(axis));
  Tensor<Scalar> out = x.tape->alloc(out_shape, x.requires_grad);
  for (Index o = 0; o < outer; ++o) {
    const Scalar* src = x.data() + (o * x.dim(axis) + start) * inner;
    std::copy_n(src, len * inner, out.data() + o * len * inner);
  }
  if (out.requires_grad) {
    const Index ax_dim = x.dim(axis);
    x.tape->record([x, out, outer, inner, len, start, ax_dim]() {
      for (Index o = 0; o < outer; ++o) {
        Scalar* dst = x.grad_data() + (o * ax_dim + start) * inner;
        const Scalar* src = out.grad_data() + o * len * inner;
        for (Index i = 0; i < len * inner; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> concatenate(const std::vector<Tensor<Scalar>>& parts, int axis) {
  if (parts.empty()) throw ValueError("concatenate: no operands");
  const Tensor<Scalar>& first = parts.front();
  if (axis < 0 || axis >= first.rank()) throw ShapeError("concatenate: bad axis");
  Shape out_shape = first.shape;
  bool need_grad = false;
  Index ax_total = 0;
  for (const auto& p : parts) {
    if (p.tape != first.tape) throw TapeError("concatenate: operands on different tapes");
    if (p.rank() != first.rank()) throw ShapeError("concatenate: rank mismatch");
    for (int i = 0; i < first.rank(); ++i)
      if (i != axis && p.dim(i) != first.dim(i))
        throw ShapeError("concatenate: shape mismatch at axis " + std::to_string(i));
    ax_total += p.dim(axis);
    need_grad = need_grad || p.requires_grad;
  }
  out_shape[axis] = ax_total;
  const Index inner = detail::stride_of(first.shape, axis);
  const Index outer = first.size() / (inner * first.dim(axis));
  Tensor<Scalar> out = first.tape->alloc(out_shape, need_grad);
  Index offset = 0;
  for (const auto& p : parts) {
    const Index plen = p.dim(axis);
    for (Index o = 0; o < outer; ++o)
      std::copy_n(p.data() + o * plen * inner, plen * inner,
                  out.data() + (o * ax_total + offset) * inner);
    offset += plen;
  }
  if (need_grad) {
    auto parts_copy = std::make_shared<std::vector<Tensor<Scalar>>>(parts);
    first.tape->record([parts_copy, out, outer, inner, ax_total, axis]() {
      (void)axis;
      Index off = 0;
      for (const auto& p : *parts_copy) {
        const Index plen = p.shape[static_cast<std::size_t>(axis)];
        if (p.requires_grad) {
          for (Index o = 0; o < outer; ++o) {
            const Scalar* src = out.grad_data() + (o * ax_total + off) * inner;
            Scalar* dst = p.grad->data() + o * plen * inner;
            for (Index i = 0; i < plen * inner; ++i) dst[i] += src[i];
          }
        }
        off += plen;
      }
    });
  }
  return out;
}

// Shape-only view; no arithmetic, identity backward.
template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, const Shape& new_shape) {
  if (numel(new_shape) != x.size())
    throw ShapeError("reshape: " + shape_str(x.shape) + " -> " + shape_str(new_shape) +
                     " changes element count");
  Tensor<Scalar> out = x.tape->alloc(new_shape, x.requires_grad);
  std::copy(x.values->begin(), x.values->end(), out.values->begin());
  if (out.requires_grad) {
    const Index total = x.size();
    x.tape->record([x, out, total]() {
      for (Index i = 0; i < total; ++i) (*x.grad)[i] += (*out.grad)[i];
    });
  }
  return out;
}

// Mean of all elements, as a [1] tensor. Left-to-right accumulation.
template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x) {
  const Index total = x.size();
  Tensor<Scalar> out = x.tape->alloc({1}, x.requires_grad);
  Scalar acc = 0;
  for (Index i = 0; i < total; ++i) acc += (*x.values)[i];
  (*out.values)[0] = acc / Scalar(total);
  if (out.requires_grad) {
    x.tape->record([x, out, total]() {
      const Scalar g = (*out.grad)[0] / Scalar(total);
      for (Index i = 0; i < total; ++i) (*x.grad)[i] += g;
    });
  }
  return out;
}

// Sum composed from mean and scale.
template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x) {
  return scale(mean(x), Scalar(x.size()));
}

inline constexpr int kIgnoreIndex = -100;

// Mean negative log-softmax probability of the target class over non-ignored
// rows.
template <typename Scalar>
Tensor<Scalar> cross_entropy(const Tensor<Scalar>& logits, const std::vector<int>& targets,
                             int ignore_index = kIgnoreIndex) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be rank 2");
  const Index n = logits.dim(0), c = logits.dim(1);
  if (static_cast<Index>(targets.size()) != n)
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(n) + " rows");
  Index valid = 0;
  for (int t : targets) {
    if (t == ignore_index) continue;
    if (t < 0 || t >= c)
      throw ValueError("cross_entropy: target " + std::to_string(t) + " out of range [0," +
                       std::to_string(c) + ")");
    ++valid;
  }
  if (valid == 0) throw ValueError("cross_entropy: every position is ignored (empty loss)");

  Tensor<Scalar> out = logits.tape->alloc({1}, logits.requires_grad);
  auto probs = std::make_shared<std::vector<Scalar>>(logits.size());
  Scalar loss = 0;
  for (Index i = 0; i < n; ++i) {
    const Scalar* row = logits.data() + i * c;
    Scalar mx = row[0];
    for (Index j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    Scalar denom = 0;
    for (Index j = 0; j < c; ++j) denom += std::exp(row[j] - mx);
    if (targets[i] != ignore_index) {
      const Scalar log_p = row[targets[i]] - mx - std::log(denom);
      loss -= log_p;
    }
    for (Index j = 0; j < c; ++j) (*probs)[i * c + j] = std::exp(row[j] - mx) / denom;
  }
  (*out.values)[0] = loss / Scalar(valid);
  if (out.requires_grad) {
    auto targets_copy = std::make_shared<std::vector<int>>(targets);
    logits.tape->record([logits, out, probs, targets_copy, n, c, valid, ignore_index]() {
      const Scalar g = (*out.grad)[0] / Scalar(valid);
      for (Index i = 0; i < n; ++i) {
        const int t = (*targets_copy)[i];
        if (t == ignore_index) continue;
        for (Index j = 0; j < c; ++j) {
          Scalar delta = (*probs)[i * c + j];
          if (j == t) delta -= Scalar(1);
          (*logits.grad)[i * c + j] += g * delta;
        }
      }
    });
  }
  return out;
}

// Elementwise max; at ties the gradient flows to the first operand.
template <typename Scalar>
Tensor<Scalar> elementwise_max(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  Tape<Scalar>* tape = detail::common_tape(a, b);
  if (a.shape != b.shape)
    throw ShapeError("elementwise_max: shape mismatch " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape));
  Tensor<Scalar> out = tape->alloc(a.shape, a.requires_grad || b.requires_grad);
  const Index total = a.size();
  for (Index i = 0; i < total; ++i)
    (*out.values)[i] = std::max((*a.values)[i], (*b.values)[i]);
  if (out.requires_grad) {
    tape->record([a, b, out, total]() {
      for (Index i = 0; i < total; ++i) {
        const bool from_a = (*a.values)[i] >= (*b.values)[i];
        if (from_a && a.requires_grad) (*a.grad)[i] += (*out.grad)[i];
        if (!from_a && b.requires_grad) (*b.grad)[i] += (*out.grad)[i];
      }
    });
  }
  return out;
}

}  // namespace lce
