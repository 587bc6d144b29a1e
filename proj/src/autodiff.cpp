#include "maskft/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "maskft/simd/kernels.hpp"

namespace maskft::ad {

// ---------------------------------------------------------------------------
// Var / Tape

const Tensor& Var::value() const { return tape->value(*this); }
bool Var::needs_grad() const { return tape->needs_grad(*this); }

Tape::Node& Tape::node(Var v) {
  if (v.tape != this || v.id >= nodes_.size()) throw std::invalid_argument("Var does not belong to this tape");
  return nodes_[v.id];
}

const Tape::Node& Tape::node(Var v) const {
  if (v.tape != this || v.id >= nodes_.size()) throw std::invalid_argument("Var does not belong to this tape");
  return nodes_[v.id];
}

Var Tape::leaf(Tensor value) {
  if (consumed_) throw std::logic_error("tape already consumed by backward()");
  Node& n = nodes_.emplace_back();
  n.needs_grad = value.requires_grad();
  n.owned = std::move(value);
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::constant(Tensor value) {
  value.set_requires_grad(false);
  return leaf(std::move(value));
}

Var Tape::param(Tensor& external) {
  if (consumed_) throw std::logic_error("tape already consumed by backward()");
  Node& n = nodes_.emplace_back();
  n.external = &external;
  n.grad_sink = &external;
  n.needs_grad = external.requires_grad();
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::view(const Tensor& external) {
  if (consumed_) throw std::logic_error("tape already consumed by backward()");
  Node& n = nodes_.emplace_back();
  n.external = &external;
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::record(Tensor out, std::initializer_list<Var> inputs, BackwardFn fn) {
  return record(std::move(out), std::vector<Var>(inputs), std::move(fn));
}

Var Tape::record(Tensor out, const std::vector<Var>& inputs, BackwardFn fn) {
  if (consumed_) throw std::logic_error("tape already consumed by backward()");
  bool any = false;
  std::vector<std::uint32_t> ids;
  ids.reserve(inputs.size());
  for (Var in : inputs) {
    any = any || node(in).needs_grad;
    ids.push_back(in.id);
  }
  Node& n = nodes_.emplace_back();
  n.owned = std::move(out);
  n.owned.set_requires_grad(any);
  n.needs_grad = any && static_cast<bool>(fn);
  n.inputs = std::move(ids);
  if (n.needs_grad) n.backward = std::move(fn);
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Tensor& Tape::value(Var v) const { return node(v).value(); }
bool Tape::needs_grad(Var v) const { return node(v).needs_grad; }

double* Tape::grad_buffer(Var v) {
  Node& n = node(v);
  if (!n.needs_grad) return nullptr;
  if (n.grad.empty()) n.grad.assign(n.value().size(), 0.0);
  return n.grad.data();
}

std::span<const double> Tape::grad(Var v) const {
  const Node& n = node(v);
  return n.grad;
}

void Tape::backward(Var loss) {
  if (consumed_) throw std::logic_error("backward() called twice on the same tape");
  Node& root = node(loss);
  if (root.value().size() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(root.value().shape()));
  }
  if (!root.needs_grad) throw std::logic_error("loss does not depend on any differentiable leaf");
  consumed_ = true;
  root.grad.assign(1, 1.0);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, n.grad);
  }
  for (Node& n : nodes_) {
    if (n.grad_sink && n.needs_grad && !n.grad.empty()) n.grad_sink->accumulate_grad(n.grad);
  }
}

// ---------------------------------------------------------------------------
// helpers

namespace {

void same_tape(Var a, Var b) {
  if (a.tape != b.tape || a.tape == nullptr) throw std::invalid_argument("operands live on different tapes");
}

[[noreturn]] void mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

// Calls fn(out_index, a_index, b_index) in increasing out_index order.
template <class Fn>
void for_each_broadcast(const Shape& out, const Shape& as, const Shape& bs, Fn&& fn) {
  const std::size_t r = out.size();
  std::vector<std::size_t> sa(r, 0), sb(r, 0);
  auto strides = [r](const Shape& s, std::vector<std::size_t>& st) {
    std::size_t stride = 1;
    for (std::size_t k = 0; k < s.size(); ++k) {
      const std::size_t d = s[s.size() - 1 - k];
      st[r - 1 - k] = d == 1 ? 0 : stride;
      stride *= d;
    }
  };
  strides(as, sa);
  strides(bs, sb);
  std::vector<std::size_t> idx(r, 0);
  const std::size_t total = shape_numel(out);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < total; ++o) {
    fn(o, ia, ib);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

// True when `small` equals the trailing dims of `big`.
bool is_suffix(const Shape& big, const Shape& small) {
  if (small.size() > big.size()) return false;
  return std::equal(small.begin(), small.end(), big.end() - static_cast<std::ptrdiff_t>(small.size()));
}

struct AxisView {
  std::size_t outer, dim, inner;
};

AxisView axis_view(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisView v{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

std::size_t last_dim(const Shape& s, const char* op) {
  if (s.empty() || s.back() == 0) throw ShapeError(std::string(op) + ": empty last axis");
  return s.back();
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t k = 0; k < r; ++k) {
    const std::size_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
    const std::size_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (da != db && da != 1 && db != 1) mismatch("broadcast", a, b);
    out[r - 1 - k] = std::max(da, db);
  }
  return out;
}

Tensor transpose_copy(const Tensor& m) {
  if (m.rank() != 2) throw ShapeError("transpose needs a 2-D tensor, got " + shape_str(m.shape()));
  const std::size_t r = m.dim(0), c = m.dim(1);
  Tensor out(Shape{c, r});
  const double* src = m.data().data();
  double* dst = out.data().data();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) dst[j * r + i] = src[i * c + j];
  }
  return out;
}

// ---------------------------------------------------------------------------
// ops

Var matmul(Var a, Var b) {
  same_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0)) mismatch("matmul", A.shape(), B.shape());
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  Tensor out(Shape{m, n});
  simd::active().gemm(m, n, k, A.data().data(), B.data().data(), out.data().data(), false);
  return a.tape->record(std::move(out), {a, b}, [a, b, m, k, n](Tape& t, std::span<const double> g) {
    const auto& K = simd::active();
    if (double* ga = t.grad_buffer(a)) {
      // dA = G * B^T
      const Tensor bt = transpose_copy(b.value());
      K.gemm(m, k, n, g.data(), bt.data().data(), ga, true);
    }
    if (double* gb = t.grad_buffer(b)) {
      // dB = A^T * G
      const Tensor at = transpose_copy(a.value());
      K.gemm(k, n, m, at.data().data(), g.data(), gb, true);
    }
  });
}

namespace {

enum class Binary { add, sub, mul };

Var binary(Var a, Var b, Binary kind) {
  same_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const char* name = kind == Binary::mul ? "multiply" : (kind == Binary::add ? "add" : "sub");
  Shape out_shape;
  try {
    out_shape = broadcast_shape(A.shape(), B.shape());
  } catch (const ShapeError&) {
    mismatch(name, A.shape(), B.shape());
  }
  const auto& K = simd::active();
  Tensor out(out_shape);
  double* o = out.data().data();
  const double* pa = A.data().data();
  const double* pb = B.data().data();
  const bool same = A.shape() == B.shape();
  const bool rows_b = !same && A.shape() == out_shape && is_suffix(A.shape(), B.shape());
  if (same) {
    if (kind == Binary::add) K.add(A.size(), pa, pb, o);
    else if (kind == Binary::mul) K.mul(A.size(), pa, pb, o);
    else for (std::size_t i = 0; i < A.size(); ++i) o[i] = pa[i] - pb[i];
  } else if (rows_b && kind != Binary::sub) {
    const std::size_t w = B.size();
    for (std::size_t r = 0; r < A.size() / w; ++r) {
      if (kind == Binary::add) K.add(w, pa + r * w, pb, o + r * w);
      else K.mul(w, pa + r * w, pb, o + r * w);
    }
  } else {
    for_each_broadcast(out_shape, A.shape(), B.shape(), [&](std::size_t i, std::size_t ia, std::size_t ib) {
      switch (kind) {
        case Binary::add: o[i] = pa[ia] + pb[ib]; break;
        case Binary::sub: o[i] = pa[ia] - pb[ib]; break;
        case Binary::mul: o[i] = pa[ia] * pb[ib]; break;
      }
    });
  }
  return a.tape->record(std::move(out), {a, b},
                        [a, b, kind, same, rows_b, out_shape](Tape& t, std::span<const double> g) {
    const auto& K = simd::active();
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    double* ga = t.grad_buffer(a);
    double* gb = t.grad_buffer(b);
    if (same) {
      const std::size_t n = g.size();
      if (kind == Binary::mul) {
        if (ga) K.mul_acc(n, g.data(), B.data().data(), ga);
        if (gb) K.mul_acc(n, g.data(), A.data().data(), gb);
      } else {
        if (ga) K.accumulate(n, g.data(), ga);
        if (gb) {
          if (kind == Binary::add) K.accumulate(n, g.data(), gb);
          else for (std::size_t i = 0; i < n; ++i) gb[i] = gb[i] - g[i];
        }
      }
      return;
    }
    if (rows_b && kind != Binary::sub) {
      const std::size_t w = B.size();
      const std::size_t rows = A.size() / w;
      for (std::size_t r = 0; r < rows; ++r) {
        const double* gr = g.data() + r * w;
        if (kind == Binary::mul) {
          if (ga) K.mul_acc(w, gr, B.data().data(), ga + r * w);
          if (gb) K.mul_acc(w, gr, A.data().data() + r * w, gb);
        } else {
          if (ga) K.accumulate(w, gr, ga + r * w);
          if (gb) K.accumulate(w, gr, gb);
        }
      }
      return;
    }
    const double* pa = A.data().data();
    const double* pb = B.data().data();
    for_each_broadcast(out_shape, A.shape(), B.shape(), [&](std::size_t i, std::size_t ia, std::size_t ib) {
      switch (kind) {
        case Binary::add:
          if (ga) ga[ia] = ga[ia] + g[i];
          if (gb) gb[ib] = gb[ib] + g[i];
          break;
        case Binary::sub:
          if (ga) ga[ia] = ga[ia] + g[i];
          if (gb) gb[ib] = gb[ib] - g[i];
          break;
        case Binary::mul:
          if (ga) ga[ia] = ga[ia] + g[i] * pb[ib];
          if (gb) gb[ib] = gb[ib] + g[i] * pa[ia];
          break;
      }
    });
  });
}

}  // namespace

Var add(Var a, Var b) { return binary(a, b, Binary::add); }
Var sub(Var a, Var b) { return binary(a, b, Binary::sub); }
Var multiply(Var a, Var b) { return binary(a, b, Binary::mul); }

Var scale(Var a, double s) {
  const Tensor& A = a.value();
  Tensor out(A.shape());
  simd::active().scale(A.size(), s, A.data().data(), out.data().data());
  return a.tape->record(std::move(out), {a}, [a, s](Tape& t, std::span<const double> g) {
    if (double* ga = t.grad_buffer(a)) simd::active().axpy(g.size(), s, g.data(), ga);
  });
}

Var sum(Var a) {
  const Tensor& A = a.value();
  double acc = 0.0;
  for (double v : A.data()) acc += v;
  return a.tape->record(Tensor::scalar(acc), {a}, [a](Tape& t, std::span<const double> g) {
    if (double* ga = t.grad_buffer(a)) {
      const double g0 = g[0];
      for (std::size_t i = 0; i < a.size(); ++i) ga[i] = ga[i] + g0;
    }
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Var embedding(Var table, std::span<const int> ids) {
  const Tensor& T = table.value();
  if (T.rank() != 2) throw ShapeError("embedding table must be 2-D, got " + shape_str(T.shape()));
  if (ids.empty()) throw ShapeError("embedding: empty id list");
  const std::size_t vocab = T.dim(0), d = T.dim(1);
  Tensor out(Shape{ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw std::out_of_range("embedding: id " + std::to_string(ids[i]) + " outside vocabulary of " +
                              std::to_string(vocab));
    }
    std::copy_n(T.data().data() + static_cast<std::size_t>(ids[i]) * d, d, out.data().data() + i * d);
  }
  std::vector<int> saved(ids.begin(), ids.end());
  return table.tape->record(std::move(out), {table},
                            [table, saved = std::move(saved), d](Tape& t, std::span<const double> g) {
    if (double* gt = t.grad_buffer(table)) {
      for (std::size_t i = 0; i < saved.size(); ++i) {
        simd::active().accumulate(d, g.data() + i * d, gt + static_cast<std::size_t>(saved[i]) * d);
      }
    }
  });
}

namespace {

// Softmax of row[0..n) into out; entries [n, width) are zeroed.
void softmax_row(const double* row, std::size_t n, std::size_t width, double* out) {
  double mx = row[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
  double z = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    out[j] = std::exp(row[j] - mx);
    z += out[j];
  }
  const double inv = 1.0 / z;
  for (std::size_t j = 0; j < n; ++j) out[j] *= inv;
  for (std::size_t j = n; j < width; ++j) out[j] = 0.0;
}

Var softmax_impl(Var a, bool causal) {
  const Tensor& A = a.value();
  const std::size_t w = last_dim(A.shape(), causal ? "causal_softmax" : "softmax");
  const std::size_t rows = A.size() / w;
  if (causal && (A.rank() != 2 || A.dim(0) != A.dim(1))) {
    throw ShapeError("causal_softmax needs a square matrix, got " + shape_str(A.shape()));
  }
  Tensor out(A.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    softmax_row(A.data().data() + r * w, causal ? r + 1 : w, w, out.data().data() + r * w);
  }
  if (!a.needs_grad()) return a.tape->record(std::move(out), {a}, {});
  Tensor saved = out;
  return a.tape->record(std::move(out), {a}, [a, w, rows, causal, yv = std::move(saved)](Tape& t, std::span<const double> g) {
    double* ga = t.grad_buffer(a);
    if (!ga) return;
    const double* y = yv.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t n = causal ? r + 1 : w;
      const double* yr = y + r * w;
      const double* gr = g.data() + r * w;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
      for (std::size_t j = 0; j < n; ++j) ga[r * w + j] = ga[r * w + j] + yr[j] * (gr[j] - dot);
    }
  });
}

}  // namespace

Var softmax(Var a) { return softmax_impl(a, false); }
Var causal_softmax(Var a) { return softmax_impl(a, true); }

Var rms_norm(Var a, double eps) {
  const Tensor& A = a.value();
  const std::size_t w = last_dim(A.shape(), "rms_norm");
  const std::size_t rows = A.size() / w;
  Tensor out(A.shape());
  std::vector<double> inv_rms(rows);
  const double* x = A.data().data();
  double* y = out.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t j = 0; j < w; ++j) ss += x[r * w + j] * x[r * w + j];
    inv_rms[r] = 1.0 / std::sqrt(ss / static_cast<double>(w) + eps);
    simd::active().scale(w, inv_rms[r], x + r * w, y + r * w);
  }
  return a.tape->record(std::move(out), {a},
                        [a, w, rows, inv_rms = std::move(inv_rms)](Tape& t, std::span<const double> g) {
    double* ga = t.grad_buffer(a);
    if (!ga) return;
    const double* x = a.value().data().data();
    const double n = static_cast<double>(w);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* xr = x + r * w;
      const double* gr = g.data() + r * w;
      double dot = 0.0;
      for (std::size_t j = 0; j < w; ++j) dot += gr[j] * xr[j];
      const double ir = inv_rms[r];
      const double coef = ir * ir * ir * dot / n;
      for (std::size_t j = 0; j < w; ++j) ga[r * w + j] = ga[r * w + j] + (ir * gr[j] - coef * xr[j]);
    }
  });
}

Var gelu(Var a) {
  const Tensor& A = a.value();
  Tensor out(A.shape());
  const double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
  for (std::size_t i = 0; i < A.size(); ++i) {
    const double x = A[i];
    out[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
  }
  return a.tape->record(std::move(out), {a}, [a, inv_sqrt2](Tape& t, std::span<const double> g) {
    double* ga = t.grad_buffer(a);
    if (!ga) return;
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    const Tensor& A = a.value();
    for (std::size_t i = 0; i < A.size(); ++i) {
      const double x = A[i];
      const double d = 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * std::exp(-0.5 * x * x) * inv_sqrt_2pi;
      ga[i] = ga[i] + g[i] * d;
    }
  });
}

Var transpose(Var a) {
  Tensor out = transpose_copy(a.value());
  const std::size_t r = a.value().dim(0), c = a.value().dim(1);
  return a.tape->record(std::move(out), {a}, [a, r, c](Tape& t, std::span<const double> g) {
    double* ga = t.grad_buffer(a);
    if (!ga) return;
    // g is [c, r]
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] = ga[i * c + j] + g[j * r + i];
    }
  });
}

Var reshape(Var a, Shape shape) {
  if (shape_numel(shape) != a.size()) mismatch("reshape", a.shape(), shape);
  Tensor out(std::move(shape), a.value().values());
  return a.tape->record(std::move(out), {a}, [a](Tape& t, std::span<const double> g) {
    if (double* ga = t.grad_buffer(a)) simd::active().accumulate(g.size(), g.data(), ga);
  });
}

Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Tensor& A = a.value();
  const AxisView v = axis_view(A.shape(), axis);
  if (begin >= end || end > v.dim) {
    throw ShapeError("slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of range on axis " +
                     std::to_string(axis) + " of " + shape_str(A.shape()));
  }
  Shape s = A.shape();
  s[axis] = end - begin;
  Tensor out(s);
  const std::size_t chunk = (end - begin) * v.inner;
  for (std::size_t o = 0; o < v.outer; ++o) {
    std::copy_n(A.data().data() + (o * v.dim + begin) * v.inner, chunk, out.data().data() + o * chunk);
  }
  return a.tape->record(std::move(out), {a}, [a, v, begin, chunk](Tape& t, std::span<const double> g) {
    double* ga = t.grad_buffer(a);
    if (!ga) return;
    for (std::size_t o = 0; o < v.outer; ++o) {
      simd::active().accumulate(chunk, g.data() + o * chunk, ga + (o * v.dim + begin) * v.inner);
    }
  });
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& first = parts[0].shape();
  std::vector<std::size_t> dims;
  std::size_t total = 0;
  for (Var p : parts) {
    same_tape(parts[0], p);
    const Shape& s = p.shape();
    if (s.size() != first.size()) mismatch("concat", first, s);
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != first[i]) mismatch("concat", first, s);
    }
    dims.push_back(axis_view(s, axis).dim);
    total += dims.back();
  }
  Shape s = first;
  s[axis] = total;
  Tensor out(s);
  const AxisView v = axis_view(s, axis);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const double* src = parts[k].value().data().data();
    const std::size_t chunk = dims[k] * v.inner;
    for (std::size_t o = 0; o < v.outer; ++o) {
      std::copy_n(src + o * chunk, chunk, out.data().data() + (o * v.dim + offset) * v.inner);
    }
    offset += dims[k];
  }
  return parts[0].tape->record(std::move(out), parts, [parts, dims, v](Tape& t, std::span<const double> g) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const std::size_t chunk = dims[k] * v.inner;
      if (double* gp = t.grad_buffer(parts[k])) {
        for (std::size_t o = 0; o < v.outer; ++o) {
          simd::active().accumulate(chunk, g.data() + (o * v.dim + offset) * v.inner, gp + o * chunk);
        }
      }
      offset += dims[k];
    }
  });
}

Var cross_entropy(Var logits, std::span<const int> targets) {
  const Tensor& Z = logits.value();
  if (Z.rank() != 2) throw ShapeError("cross_entropy needs [n, V] logits, got " + shape_str(Z.shape()));
  const std::size_t n = Z.dim(0), vocab = Z.dim(1);
  if (targets.size() != n) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_str(Z.shape()));
  }
  Tensor probs(Z.shape());
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const int tgt = targets[r];
    if (tgt < 0 || static_cast<std::size_t>(tgt) >= vocab) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(tgt) + " outside [0, " +
                              std::to_string(vocab) + ")");
    }
    const double* z = Z.data().data() + r * vocab;
    double* p = probs.data().data() + r * vocab;
    double mx = z[0];
    for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, z[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) {
      p[j] = std::exp(z[j] - mx);
      s += p[j];
    }
    loss += (std::log(s) + mx) - z[tgt];
    const double inv = 1.0 / s;
    for (std::size_t j = 0; j < vocab; ++j) p[j] *= inv;
  }
  loss /= static_cast<double>(n);
  std::vector<int> saved(targets.begin(), targets.end());
  return logits.tape->record(
      Tensor::scalar(loss), {logits},
      [logits, n, vocab, probs = std::move(probs), saved = std::move(saved)](Tape& t, std::span<const double> g) {
        double* gz = t.grad_buffer(logits);
        if (!gz) return;
        const double s = g[0] / static_cast<double>(n);
        for (std::size_t r = 0; r < n; ++r) {
          const double* p = probs.data().data() + r * vocab;
          double* gr = gz + r * vocab;
          for (std::size_t j = 0; j < vocab; ++j) gr[j] = gr[j] + s * p[j];
          gr[saved[r]] = gr[saved[r]] - s;
        }
      });
}

}  // namespace maskft::ad
