#pragma once
// Tape-based reverse-mode automatic differentiation over maskft::Tensor.
//
// A Tape owns the nodes of one forward evaluation. Leaves either own their
// value or reference an external Tensor (model parameters); gradients of
// external leaves are accumulated into that tensor's grad slot by backward().
// A tape can be differentiated once.

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "maskft/tensor.hpp"

namespace maskft::ad {

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::uint32_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  bool needs_grad() const;
};

class Tape {
 public:
  // Called once during backward with the output gradient.
  using BackwardFn = std::function<void(Tape&, std::span<const double> grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf owning a copy of `value`; differentiable iff value.requires_grad().
  Var leaf(Tensor value);
  /// Leaf that is never differentiated.
  Var constant(Tensor value);
  /// Leaf referencing an external tensor; gradients are accumulated into its
  /// grad slot when it requires_grad. The tensor must outlive the tape.
  Var param(Tensor& external);
  /// Read-only, never differentiated reference to an external tensor.
  Var view(const Tensor& external);

  /// Records an op result. `fn` may be empty when no input needs a gradient.
  Var record(Tensor out, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(Tensor out, const std::vector<Var>& inputs, BackwardFn fn);

  const Tensor& value(Var v) const;
  bool needs_grad(Var v) const;

  /// Gradient buffer for `v`, zero-filled on first access; nullptr when `v`
  /// does not need a gradient. Only meaningful inside a BackwardFn.
  double* grad_buffer(Var v);

  /// Gradient of the last backward() with respect to `v` (empty if none).
  std::span<const double> grad(Var v) const;

  void backward(Var loss);
  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    Tensor* grad_sink = nullptr;
    std::vector<std::uint32_t> inputs;
    BackwardFn backward;
    std::vector<double> grad;
    bool needs_grad = false;

    const Tensor& value() const { return external ? *external : owned; }
  };

  Node& node(Var v);
  const Node& node(Var v) const;

  std::deque<Node> nodes_;
  bool consumed_ = false;
};

// ---------------------------------------------------------------------------
// Op set. Every op checks that its inputs live on the same tape.

Var matmul(Var a, Var b);                 // [m,k] x [k,n]
Var add(Var a, Var b);                    // numpy broadcasting
Var sub(Var a, Var b);                    // numpy broadcasting
Var multiply(Var a, Var b);               // elementwise, numpy broadcasting
Var scale(Var a, double s);
Var sum(Var a);                           // -> [1]
Var mean(Var a);                          // -> [1]
Var embedding(Var table, std::span<const int> ids);  // [V,d] -> [n,d]
Var softmax(Var a);                       // last axis
Var causal_softmax(Var a);                // [T,T]; row i normalizes over columns <= i
Var rms_norm(Var a, double eps = 1e-6);   // last axis
Var gelu(Var a);                          // exact erf form
Var transpose(Var a);                     // 2-D
Var reshape(Var a, Shape shape);
Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end);
Var concat(const std::vector<Var>& parts, std::size_t axis);
// Mean over rows of -log softmax(logits)[row, target[row]]. logits [n,V].
Var cross_entropy(Var logits, std::span<const int> targets);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return multiply(a, b); }

// Helpers shared with kernels outside this module.
Shape broadcast_shape(const Shape& a, const Shape& b);
Tensor transpose_copy(const Tensor& m);

}  // namespace maskft::ad
