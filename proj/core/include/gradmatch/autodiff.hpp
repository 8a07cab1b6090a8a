#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// Every backward rule is written in terms of the differentiable ops declared
// below, so running a backward pass with create_graph=true yields gradient
// nodes that can be differentiated again (reverse-over-reverse). This is what
// makes the meta-gradient of a gradient-matching loss with respect to the
// synthetic images computable.
//
// A graph and its nodes belong to one thread. Grad mode and precision mode are
// thread-local.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "gradmatch/tensor.hpp"

namespace gradmatch::ad {

enum class Precision : std::uint8_t { f64 = 64, f32 = 32 };

namespace detail {
struct Node;
struct Access;
}  // namespace detail

// Handle to an immutable graph node. Copies share the node.
class Var {
 public:
  Var() = default;
  // Leaf node.
  explicit Var(Tensor value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t numel() const { return value().numel(); }
  double item() const { return value().item(); }
  bool requires_grad() const noexcept;
  bool is_leaf() const noexcept;
  // Name of the op that produced this node ("leaf" for leaves).
  const std::string& op_name() const;
  // Parents recorded for differentiation (empty for leaves and constants).
  std::vector<Var> parents() const;

  // Same value, cut from the graph.
  Var detach() const { return Var(value(), false); }

  // Node identity, usable as a map key.
  const void* id() const noexcept { return node_.get(); }

 private:
  friend struct detail::Access;
  explicit Var(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

// Backward rule: given the upstream gradient and a mask of which parents need
// a gradient, return one Var per parent (undefined where not needed).
using BackwardFn = std::function<std::vector<Var>(const Var& grad_out, const std::vector<bool>& needed)>;

struct Node {
  Tensor value;
  bool requires_grad = false;
  std::string op = "leaf";
  std::vector<Var> parents;
  BackwardFn backward;
};

struct Access {
  static const std::shared_ptr<Node>& node(const Var& v) { return v.node_; }
  static Var wrap(std::shared_ptr<Node> n) { return Var(std::move(n)); }
};

// Builds an op output. Records parents and the backward rule only when grad
// mode is on and some input requires a gradient. Throws NumericError when the
// value is non-finite.
Var make_result(std::string op, Tensor value, std::vector<Var> inputs, BackwardFn backward);

}  // namespace detail

// ---- grad mode / precision -------------------------------------------------

bool grad_enabled() noexcept;

// Disables graph recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

Precision precision() noexcept;

class PrecisionGuard {
 public:
  explicit PrecisionGuard(Precision p);
  ~PrecisionGuard();
  PrecisionGuard(const PrecisionGuard&) = delete;
  PrecisionGuard& operator=(const PrecisionGuard&) = delete;

 private:
  Precision previous_;
};

// ---- differentiation -------------------------------------------------------

// d output / d input for each input. With create_graph the returned nodes
// are themselves differentiable.
std::vector<Var> grad(const Var& output, std::span<const Var> inputs, bool create_graph = false);

// ---- elementwise -----------------------------------------------------------

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double factor);
Var add_scalar(const Var& a, double value);
// Elementwise max(a, floor); the derivative is 0 where the floor is active.
Var clamp_min(const Var& a, double floor);
// relu'(0) is 0.
Var relu(const Var& a);
// sqrt'(0) is taken as 0 so that zero-distance rows do not produce NaN.
Var sqrt(const Var& a);
// 1/a where a != 0, 0 where a == 0.
Var reciprocal_or_zero(const Var& a);

// a * s for a scalar node s.
Var mul_scalar(const Var& a, const Var& s);

// ---- shape -----------------------------------------------------------------

Var reshape(const Var& a, Shape shape);
// [N, ...] -> [N, prod(...)]
Var flatten(const Var& a);
Var transpose(const Var& a);
// Scalar -> tensor of the given shape filled with it.
Var broadcast_scalar(const Var& s, Shape shape);
// [C] -> shape with C at axis 1 ([N, C] or [N, C, H, W]).
Var expand_channel(const Var& bias, Shape shape);
// Inverse adjoint of expand_channel: sums everything except axis 1.
Var reduce_channel(const Var& a);
// x + b with b broadcast along axis 1.
Var bias_add(const Var& x, const Var& bias);

// ---- reductions ------------------------------------------------------------

Var sum(const Var& a);
Var mean(const Var& a);
// [r, k] -> [r]
Var row_sum(const Var& a);
// [r] -> [r, k]
Var expand_rows(const Var& v, std::size_t cols);
// Row-wise inner products of two [r, k] matrices.
Var row_dot(const Var& a, const Var& b);
// Row-wise Euclidean norms of an [r, k] matrix.
Var l2_norm_rows(const Var& a);

// ---- linear algebra / convolution -----------------------------------------

Var matmul(const Var& a, const Var& b);

struct Conv2dGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

// Direct cross-correlation. input [N, Cin, H, W], kernel [Cout, Cin, kh, kw].
Var conv2d(const Var& input, const Var& kernel, Conv2dGeometry geo = {});
// Adjoints of conv2d, exposed because they are themselves differentiated in
// double-backward passes.
Var conv2d_input_grad(const Var& grad_out, const Var& kernel, Conv2dGeometry geo, const Shape& input_shape);
Var conv2d_weight_grad(const Var& input, const Var& grad_out, Conv2dGeometry geo, const Shape& kernel_shape);

// Non-overlapping window x window average pooling (floor on ragged edges).
Var avg_pool2d(const Var& input, std::size_t window);
Var avg_pool2d_grad(const Var& grad_out, std::size_t window, const Shape& input_shape);

// ---- classification --------------------------------------------------------

Var softmax_rows(const Var& logits);
// Mean over the batch of -log softmax(logits)[label].
Var softmax_cross_entropy(const Var& logits, std::span<const int> labels);

// ---- finite differences (test oracle) -------------------------------------

// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every entry.
Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double h = 1e-5);

}  // namespace gradmatch::ad
