#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "gradmatch/autodiff.hpp"
#include "gradmatch/errors.hpp"

namespace gradmatch::ad {

using detail::make_result;

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

void require_same_shape(const char* op, const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

void require_rank(const char* op, const Var& a, std::size_t rank) {
  if (a.value().rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         to_string(a.shape()));
  }
}

template <typename F>
Tensor map_unary(const Tensor& a, F f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = f(a[i]);
  return out;
}

template <typename F>
Tensor map_binary(const Tensor& a, const Tensor& b, F f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

std::vector<Var> unary(Var g) { return {std::move(g)}; }

}  // namespace

// ---- elementwise -----------------------------------------------------------

Var add(const Var& a, const Var& b) {
  require_same_shape("add", a, b);
  return make_result("add", map_binary(a.value(), b.value(), std::plus<>()), {a, b},
                     [](const Var& g, const std::vector<bool>&) { return std::vector<Var>{g, g}; });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape("sub", a, b);
  return make_result("sub", map_binary(a.value(), b.value(), std::minus<>()), {a, b},
                     [](const Var& g, const std::vector<bool>& need) {
                       return std::vector<Var>{g, need[1] ? neg(g) : Var()};
                     });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape("mul", a, b);
  return make_result("mul", map_binary(a.value(), b.value(), std::multiplies<>()), {a, b},
                     [a, b](const Var& g, const std::vector<bool>& need) {
                       return std::vector<Var>{need[0] ? mul(g, b) : Var(), need[1] ? mul(g, a) : Var()};
                     });
}

Var div(const Var& a, const Var& b) {
  require_same_shape("div", a, b);
  return make_result("div", map_binary(a.value(), b.value(), std::divides<>()), {a, b},
                     [a, b](const Var& g, const std::vector<bool>& need) {
                       Var ga = need[0] ? div(g, b) : Var();
                       Var gb = need[1] ? neg(div(mul(g, a), mul(b, b))) : Var();
                       return std::vector<Var>{ga, gb};
                     });
}

Var neg(const Var& a) {
  return make_result("neg", map_unary(a.value(), std::negate<>()), {a},
                     [](const Var& g, const std::vector<bool>&) { return unary(neg(g)); });
}

Var scale(const Var& a, double factor) {
  return make_result("scale", map_unary(a.value(), [factor](double x) { return x * factor; }), {a},
                     [factor](const Var& g, const std::vector<bool>&) { return unary(scale(g, factor)); });
}

Var add_scalar(const Var& a, double value) {
  return make_result("add_scalar", map_unary(a.value(), [value](double x) { return x + value; }), {a},
                     [](const Var& g, const std::vector<bool>&) { return unary(g); });
}

Var clamp_min(const Var& a, double floor) {
  Tensor mask = map_unary(a.value(), [floor](double x) { return x > floor ? 1.0 : 0.0; });
  return make_result("clamp_min", map_unary(a.value(), [floor](double x) { return std::max(x, floor); }), {a},
                     [mask = Var(std::move(mask))](const Var& g, const std::vector<bool>&) {
                       return unary(mul(g, mask));
                     });
}

Var relu(const Var& a) {
  Tensor mask = map_unary(a.value(), [](double x) { return x > 0.0 ? 1.0 : 0.0; });
  return make_result("relu", map_unary(a.value(), [](double x) { return x > 0.0 ? x : 0.0; }), {a},
                     [mask = Var(std::move(mask))](const Var& g, const std::vector<bool>&) {
                       return unary(mul(g, mask));
                     });
}

Var sqrt(const Var& a) {
  for (double v : a.value().data()) {
    if (v < 0.0) throw NumericError("sqrt: negative input " + std::to_string(v));
  }
  return make_result("sqrt", map_unary(a.value(), [](double x) { return std::sqrt(x); }), {a},
                     [a](const Var& g, const std::vector<bool>&) {
                       return unary(scale(mul(g, reciprocal_or_zero(sqrt(a))), 0.5));
                     });
}

Var reciprocal_or_zero(const Var& a) {
  return make_result("reciprocal_or_zero", map_unary(a.value(), [](double x) { return x != 0.0 ? 1.0 / x : 0.0; }),
                     {a}, [a](const Var& g, const std::vector<bool>&) {
                       Var r = reciprocal_or_zero(a);
                       return unary(neg(mul(g, mul(r, r))));
                     });
}

Var mul_scalar(const Var& a, const Var& s) { return mul(a, broadcast_scalar(s, a.shape())); }

// ---- shape -----------------------------------------------------------------

Var reshape(const Var& a, Shape shape) {
  Shape original = a.shape();
  return make_result("reshape", a.value().reshaped(std::move(shape)), {a},
                     [original](const Var& g, const std::vector<bool>&) { return unary(reshape(g, original)); });
}

Var flatten(const Var& a) {
  if (a.value().rank() < 1) throw DimensionError("flatten: scalar input");
  const std::size_t n = a.shape()[0];
  return reshape(a, Shape{n, n == 0 ? 0 : a.numel() / n});
}

Var transpose(const Var& a) {
  require_rank("transpose", a, 2);
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  Tensor out(Shape{c, r});
  MatrixMap(out.raw(), c, r) = ConstMatrixMap(a.value().raw(), r, c).transpose();
  return make_result("transpose", std::move(out), {a},
                     [](const Var& g, const std::vector<bool>&) { return unary(transpose(g)); });
}

Var broadcast_scalar(const Var& s, Shape shape) {
  if (s.numel() != 1) throw DimensionError("broadcast_scalar: input of shape " + to_string(s.shape()));
  Shape original = s.shape();
  Tensor out(std::move(shape), s.item());
  return make_result("broadcast_scalar", std::move(out), {s},
                     [original](const Var& g, const std::vector<bool>&) { return unary(reshape(sum(g), original)); });
}

Var expand_channel(const Var& bias, Shape shape) {
  require_rank("expand_channel", bias, 1);
  if (shape.size() < 2 || shape[1] != bias.shape()[0]) {
    throw DimensionError("expand_channel: bias " + to_string(bias.shape()) + " does not fit " + to_string(shape));
  }
  const std::size_t n = shape[0], c = shape[1];
  const std::size_t inner = c == 0 || n == 0 ? 0 : numel(shape) / (n * c);
  Tensor out(shape);
  const Tensor& b = bias.value();
  double* o = out.raw();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      std::fill_n(o, inner, b[ch]);
      o += inner;
    }
  return make_result("expand_channel", std::move(out), {bias},
                     [](const Var& g, const std::vector<bool>&) { return unary(reduce_channel(g)); });
}

Var reduce_channel(const Var& a) {
  if (a.value().rank() < 2) throw DimensionError("reduce_channel: rank < 2, shape " + to_string(a.shape()));
  const Shape shape = a.shape();
  const std::size_t n = shape[0], c = shape[1];
  const std::size_t inner = c == 0 || n == 0 ? 0 : a.numel() / (n * c);
  Tensor out(Shape{c}, 0.0);
  const double* x = a.value().raw();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t k = 0; k < inner; ++k) s += x[k];
      out[ch] += s;
      x += inner;
    }
  return make_result("reduce_channel", std::move(out), {a},
                     [shape](const Var& g, const std::vector<bool>&) { return unary(expand_channel(g, shape)); });
}

Var bias_add(const Var& x, const Var& bias) { return add(x, expand_channel(bias, x.shape())); }

// ---- reductions ------------------------------------------------------------

Var sum(const Var& a) {
  if (a.numel() == 0) throw ContractError("sum: empty input");
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  Shape shape = a.shape();
  return make_result("sum", Tensor::scalar(s), {a}, [shape](const Var& g, const std::vector<bool>&) {
    return unary(broadcast_scalar(g, shape));
  });
}

Var mean(const Var& a) {
  if (a.numel() == 0) throw ContractError("mean: empty input");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Var row_sum(const Var& a) {
  require_rank("row_sum", a, 2);
  const std::size_t r = a.shape()[0], k = a.shape()[1];
  if (k == 0) throw ContractError("row_sum: empty rows");
  Tensor out(Shape{r});
  const double* x = a.value().raw();
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += x[i * k + j];
    out[i] = s;
  }
  return make_result("row_sum", std::move(out), {a},
                     [k](const Var& g, const std::vector<bool>&) { return unary(expand_rows(g, k)); });
}

Var expand_rows(const Var& v, std::size_t cols) {
  require_rank("expand_rows", v, 1);
  const std::size_t r = v.shape()[0];
  Tensor out(Shape{r, cols});
  for (std::size_t i = 0; i < r; ++i) std::fill_n(out.raw() + i * cols, cols, v.value()[i]);
  return make_result("expand_rows", std::move(out), {v},
                     [](const Var& g, const std::vector<bool>&) { return unary(row_sum(g)); });
}

Var row_dot(const Var& a, const Var& b) {
  require_same_shape("row_dot", a, b);
  return row_sum(mul(a, b));
}

Var l2_norm_rows(const Var& a) { return sqrt(row_sum(mul(a, a))); }

// ---- matmul ----------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions differ, " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  Tensor out(Shape{m, n});
  MatrixMap(out.raw(), m, n).noalias() = ConstMatrixMap(a.value().raw(), m, k) * ConstMatrixMap(b.value().raw(), k, n);
  return make_result("matmul", std::move(out), {a, b}, [a, b](const Var& g, const std::vector<bool>& need) {
    Var ga = need[0] ? matmul(g, transpose(b)) : Var();
    Var gb = need[1] ? matmul(transpose(a), g) : Var();
    return std::vector<Var>{ga, gb};
  });
}

// ---- classification --------------------------------------------------------

Var softmax_rows(const Var& logits) {
  require_rank("softmax_rows", logits, 2);
  const std::size_t n = logits.shape()[0], c = logits.shape()[1];
  if (c == 0) throw ContractError("softmax_rows: no classes");
  Tensor out(logits.shape());
  const double* x = logits.value().raw();
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = x + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (out[i * c + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= z;
  }
  return make_result("softmax_rows", std::move(out), {logits}, [logits, c](const Var& g, const std::vector<bool>&) {
    Var y = softmax_rows(logits);
    return unary(mul(y, sub(g, expand_rows(row_sum(mul(g, y)), c))));
  });
}

Var softmax_cross_entropy(const Var& logits, std::span<const int> labels) {
  require_rank("softmax_cross_entropy", logits, 2);
  const std::size_t n = logits.shape()[0], c = logits.shape()[1];
  if (n == 0) throw ContractError("softmax_cross_entropy: empty batch");
  if (labels.size() != n) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(n) + " rows");
  }
  Tensor onehot(logits.shape(), 0.0);
  double total = 0.0;
  const double* x = logits.value().raw();
  for (std::size_t i = 0; i < n; ++i) {
    const int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= c) {
      throw ContractError("softmax_cross_entropy: label " + std::to_string(label) + " at row " + std::to_string(i) +
                          " outside [0, " + std::to_string(c) + ")");
    }
    const double* row = x + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    total += mx + std::log(z) - row[label];
    onehot[i * c + static_cast<std::size_t>(label)] = 1.0;
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  return make_result("softmax_cross_entropy", Tensor::scalar(total * inv_n), {logits},
                     [logits, onehot = Var(std::move(onehot)), inv_n](const Var& g, const std::vector<bool>&) {
                       return unary(mul_scalar(scale(sub(softmax_rows(logits), onehot), inv_n), g));
                     });
}

}  // namespace gradmatch::ad
