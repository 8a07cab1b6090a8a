#include "gradmatch/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "gradmatch/errors.hpp"

namespace gradmatch::ad {

namespace {

double norm(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v * v;
  return std::sqrt(s);
}

}  // namespace

double relative_error(const Tensor& a, const Tensor& b, double floor) {
  if (a.shape() != b.shape()) {
    throw DimensionError("relative_error: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  double diff = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) diff += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(diff) / std::max({norm(a), norm(b), floor});
}

double check_gradient(const ScalarFn& f, std::span<const Tensor> inputs, double h) {
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const Tensor& t : inputs) vars.emplace_back(t, true);
  const Var out = f(vars);
  const std::vector<Var> analytic = grad(out, vars);

  double worst = 0.0;
  for (std::size_t j = 0; j < inputs.size(); ++j) {
    // Grad mode stays on: f may itself take inner gradients.
    auto probe = [&](const Tensor& x) {
      std::vector<Var> args;
      for (std::size_t k = 0; k < inputs.size(); ++k) args.emplace_back(k == j ? x : inputs[k], false);
      return f(args).item();
    };
    const Tensor numeric = finite_diff_gradient(probe, inputs[j], h);
    worst = std::max(worst, relative_error(analytic[j].value(), numeric));
  }
  return worst;
}

double check_second_order(const ScalarFn& f, const Tensor& x, const Tensor& v, double h) {
  if (x.shape() != v.shape()) throw DimensionError("check_second_order: direction shape differs from x");
  auto directional = [&](const Var& xv, bool create_graph) {
    const Var args[] = {xv};
    const Var g = grad(f(args), args, create_graph)[0];
    return sum(mul(g, Var(v)));
  };
  const Var xv(x, true);
  const Var hvp = grad(directional(xv, true), std::span<const Var>(&xv, 1))[0];
  const Tensor numeric = finite_diff_gradient(
      [&](const Tensor& p) { return directional(Var(p, true), false).item(); }, x, h);
  return relative_error(hvp.value(), numeric);
}

}  // namespace gradmatch::ad
