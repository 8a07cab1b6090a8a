#include "gradmatch/autodiff.hpp"

#include <cmath>
#include <sstream>
#include <unordered_map>

#include "gradmatch/errors.hpp"

namespace gradmatch::ad {

namespace {

thread_local bool tl_grad_enabled = true;
thread_local Precision tl_precision = Precision::f64;

}  // namespace

// ---- Var -------------------------------------------------------------------

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<detail::Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

const Tensor& Var::value() const {
  if (!node_) throw GraphError("access to an undefined Var");
  return node_->value;
}

bool Var::requires_grad() const noexcept { return node_ && node_->requires_grad; }

bool Var::is_leaf() const noexcept { return node_ && !node_->backward; }

const std::string& Var::op_name() const {
  if (!node_) throw GraphError("access to an undefined Var");
  return node_->op;
}

std::vector<Var> Var::parents() const {
  if (!node_) return {};
  return node_->parents;
}

// ---- modes -----------------------------------------------------------------

bool grad_enabled() noexcept { return tl_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(tl_grad_enabled) { tl_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { tl_grad_enabled = previous_; }

Precision precision() noexcept { return tl_precision; }

PrecisionGuard::PrecisionGuard(Precision p) : previous_(tl_precision) { tl_precision = p; }
PrecisionGuard::~PrecisionGuard() { tl_precision = previous_; }

namespace {

class GradModeScope {
 public:
  explicit GradModeScope(bool enabled) : previous_(tl_grad_enabled) { tl_grad_enabled = enabled; }
  ~GradModeScope() { tl_grad_enabled = previous_; }
  GradModeScope(const GradModeScope&) = delete;
  GradModeScope& operator=(const GradModeScope&) = delete;

 private:
  bool previous_;
};

}  // namespace

// ---- node construction -----------------------------------------------------

namespace detail {

Var make_result(std::string op, Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  if (tl_precision == Precision::f32) {
    for (double& v : value.data()) v = static_cast<double>(static_cast<float>(v));
  }
  if (!value.all_finite()) {
    throw NumericError(op + ": non-finite value in output of shape " + to_string(value.shape()));
  }
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = std::move(op);
  bool track = false;
  if (tl_grad_enabled) {
    for (const Var& in : inputs) track = track || in.requires_grad();
  }
  if (track) {
    node->requires_grad = true;
    node->parents = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Access::wrap(std::move(node));
}

}  // namespace detail

// ---- reverse pass ----------------------------------------------------------

std::vector<Var> grad(const Var& output, std::span<const Var> inputs, bool create_graph) {
  using detail::Access;
  using detail::Node;
  if (!output.defined()) throw GraphError("grad: undefined output");
  if (output.numel() != 1) {
    throw ContractError("grad: output must be scalar, got shape " + to_string(output.shape()));
  }

  struct Info {
    bool reaches = false;  // some requested input is this node or upstream of it
    Var grad;
  };
  std::unordered_map<const Node*, Info> info;
  std::unordered_map<const Node*, std::size_t> input_slot;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i].defined()) throw GraphError("grad: undefined input " + std::to_string(i));
    input_slot.emplace(Access::node(inputs[i]).get(), i);
  }

  // Iterative post-order DFS over nodes that require grad.
  std::vector<const Node*> order;
  if (output.requires_grad()) {
    struct Frame {
      const Node* node;
      std::size_t next_parent;
    };
    std::vector<Frame> stack;
    const Node* root = Access::node(output).get();
    info[root];
    stack.push_back({root, 0});
    while (!stack.empty()) {
      Frame& top = stack.back();
      if (top.next_parent < top.node->parents.size()) {
        const Var& parent = top.node->parents[top.next_parent++];
        if (!parent.requires_grad()) continue;
        const Node* p = Access::node(parent).get();
        if (info.contains(p)) continue;
        info[p];
        stack.push_back({p, 0});
        continue;
      }
      const Node* done = top.node;
      stack.pop_back();
      Info& di = info[done];
      di.reaches = input_slot.contains(done);
      for (const Var& parent : done->parents) {
        if (!parent.requires_grad()) continue;
        di.reaches = di.reaches || info[Access::node(parent).get()].reaches;
      }
      order.push_back(done);
    }
  }

  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto it = info.find(Access::node(inputs[i]).get());
    if (it == info.end() || !it->second.reaches) {
      throw GraphError("grad: input " + std::to_string(i) + " (op '" + inputs[i].op_name() +
                       "', shape " + to_string(inputs[i].shape()) + ") is unreachable from the output");
    }
  }

  GradModeScope scope(create_graph);
  info[Access::node(output).get()].grad = Var(Tensor(output.shape(), 1.0), false);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const Node* node = *it;
    Info& ni = info[node];
    if (!ni.reaches || !ni.grad.defined() || !node->backward) continue;
    std::vector<bool> needed(node->parents.size(), false);
    bool any = false;
    for (std::size_t p = 0; p < node->parents.size(); ++p) {
      const Var& parent = node->parents[p];
      needed[p] = parent.requires_grad() && info[Access::node(parent).get()].reaches;
      any = any || needed[p];
    }
    if (!any) continue;
    std::vector<Var> parent_grads = node->backward(ni.grad, needed);
    for (std::size_t p = 0; p < node->parents.size(); ++p) {
      if (!needed[p] || !parent_grads[p].defined()) continue;
      Info& pi = info[Access::node(node->parents[p]).get()];
      pi.grad = pi.grad.defined() ? add(pi.grad, parent_grads[p]) : parent_grads[p];
    }
    // Intermediate gradients are no longer needed once propagated, unless
    // this node is itself a requested input.
    if (!input_slot.contains(node)) ni.grad = Var();
  }

  std::vector<Var> result;
  result.reserve(inputs.size());
  for (const Var& in : inputs) {
    Var g = info[Access::node(in).get()].grad;
    if (!g.defined()) g = Var(Tensor(in.shape(), 0.0), false);
    result.push_back(create_graph ? g : g.detach());
  }
  return result;
}

// ---- finite differences ----------------------------------------------------

Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw ContractError("finite_diff_gradient: step must be positive");
  Tensor g(x.shape(), 0.0);
  Tensor probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = f(probe);
    probe[i] = orig - h;
    const double down = f(probe);
    probe[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      std::ostringstream os;
      os << "finite_diff_gradient: non-finite function value at entry " << i << " (f+ = " << up
         << ", f- = " << down << ")";
      throw NumericError(os.str());
    }
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

}  // namespace gradmatch::ad
