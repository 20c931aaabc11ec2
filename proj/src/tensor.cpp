#include "ropelab/tensor.h"

#include <sstream>
#include <unordered_set>

#include "ropelab/error.h"

namespace ropelab {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) {
  g_grad_enabled = false;
}
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), Real{0}, requires_grad);
}

Tensor Tensor::full(Shape shape, Real value, bool requires_grad) {
  std::vector<Real> data(shape_numel(shape), value);
  return from_data(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<Real> data,
                         bool requires_grad) {
  if (shape.size() > 4) {
    throw DimensionError("tensor rank above 4: " + shape_str(shape));
  }
  if (data.size() != shape_numel(shape)) {
    throw DimensionError("data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(Real value, bool requires_grad) {
  return from_data({}, {value}, requires_grad);
}

Tensor Tensor::make_op(Shape shape, std::vector<Real> data,
                       std::vector<Tensor> inputs, BackwardFn fn) {
  Tensor out = from_data(std::move(shape), std::move(data), false);
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
  if (!any) return out;
  auto* node = out.node();
  node->requires_grad = true;
  node->inputs.reserve(inputs.size());
  for (auto& in : inputs) node->inputs.push_back(in.node_);
  node->backward_fn = std::move(fn);
  return out;
}

const Shape& Tensor::shape() const {
  require(defined(), "undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                         shape_str(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const Real> Tensor::data() const {
  require(defined(), "undefined tensor");
  return node_->data;
}

std::span<Real> Tensor::mutable_data() {
  require(defined(), "undefined tensor");
  return node_->data;
}

std::span<const Real> Tensor::grad() const {
  require(defined(), "undefined tensor");
  return node_->grad;
}

bool Tensor::has_grad() const { return defined() && !node_->grad.empty(); }

bool Tensor::requires_grad() const { return defined() && node_->requires_grad; }

Real Tensor::item() const {
  if (numel() != 1) {
    throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  }
  return node_->data[0];
}

Real Tensor::at(std::size_t i) const {
  require(i < numel(), "index out of range");
  return node_->data[i];
}

Real Tensor::at(std::size_t i, std::size_t j) const {
  require(rank() == 2 && i < dim(0) && j < dim(1), "index out of range");
  return node_->data[i * dim(1) + j];
}

void Tensor::zero_grad() {
  if (defined()) node_->grad.clear();
}

Tensor Tensor::detach(bool requires_grad) const {
  return from_data(shape(), node_->data, requires_grad);
}

void backward(const Tensor& loss) {
  require(loss.defined(), "backward on undefined tensor");
  if (loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward on a loss that is not on an active tape");
  }

  // Iterative post-order DFS gives a topological order of interior nodes.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && !seen.count(child)) {
        seen.insert(child);
        stack.emplace_back(child, 0);
      }
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  // Interior grads restart from zero on every call; leaves accumulate.
  for (auto* node : order) {
    if (node->backward_fn) node->grad.assign(node->data.size(), Real{0});
  }
  loss.node()->grad_buffer()[0] += Real{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

}  // namespace ropelab
