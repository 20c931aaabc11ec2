#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ropelab {

// Repo-wide floating point type. All tolerances assume at least this width.
using Real = double;
using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// One value in the define-by-run graph. Leaves have no backward_fn.
struct Node {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Propagates this->grad into inputs' grads.
  std::function<void(Node&)> backward_fn;

  std::vector<Real>& grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), Real{0});
    return grad;
  }
};

}  // namespace detail

// Dense row-major array of rank <= 4 taking part in reverse-mode autodiff.
//
// Tensors are cheap handles: copies share the underlying node. An op whose
// inputs require grad records a backward closure; `backward(loss)` walks the
// recorded graph in reverse topological order. Leaf grads accumulate across
// calls until `zero_grad()`.
class Tensor {
 public:
  using BackwardFn = std::function<void(detail::Node&)>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Real value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<Real> data,
                          bool requires_grad = false);
  static Tensor scalar(Real value, bool requires_grad = false);

  // Builds an op result. Graph edges are kept only when some input requires
  // grad and recording is enabled on this thread.
  static Tensor make_op(Shape shape, std::vector<Real> data,
                        std::vector<Tensor> inputs, BackwardFn fn);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const Real> data() const;
  std::span<Real> mutable_data();
  std::span<const Real> grad() const;
  bool has_grad() const;
  bool requires_grad() const;

  Real item() const;
  Real at(std::size_t i) const;
  Real at(std::size_t i, std::size_t j) const;

  void zero_grad();
  // Fresh leaf with a copy of the data and no history.
  Tensor detach(bool requires_grad = false) const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

// Reverse pass from a scalar loss. Throws ContractError for non-scalar loss.
void backward(const Tensor& loss);

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

}  // namespace ropelab
