#pragma once

// Dense float64 tensors with tape-free reverse-mode autodiff. Every tensor
// produced by a tracked op keeps a pointer to its parents and a closure that
// pushes its gradient back into them; backward() walks that graph in reverse
// topological order.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace klg {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents' grads.
  std::function<void(Node&)> backward;

  std::span<double> ensure_grad();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }

  std::span<double> data() { return node_->data; }
  std::span<const double> data() const { return node_->data; }
  double operator[](std::size_t i) const { return node_->data[i]; }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  // Gradient buffer, zero-filled on first access.
  std::span<double> grad() { return node_->ensure_grad(); }
  std::span<const double> grad() const { return node_->ensure_grad(); }
  void zero_grad();

  // Populate gradients of every tracked leaf reachable from this scalar.
  void backward();

  // Same data, no graph history, no gradient tracking.
  Tensor detach() const;
  // Deep copy of data (and requires_grad flag); no history.
  Tensor clone() const;

  // Internal: build a tracked result of an op.
  static Tensor make_result(Shape shape, std::vector<double> data,
                            std::vector<Tensor> parents,
                            std::function<void(detail::Node&)> backward);
  detail::Node& node() const { return *node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

}  // namespace klg
