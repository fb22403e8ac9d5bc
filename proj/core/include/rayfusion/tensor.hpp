#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace rayfusion {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

// Contributions a node hands to its parents during the reverse sweep. Entry i
// is pre-sized to the parent's element count when that parent needs a
// gradient and left empty otherwise.
using ParentGrads = std::vector<std::vector<double>>;

struct Node;
using BackwardFn = std::function<void(const Node& self, ParentGrads& out)>;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward_fn;
  // (consumer id, contribution) pairs waiting to be summed in id order.
  std::vector<std::pair<std::uint64_t, std::vector<double>>> pending;
  std::shared_ptr<void> resource;

  bool is_leaf() const { return !backward_fn; }
};

}  // namespace detail

// Traversal used to schedule the reverse sweep. Both produce bitwise identical
// gradients because contributions are summed in consumer-creation order.
enum class BackwardOrder { kDepthFirst, kKahn };

// Dense row-major double tensor with optional reverse-mode gradient tracking.
// Copies share storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  // Allocates (or resets) the gradient buffer to zeros.
  void zero_grad();

  Tensor detach() const;
  Tensor clone() const;

  // Reverse sweep from a single-element tensor; gradients accumulate into
  // every tracked leaf reachable from here.
  void backward(BackwardOrder order = BackwardOrder::kDepthFirst) const;

  std::uint64_t id() const;
  void attach_resource(std::shared_ptr<void> resource);

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

bool grad_enabled();

// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

// Builds an op result. The graph edge is only recorded when grad mode is on
// and at least one input is tracked.
Tensor make_result(Shape shape, std::vector<double> value,
                   std::vector<Tensor> inputs, BackwardFn backward);

}  // namespace detail

}  // namespace rayfusion
