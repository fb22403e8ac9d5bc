#include "rayfusion/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <deque>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "rayfusion/errors.hpp"

namespace rayfusion {

namespace {

std::atomic<std::uint64_t> g_next_id{1};
thread_local bool t_grad_enabled = true;

std::shared_ptr<detail::Node> new_node(Shape shape, std::vector<double> value,
                                       bool requires_grad) {
  if (value.size() != shape_numel(shape)) {
    throw DimensionError("tensor data length " + std::to_string(value.size()) +
                         " does not match shape " + shape_string(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  node->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  return node;
}

void require_defined(const std::shared_ptr<detail::Node>& node) {
  if (!node) throw Error("operation on an undefined tensor");
}

using NodePtr = detail::Node*;

std::vector<NodePtr> depth_first_order(NodePtr root) {
  // Iterative post-order, reversed: consumers precede their parents.
  std::vector<NodePtr> post;
  std::unordered_set<NodePtr> visited;
  std::vector<std::pair<NodePtr, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodePtr parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      post.push_back(node);
      stack.pop_back();
    }
  }
  std::reverse(post.begin(), post.end());
  return post;
}

std::vector<NodePtr> kahn_order(NodePtr root) {
  std::unordered_map<NodePtr, std::size_t> consumers;
  std::vector<NodePtr> frontier{root};
  std::unordered_set<NodePtr> seen{root};
  while (!frontier.empty()) {
    NodePtr node = frontier.back();
    frontier.pop_back();
    for (const auto& p : node->parents) {
      if (!p->requires_grad) continue;
      ++consumers[p.get()];
      if (seen.insert(p.get()).second) frontier.push_back(p.get());
    }
  }
  std::vector<NodePtr> order;
  std::deque<NodePtr> ready{root};
  while (!ready.empty()) {
    NodePtr node = ready.front();
    ready.pop_front();
    order.push_back(node);
    for (const auto& p : node->parents) {
      if (!p->requires_grad) continue;
      if (--consumers[p.get()] == 0) ready.push_back(p.get());
    }
  }
  return order;
}

std::vector<double> sum_pending(detail::Node& node) {
  std::stable_sort(node.pending.begin(), node.pending.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<double> total(node.value.size(), 0.0);
  for (const auto& [_, contribution] : node.pending) {
    for (std::size_t i = 0; i < total.size(); ++i) total[i] += contribution[i];
  }
  node.pending.clear();
  node.pending.shrink_to_fit();
  return total;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(new_node(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  return Tensor(new_node(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({}, {value}, requires_grad);
}

const Shape& Tensor::shape() const {
  require_defined(node_);
  return node_->shape;
}

std::size_t Tensor::size(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                         shape_string(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const {
  require_defined(node_);
  return node_->value.size();
}

std::span<const double> Tensor::data() const {
  require_defined(node_);
  return node_->value;
}

std::span<double> Tensor::mutable_data() {
  require_defined(node_);
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw DimensionError("item() on tensor of shape " + shape_string(shape()));
  }
  return node_->value[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) {
    throw DimensionError("index rank mismatch for " + shape_string(s));
  }
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= s[axis]) throw DimensionError("index out of range for " + shape_string(s));
    flat = flat * s[axis] + i;
    ++axis;
  }
  return node_->value[flat];
}

bool Tensor::requires_grad() const {
  require_defined(node_);
  return node_->requires_grad;
}

bool Tensor::has_grad() const {
  require_defined(node_);
  return !node_->grad.empty();
}

std::span<const double> Tensor::grad() const {
  require_defined(node_);
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
  require_defined(node_);
  return node_->grad;
}

void Tensor::zero_grad() {
  require_defined(node_);
  node_->grad.assign(node_->value.size(), 0.0);
}

Tensor Tensor::detach() const {
  require_defined(node_);
  return Tensor(new_node(node_->shape, node_->value, false));
}

Tensor Tensor::clone() const {
  require_defined(node_);
  return Tensor(new_node(node_->shape, node_->value, node_->requires_grad));
}

std::uint64_t Tensor::id() const {
  require_defined(node_);
  return node_->id;
}

void Tensor::attach_resource(std::shared_ptr<void> resource) {
  require_defined(node_);
  node_->resource = std::move(resource);
}

void Tensor::backward(BackwardOrder order) const {
  require_defined(node_);
  if (node_->value.size() != 1) {
    throw DimensionError("backward() requires a single-element tensor, got " +
                         shape_string(node_->shape));
  }
  if (!node_->requires_grad) {
    throw Error("backward() on a tensor that does not require grad");
  }
  NodePtr root = node_.get();
  const auto nodes =
      order == BackwardOrder::kDepthFirst ? depth_first_order(root) : kahn_order(root);

  root->pending.emplace_back(0, std::vector<double>{1.0});
  for (NodePtr node : nodes) {
    std::vector<double> incoming = sum_pending(*node);
    if (node->is_leaf()) {
      if (node->grad.empty()) {
        node->grad = std::move(incoming);
      } else {
        for (std::size_t i = 0; i < incoming.size(); ++i) node->grad[i] += incoming[i];
      }
      continue;
    }
    node->grad = std::move(incoming);
    detail::ParentGrads out(node->parents.size());
    for (std::size_t i = 0; i < node->parents.size(); ++i) {
      if (node->parents[i]->requires_grad) {
        out[i].assign(node->parents[i]->value.size(), 0.0);
      }
    }
    node->backward_fn(*node, out);
    for (std::size_t i = 0; i < node->parents.size(); ++i) {
      if (!out[i].empty()) {
        node->parents[i]->pending.emplace_back(node->id, std::move(out[i]));
      }
    }
    node->grad.clear();
    node->grad.shrink_to_fit();
  }
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

namespace detail {

Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                   BackwardFn backward) {
  bool track = false;
  if (t_grad_enabled) {
    for (const auto& in : inputs) {
      if (in.defined() && in.requires_grad()) {
        track = true;
        break;
      }
    }
  }
  auto node = new_node(std::move(shape), std::move(value), track);
  if (track) {
    node->parents.reserve(inputs.size());
    for (auto& in : inputs) node->parents.push_back(in.node());
    node->backward_fn = std::move(backward);
  }
  return Tensor(std::move(node));
}

}  // namespace detail

}  // namespace rayfusion
