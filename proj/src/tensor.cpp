#include "condenser/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <unordered_set>

namespace condenser {

namespace {

std::atomic<std::uint64_t> g_sequence{1};
thread_local bool t_grad_enabled = true;

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

std::vector<double>& Node::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

void Node::accumulate(std::span<const double> g) {
  auto& buf = grad_buffer();
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (!t_grad_enabled) return false;
  for (const Tensor* t : inputs)
    if (t && t->defined() && t->requires_grad()) return true;
  return false;
}

Tensor make_result(Shape shape, std::vector<double> data, const char* op,
                   std::vector<Tensor> inputs, BackwardFn backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->sequence = g_sequence.fetch_add(1, std::memory_order_relaxed);
  bool record = false;
  if (t_grad_enabled) {
    for (const auto& in : inputs)
      if (in.defined() && in.requires_grad()) record = true;
  }
  if (record) {
    node->requires_grad = true;
    node->op = op;
    for (auto& in : inputs)
      if (in.defined()) node->inputs.push_back(in.node());
    node->backward = std::move(backward);
  }
  return Tensor::wrap(std::move(node));
}

}  // namespace detail

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size())
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  node_ = std::make_shared<detail::Node>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
  node_->sequence = g_sequence.fetch_add(1, std::memory_order_relaxed);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({}, {value}, requires_grad);
}

const Shape& Tensor::shape() const {
  if (!node_) throw Error("use of undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size())
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return node_ ? node_->data.size() : 0; }

std::span<const double> Tensor::data() const {
  if (!node_) throw Error("use of undefined tensor");
  return node_->data;
}

std::span<double> Tensor::mutable_data() {
  if (!node_) throw Error("use of undefined tensor");
  return node_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
  if (!node_) throw Error("use of undefined tensor");
  if (node_->op) throw Error("requires_grad can only be changed on leaf tensors");
  node_->requires_grad = value;
}

bool Tensor::is_leaf() const { return !node_ || node_->op == nullptr; }

const char* Tensor::op_name() const { return node_ ? node_->op : nullptr; }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!node_) return {};
  return node_->grad;
}

std::vector<double> Tensor::grad_or_zeros() const {
  if (has_grad()) return node_->grad;
  return std::vector<double>(numel(), 0.0);
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const { return Tensor(shape(), node_->data, false); }

Tensor Tensor::clone() const { return Tensor(shape(), node_->data, requires_grad()); }

namespace {

// Nodes reachable from root through recorded edges, newest first. Creation
// order is a topological order, so sorting by sequence reverses it.
std::vector<detail::NodePtr> reverse_topological(const detail::NodePtr& root) {
  std::vector<detail::NodePtr> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::NodePtr> stack{root};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& in : n->inputs) {
      if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in);
    }
  }
  std::sort(order.begin(), order.end(), [](const detail::NodePtr& a, const detail::NodePtr& b) {
    return a->sequence > b->sequence;
  });
  return order;
}

}  // namespace

void Tensor::backward() const {
  if (!node_) throw Error("backward on undefined tensor");
  if (node_->data.size() != 1)
    throw ShapeError("backward requires a scalar, got shape " + shape_str(node_->shape));
  if (!node_->op) throw Error("backward on a tensor with no recorded computation");

  auto order = reverse_topological(node_);
  node_->grad_buffer()[0] += 1.0;
  for (const auto& n : order) {
    if (n->op && n->backward && !n->grad.empty()) n->backward(n->data, n->grad);
  }
  for (const auto& n : order) {
    if (n->op) {
      n->grad.clear();
      n->grad.shrink_to_fit();
      n->backward = nullptr;
      n->inputs.clear();
      n->op = nullptr;
      n->requires_grad = false;
    }
  }
}

std::vector<RecordEntry> computation_record(const Tensor& root) {
  std::vector<RecordEntry> out;
  if (!root.defined() || root.is_leaf()) return out;
  for (const auto& n : reverse_topological(root.node())) {
    if (!n->op) continue;
    RecordEntry e{n->sequence, n->op, {}};
    for (const auto& in : n->inputs) e.inputs.push_back(in->sequence);
    out.push_back(std::move(e));
  }
  return out;
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() { return t_grad_enabled; }

}  // namespace condenser
