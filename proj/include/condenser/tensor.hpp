#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace condenser {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Raised when a non-finite value reaches a primitive that refuses to propagate it.
class NumericError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;
// Receives the node's forward output and its accumulated gradient.
using BackwardFn =
    std::function<void(std::span<const double> output, std::span<const double> grad_out)>;

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until something is accumulated
  bool requires_grad = false;
  std::uint64_t sequence = 0;
  const char* op = nullptr;  // null for leaves
  std::vector<NodePtr> inputs;
  BackwardFn backward;

  void accumulate(std::span<const double> g);
  std::vector<double>& grad_buffer();
};

}  // namespace detail

/// Row-major dense array of doubles with optional reverse-mode recording.
///
/// A Tensor is a handle: copies share the same storage and gradient, in the
/// same way parameters are shared between the modules that use them. Use
/// clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool is_leaf() const;
  const char* op_name() const;

  bool has_grad() const;
  /// Accumulated gradient; empty span when nothing has been accumulated.
  std::span<const double> grad() const;
  /// Gradient copied out, zero-filled when absent.
  std::vector<double> grad_or_zeros() const;
  void zero_grad();

  /// Reverse pass from a scalar. Leaf gradients accumulate across calls;
  /// the recorded graph below this tensor is released afterwards.
  void backward() const;

  /// Same values, no history, never requires grad.
  Tensor detach() const;
  /// Deep copy as a fresh leaf keeping requires_grad.
  Tensor clone() const;

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }
  const detail::NodePtr& node() const { return node_; }
  static Tensor wrap(detail::NodePtr node) { return Tensor(std::move(node)); }

 private:
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}
  detail::NodePtr node_;
};

/// Disables recording on the current thread for its lifetime.
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

/// One primitive application in a recorded computation.
struct RecordEntry {
  std::uint64_t sequence;
  std::string op;
  std::vector<std::uint64_t> inputs;  // sequences of recorded inputs (leaves included)
};

/// Recorded primitives reachable from `root`, in the order the reverse pass
/// visits them (reverse topological).
std::vector<RecordEntry> computation_record(const Tensor& root);

namespace detail {

/// Builds an op result. Records `backward` only when grad mode is on and some
/// input requires grad.
Tensor make_result(Shape shape, std::vector<double> data, const char* op,
                   std::vector<Tensor> inputs, BackwardFn backward);

bool should_record(std::initializer_list<const Tensor*> inputs);

}  // namespace detail

}  // namespace condenser
