#pragma once

// Dense float64 tensors with tape-based reverse-mode differentiation.
//
// Every operation whose inputs require gradients records a node carrying a
// monotonically increasing sequence number. backward() gathers the nodes
// reachable from the loss and replays their adjoints in reverse record order,
// which visits each node only after all of its consumers.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "structlm/rng.hpp"

namespace structlm {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  // Propagates this->grad into the parents' grads.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }
  void ensure_grad();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Direct write access; intended for leaves (parameters, inputs).
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  // All-zeros when no gradient has been accumulated.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Same values, no history, no gradient requirement.
  Tensor detach() const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Ordered record of the operations reachable from a loss.
class Tape {
 public:
  explicit Tape(const Tensor& loss);

  std::size_t size() const { return order_.size(); }
  // Record order, earliest first.
  const std::vector<detail::Node*>& nodes() const { return order_; }
  // Seeds dLoss/dLoss = 1 and runs adjoints from the last record to the first.
  void replay();

 private:
  std::shared_ptr<detail::Node> loss_;
  std::vector<detail::Node*> order_;
};

// Accumulates dLoss/dleaf into every requires_grad leaf reachable from loss.
// Interior gradients are reset on each call, so repeated calls add exactly one
// more copy of the gradient to the leaves.
void backward(const Tensor& loss);

// Disables recording on the current thread for its lifetime.
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

// Elementwise arithmetic with trailing-axis broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
Tensor neg(const Tensor& x);

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor gelu(const Tensor& x);
// log(1 + exp(x)), stable for large |x|.
Tensor softplus(const Tensor& x);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);

Tensor sum(const Tensor& x);
Tensor sum_axis(const Tensor& x, std::size_t axis, bool keepdim = true);
Tensor dot(const Tensor& a, const Tensor& b);
Tensor cumsum(const Tensor& x, std::size_t axis);

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);

// Normalizes over the last axis. gain and bias are optional ([n] each).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// x: [L x C_in], weight: [C_out x k x C_in], bias: [C_out] or undefined.
// k must be odd and padding == (k - 1) / 2 so the output keeps length L.
Tensor conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t padding);

// Rows of table [V x d] selected by ids; adjoint scatter-adds into the table.
Tensor embedding(const Tensor& table, std::span<const std::int64_t> ids);

// Inverted dropout. Identity when !train or p == 0.
Tensor dropout(const Tensor& x, double p, Rng& rng, bool train);

enum class Reduction { kSum, kMean };

// logits: [N x V]. Positions whose target equals ignore_index contribute
// nothing. With kMean and no counted positions the result is a constant 0.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets,
                     std::int64_t ignore_index, Reduction reduction = Reduction::kMean);

}  // namespace structlm
