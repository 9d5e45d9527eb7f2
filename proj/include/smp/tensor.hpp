// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation over dense row-major f64 tensors.
//
// A Tensor is a shared handle to a graph node. Operations on tensors that
// require gradients record their parents and a backward closure; calling
// backward() on a scalar collects the reachable nodes into a Tape in
// topological order and runs the closures in reverse. The graph is dynamic:
// it is rebuilt on every forward pass and released with the last handle.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace smp {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {

struct Node {
  std::uint64_t id = 0;
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty means "absent"
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  /// Rows/cols of a rank-2 tensor; a rank-1 tensor is one row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const;
  /// Writable view for leaves. Mutating a non-leaf invalidates its graph.
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();
  void clear_grad();

  std::uint64_t id() const;
  const std::shared_ptr<detail::Node>& node() const { return node_; }

  /// Creates an op result. Parents and closure are kept only if any parent
  /// requires grad.
  static Tensor make_result(Shape shape, std::vector<double> values,
                            std::vector<Tensor> parents,
                            std::function<void(detail::Node&)> backward);

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  std::shared_ptr<detail::Node> node_;
};

/// Ordered record of the operations reachable from a root. Every node's
/// parents appear before it.
class Tape {
 public:
  static Tape record(const Tensor& root);

  std::size_t size() const { return nodes_.size(); }
  std::span<const std::shared_ptr<detail::Node>> nodes() const { return nodes_; }
  /// Runs every backward closure once, in reverse topological order.
  void run_backward();

 private:
  std::vector<std::shared_ptr<detail::Node>> nodes_;
};

/// Populates grads of every requires_grad leaf reachable from `loss`.
/// Grads accumulate across uses and across calls until zero_grad().
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Primitives. All shape checks throw Error(ErrorKind::Shape) naming the op.

Tensor matmul(const Tensor& a, const Tensor& b);
/// a · bᵀ for a (m×k) and b (n×k).
Tensor matmul_nt(const Tensor& a, const Tensor& b);
/// x · Wᵀ + bias with W stored (out × in); bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
Tensor transpose(const Tensor& a);

/// Elementwise add; `b` may also be a vector broadcast over the rows of `a`.
Tensor add(const Tensor& a, const Tensor& b);
Tensor multiply(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

Tensor relu(const Tensor& a);
/// tanh approximation of GELU.
Tensor gelu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

/// Softmax along the last axis, computed with max subtraction.
Tensor softmax(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor embedding_lookup(const Tensor& table, std::span<const std::uint32_t> ids);

/// Mean cross-entropy of rows of `logits` against `labels`.
Tensor cross_entropy(const Tensor& logits, std::span<const std::uint32_t> labels);
/// Mean over rows of KL(p ‖ q). Rows must be probability vectors.
Tensor kl_divergence(const Tensor& p, const Tensor& q);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor select_row(const Tensor& a, std::size_t row);
Tensor stack_rows(std::span<const Tensor> rows);

/// Straight-through masked weight W ⊙ M. W must be frozen and S learnable;
/// the backward pass routes ∂L/∂S = (∂L/∂W′) ⊙ W for every entry, kept or
/// pruned, and nothing reaches W.
Tensor ste_mask_apply(const Tensor& weight, std::span<const std::uint8_t> mask,
                      const Tensor& scores);
/// Same as above with the mask given as a 0/1 tensor.
Tensor ste_mask_apply(const Tensor& weight, const Tensor& mask, const Tensor& scores);

/// W ⊙ M for pruning baselines that fine-tune W. If W requires grad it
/// receives (∂L/∂W′) ⊙ M; if `scores` is defined it receives the
/// straight-through gradient (∂L/∂W′) ⊙ W.
Tensor masked_weight(const Tensor& weight, std::span<const std::uint8_t> mask,
                     const Tensor& scores);

}  // namespace smp
