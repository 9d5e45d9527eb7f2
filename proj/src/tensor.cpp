// SPDX-License-Identifier: Apache-2.0
#include "smp/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "smp/error.hpp"

namespace smp {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

namespace {

std::atomic<std::uint64_t> g_next_node_id{1};

std::uint64_t next_id() { return g_next_node_id.fetch_add(1, std::memory_order_relaxed); }

[[noreturn]] void shape_error(std::string_view op, const std::string& detail) {
  fail(ErrorKind::Shape, std::string(op) + ": " + detail);
}

void require_defined(std::string_view op, const Tensor& t) {
  if (!t.defined()) fail(ErrorKind::Contract, std::string(op) + ": undefined tensor");
}

void require_rank2(std::string_view op, const Tensor& t) {
  require_defined(op, t);
  if (t.rank() != 2) shape_error(op, "expected rank-2 tensor, got " + shape_string(t.shape()));
}

// Grad buffer of a parent if it participates in differentiation.
double* grad_of(const NodePtr& node) {
  if (!node || !node->requires_grad) return nullptr;
  return node->grad_buffer().data();
}

// Rank-1 inputs are treated as a single row.
std::size_t row_count(const Tensor& t) { return t.rank() == 1 ? 1 : t.shape()[0]; }

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::vector<double>& Node::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape.empty()) fail(ErrorKind::Shape, "tensor: empty shape");
  for (std::size_t extent : shape) {
    if (extent == 0) fail(ErrorKind::Shape, "tensor: zero extent in " + shape_string(shape));
  }
  if (shape_numel(shape) != values.size()) {
    fail(ErrorKind::Shape, "tensor: " + std::to_string(values.size()) +
                               " values do not fill shape " + shape_string(shape));
  }
  auto node = std::make_shared<Node>();
  node->id = next_id();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::numel() const { return node_->data.size(); }

std::size_t Tensor::rows() const { return rank() == 1 ? 1 : shape()[0]; }
std::size_t Tensor::cols() const { return shape().back(); }

std::span<const double> Tensor::data() const { return node_->data; }
std::span<double> Tensor::mutable_data() { return node_->data; }

double Tensor::item() const {
  if (numel() != 1) fail(ErrorKind::Contract, "item: tensor is not a scalar");
  return node_->data[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  return node_->data[row * cols() + col];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
void Tensor::set_requires_grad(bool flag) { node_->requires_grad = flag; }
bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return node_->grad; }

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void Tensor::clear_grad() { node_->grad.clear(); }

std::uint64_t Tensor::id() const { return node_->id; }

Tensor Tensor::make_result(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
                           std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->id = next_id();
  node->shape = std::move(shape);
  node->data = std::move(values);
  const bool tracked = std::any_of(parents.begin(), parents.end(), [](const Tensor& p) {
    return p.defined() && p.requires_grad();
  });
  if (tracked) {
    node->requires_grad = true;
    for (auto& p : parents) {
      if (p.defined()) node->parents.push_back(p.node_);
    }
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

// ---------------------------------------------------------------------------
// Tape

Tape Tape::record(const Tensor& root) {
  Tape tape;
  if (!root.defined() || !root.requires_grad()) return tape;
  std::unordered_set<const Node*> seen;
  std::vector<NodePtr> stack{root.node()};
  while (!stack.empty()) {
    NodePtr node = std::move(stack.back());
    stack.pop_back();
    if (!seen.insert(node.get()).second) continue;
    for (const auto& parent : node->parents) {
      if (parent->requires_grad && !seen.count(parent.get())) stack.push_back(parent);
    }
    tape.nodes_.push_back(std::move(node));
  }
  // Ids are handed out at creation, so a parent always has a smaller id.
  std::sort(tape.nodes_.begin(), tape.nodes_.end(),
            [](const NodePtr& a, const NodePtr& b) { return a->id < b->id; });
  return tape;
}

void Tape::run_backward() {
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& node = **it;
    if (node.backward && !node.grad.empty()) node.backward(node);
  }
  // Interior grads are scratch; leaves keep theirs.
  for (auto& node : nodes_) {
    if (node->backward) node->grad.clear();
  }
}

void backward(const Tensor& loss) {
  require_defined("backward", loss);
  if (loss.numel() != 1) {
    fail(ErrorKind::Contract, "backward: loss must be scalar, got shape " + shape_string(loss.shape()));
  }
  Tape tape = Tape::record(loss);
  if (tape.size() == 0) fail(ErrorKind::Contract, "backward: loss does not depend on any tensor requiring grad");
  loss.node()->grad_buffer()[0] += 1.0;
  tape.run_backward();
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2("matmul", a);
  require_rank2("matmul", b);
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    shape_error("matmul", shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  const auto A = a.data();
  const auto B = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      const double* brow = B.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return Tensor::make_result({m, n}, std::move(out), {a, b},
                             [an = a.node(), bn = b.node(), m, k, n](Node& self) {
                               const double* G = self.grad.data();
                               if (double* ga = grad_of(an)) {
                                 const double* Bd = bn->data.data();
                                 for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t p = 0; p < k; ++p) {
                                     double acc = 0.0;
                                     for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * Bd[p * n + j];
                                     ga[i * k + p] += acc;
                                   }
                               }
                               if (double* gb = grad_of(bn)) {
                                 const double* Ad = an->data.data();
                                 for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t p = 0; p < k; ++p) {
                                     const double av = Ad[i * k + p];
                                     for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * G[i * n + j];
                                   }
                               }
                             });
}

namespace {

// y = x · Wᵀ (+ bias), shared by matmul_nt and linear.
// Four partial sums so the adds can overlap.
double dot(const double* a, const double* b, std::size_t k) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t p = 0;
  for (; p + 4 <= k; p += 4) {
    s0 += a[p] * b[p];
    s1 += a[p + 1] * b[p + 1];
    s2 += a[p + 2] * b[p + 2];
    s3 += a[p + 3] * b[p + 3];
  }
  for (; p < k; ++p) s0 += a[p] * b[p];
  return (s0 + s1) + (s2 + s3);
}

Tensor multiply_transposed(std::string_view op, const Tensor& x, const Tensor& w, const Tensor& bias,
                           Shape out_shape) {
  const std::size_t m = row_count(x), k = x.cols(), n = w.shape()[0];
  if (w.shape()[1] != k) {
    shape_error(op, shape_string(x.shape()) + " x " + shape_string(w.shape()) + "^T");
  }
  if (bias.defined() && (bias.rank() != 1 || bias.numel() != n)) {
    shape_error(op, "bias " + shape_string(bias.shape()) + " does not match " + std::to_string(n) +
                        " outputs");
  }
  std::vector<double> out(m * n);
  const double* X = x.data().data();
  const double* W = w.data().data();
  const double* b = bias.defined() ? bias.data().data() : nullptr;
  for (std::size_t i = 0; i < m; ++i) {
    const double* xr = X + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* wr = W + j * k;
      out[i * n + j] = b ? dot(xr, wr, k) + b[j] : dot(xr, wr, k);
    }
  }
  return Tensor::make_result(
      std::move(out_shape), std::move(out), {x, w, bias},
      [xn = x.node(), wn = w.node(), bn = bias.node(), m, k, n](Node& self) {
        const double* G = self.grad.data();
        if (double* gx = grad_of(xn)) {
          const double* Wd = wn->data.data();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
              const double g = G[i * n + j];
              if (g == 0.0) continue;
              const double* wr = Wd + j * k;
              double* gr = gx + i * k;
              for (std::size_t p = 0; p < k; ++p) gr[p] += g * wr[p];
            }
        }
        if (double* gw = grad_of(wn)) {
          const double* Xd = xn->data.data();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
              const double g = G[i * n + j];
              if (g == 0.0) continue;
              const double* xr = Xd + i * k;
              double* gr = gw + j * k;
              for (std::size_t p = 0; p < k; ++p) gr[p] += g * xr[p];
            }
        }
        if (double* gb = grad_of(bn)) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gb[j] += G[i * n + j];
        }
      });
}

}  // namespace

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank2("matmul_nt", a);
  require_rank2("matmul_nt", b);
  return multiply_transposed("matmul_nt", a, b, Tensor(), {a.shape()[0], b.shape()[0]});
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_defined("linear", x);
  require_rank2("linear", weight);
  if (x.rank() > 2) shape_error("linear", "input must be rank 1 or 2, got " + shape_string(x.shape()));
  Shape out_shape = x.rank() == 1 ? Shape{weight.shape()[0]} : Shape{x.shape()[0], weight.shape()[0]};
  return multiply_transposed("linear", x, weight, bias, std::move(out_shape));
}

Tensor transpose(const Tensor& a) {
  require_rank2("transpose", a);
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(m * n);
  const auto A = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = A[i * n + j];
  return Tensor::make_result({n, m}, std::move(out), {a}, [an = a.node(), m, n](Node& self) {
    if (double* ga = grad_of(an)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += self.grad[j * m + i];
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_defined("add", a);
  require_defined("add", b);
  if (a.shape() == b.shape()) {
    std::vector<double> out(a.numel());
    const auto A = a.data();
    const auto B = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] + B[i];
    return Tensor::make_result(a.shape(), std::move(out), {a, b},
                               [an = a.node(), bn = b.node()](Node& self) {
                                 const std::size_t n = self.grad.size();
                                 if (double* ga = grad_of(an))
                                   for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[i];
                                 if (double* gb = grad_of(bn))
                                   for (std::size_t i = 0; i < n; ++i) gb[i] += self.grad[i];
                               });
  }
  if (b.rank() == 1 && a.rank() == 2 && b.numel() == a.cols()) {
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(a.numel());
    const auto A = a.data();
    const auto B = b.data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] = A[i * n + j] + B[j];
    return Tensor::make_result(a.shape(), std::move(out), {a, b},
                               [an = a.node(), bn = b.node(), m, n](Node& self) {
                                 if (double* ga = grad_of(an))
                                   for (std::size_t i = 0; i < m * n; ++i) ga[i] += self.grad[i];
                                 if (double* gb = grad_of(bn))
                                   for (std::size_t i = 0; i < m; ++i)
                                     for (std::size_t j = 0; j < n; ++j) gb[j] += self.grad[i * n + j];
                               });
  }
  shape_error("add", shape_string(a.shape()) + " + " + shape_string(b.shape()));
}

Tensor multiply(const Tensor& a, const Tensor& b) {
  require_defined("multiply", a);
  require_defined("multiply", b);
  if (a.shape() != b.shape()) {
    shape_error("multiply", shape_string(a.shape()) + " * " + shape_string(b.shape()));
  }
  std::vector<double> out(a.numel());
  const auto A = a.data();
  const auto B = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * B[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b},
                             [an = a.node(), bn = b.node()](Node& self) {
                               const std::size_t n = self.grad.size();
                               if (double* ga = grad_of(an))
                                 for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[i] * bn->data[i];
                               if (double* gb = grad_of(bn))
                                 for (std::size_t i = 0; i < n; ++i) gb[i] += self.grad[i] * an->data[i];
                             });
}

Tensor scale(const Tensor& a, double factor) {
  require_defined("scale", a);
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= factor;
  return Tensor::make_result(a.shape(), std::move(out), {a}, [an = a.node(), factor](Node& self) {
    if (double* ga = grad_of(an))
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * factor;
  });
}

namespace {

// Applies f elementwise; df(x, y) gives the local derivative.
template <class F, class DF>
Tensor unary(std::string_view op, const Tensor& a, F f, DF df) {
  require_defined(op, a);
  std::vector<double> out(a.numel());
  const auto A = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(A[i]);
  return Tensor::make_result(a.shape(), std::move(out), {a}, [an = a.node(), df](Node& self) {
    if (double* ga = grad_of(an))
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        ga[i] += self.grad[i] * df(an->data[i], self.data[i]);
  });
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor relu(const Tensor& a) {
  return unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  return unary(
      "gelu", a,
      [](double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x))); },
      [](double x, double) {
        const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
      });
}

Tensor sigmoid(const Tensor& a) {
  return unary("sigmoid", a, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

// ---------------------------------------------------------------------------
// Row-wise

Tensor softmax(const Tensor& a) {
  require_defined("softmax", a);
  const std::size_t n = a.cols(), m = a.numel() / n;
  const auto A = a.data();
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < m; ++i) {
    const double* x = A.data() + i * n;
    double* y = out.data() + i * n;
    double mx = x[0];
    for (std::size_t j = 0; j < n; ++j) {
      if (!std::isfinite(x[j])) fail(ErrorKind::Domain, "softmax: non-finite input");
      mx = std::max(mx, x[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < n; ++j) y[j] /= z;
  }
  return Tensor::make_result(a.shape(), std::move(out), {a}, [an = a.node(), m, n](Node& self) {
    double* ga = grad_of(an);
    if (!ga) return;
    for (std::size_t i = 0; i < m; ++i) {
      const double* y = self.data.data() + i * n;
      const double* g = self.grad.data() + i * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += y[j] * (g[j] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_defined("layer_norm", x);
  const std::size_t n = x.cols(), m = x.numel() / n;
  if (gamma.numel() != n || beta.numel() != n) {
    shape_error("layer_norm", "input " + shape_string(x.shape()) + " with gamma " +
                                  shape_string(gamma.shape()) + " and beta " + shape_string(beta.shape()));
  }
  const auto X = x.data();
  const auto G = gamma.data();
  const auto B = beta.data();
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* xr = X.data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (xr[j] - mu) * inv_std[i];
      out[i * n + j] = G[j] * xhat[i * n + j] + B[j];
    }
  }
  return Tensor::make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [xn = x.node(), gn = gamma.node(), bn = beta.node(), xhat = std::move(xhat),
       inv_std = std::move(inv_std), m, n](Node& self) {
        const double* dy = self.grad.data();
        if (double* gb = grad_of(bn))
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gb[j] += dy[i * n + j];
        if (double* gg = grad_of(gn))
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gg[j] += dy[i * n + j] * xhat[i * n + j];
        if (double* gx = grad_of(xn)) {
          const double* gam = gn->data.data();
          const double dn = static_cast<double>(n);
          for (std::size_t i = 0; i < m; ++i) {
            double sum_d = 0.0, sum_dx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = dy[i * n + j] * gam[j];
              sum_d += d;
              sum_dx += d * xhat[i * n + j];
            }
            for (std::size_t j = 0; j < n; ++j) {
              const double d = dy[i * n + j] * gam[j];
              gx[i * n + j] += inv_std[i] / dn * (dn * d - sum_d - xhat[i * n + j] * sum_dx);
            }
          }
        }
      });
}

Tensor embedding_lookup(const Tensor& table, std::span<const std::uint32_t> ids) {
  require_rank2("embedding_lookup", table);
  if (ids.empty()) fail(ErrorKind::Shape, "embedding_lookup: empty id sequence");
  const std::size_t vocab = table.shape()[0], d = table.shape()[1];
  std::vector<double> out(ids.size() * d);
  const auto T = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab) {
      fail(ErrorKind::Domain, "embedding_lookup: id " + std::to_string(ids[i]) +
                                  " out of range for vocabulary of " + std::to_string(vocab));
    }
    std::copy_n(T.data() + ids[i] * d, d, out.data() + i * d);
  }
  std::vector<std::uint32_t> kept(ids.begin(), ids.end());
  return Tensor::make_result({ids.size(), d}, std::move(out), {table},
                             [tn = table.node(), kept = std::move(kept), d](Node& self) {
                               if (double* gt = grad_of(tn))
                                 for (std::size_t i = 0; i < kept.size(); ++i)
                                   for (std::size_t j = 0; j < d; ++j) gt[kept[i] * d + j] += self.grad[i * d + j];
                             });
}

// ---------------------------------------------------------------------------
// Losses

Tensor cross_entropy(const Tensor& logits, std::span<const std::uint32_t> labels) {
  require_defined("cross_entropy", logits);
  const std::size_t m = row_count(logits), n = logits.cols();
  if (labels.size() != m) {
    shape_error("cross_entropy", std::to_string(labels.size()) + " labels for logits " +
                                     shape_string(logits.shape()));
  }
  const auto Z = logits.data();
  std::vector<double> probs(m * n);
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (labels[i] >= n) fail(ErrorKind::Domain, "cross_entropy: label out of range");
    const double* z = Z.data() + i * n;
    double mx = z[0];
    for (std::size_t j = 0; j < n; ++j) {
      if (!std::isfinite(z[j])) fail(ErrorKind::Domain, "cross_entropy: non-finite logit");
      mx = std::max(mx, z[j]);
    }
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += (probs[i * n + j] = std::exp(z[j] - mx));
    for (std::size_t j = 0; j < n; ++j) probs[i * n + j] /= s;
    loss += mx + std::log(s) - z[labels[i]];
  }
  loss /= static_cast<double>(m);
  std::vector<std::uint32_t> kept(labels.begin(), labels.end());
  return Tensor::make_result({1}, {loss}, {logits},
                             [zn = logits.node(), probs = std::move(probs), kept = std::move(kept), m,
                              n](Node& self) {
                               double* gz = grad_of(zn);
                               if (!gz) return;
                               const double g = self.grad[0] / static_cast<double>(m);
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t j = 0; j < n; ++j)
                                   gz[i * n + j] += g * (probs[i * n + j] - (j == kept[i] ? 1.0 : 0.0));
                             });
}

Tensor kl_divergence(const Tensor& p, const Tensor& q) {
  require_defined("kl_divergence", p);
  require_defined("kl_divergence", q);
  if (p.shape() != q.shape()) {
    shape_error("kl_divergence", shape_string(p.shape()) + " vs " + shape_string(q.shape()));
  }
  constexpr double kTol = 1e-6;
  const std::size_t n = p.cols(), m = p.numel() / n;
  const auto P = p.data();
  const auto Q = q.data();
  for (const auto& dist : {P, Q}) {
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double v = dist[i * n + j];
        if (!(v >= 0.0) || !std::isfinite(v)) fail(ErrorKind::Domain, "kl_divergence: negative or non-finite probability");
        s += v;
      }
      if (std::abs(s - 1.0) > kTol) fail(ErrorKind::Domain, "kl_divergence: row does not sum to 1");
    }
  }
  double total = 0.0;
  for (std::size_t i = 0; i < m * n; ++i) {
    if (P[i] == 0.0) continue;
    if (Q[i] == 0.0) fail(ErrorKind::Domain, "kl_divergence: q has zero mass where p does not");
    total += P[i] * std::log(P[i] / Q[i]);
  }
  total /= static_cast<double>(m);
  return Tensor::make_result({1}, {total}, {p, q}, [pn = p.node(), qn = q.node(), m](Node& self) {
    const double g = self.grad[0] / static_cast<double>(m);
    const auto& P = pn->data;
    const auto& Q = qn->data;
    // At p = 0 the derivative w.r.t. p diverges; it is only reached through
    // an underflowed softmax, where the upstream Jacobian is zero anyway.
    if (double* gp = grad_of(pn))
      for (std::size_t i = 0; i < P.size(); ++i)
        if (P[i] > 0.0) gp[i] += g * (std::log(P[i] / Q[i]) + 1.0);
    if (double* gq = grad_of(qn))
      for (std::size_t i = 0; i < P.size(); ++i) gq[i] -= g * P[i] / Q[i];
  });
}

Tensor sum(const Tensor& a) {
  require_defined("sum", a);
  double s = 0.0;
  for (double v : a.data()) s += v;
  return Tensor::make_result({1}, {s}, {a}, [an = a.node()](Node& self) {
    if (double* ga = grad_of(an))
      for (std::size_t i = 0; i < an->data.size(); ++i) ga[i] += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  require_defined("mean", a);
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

// ---------------------------------------------------------------------------
// Structural

Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count) {
  require_rank2("slice_cols", a);
  const std::size_t m = a.rows(), n = a.cols();
  if (count == 0 || start + count > n) {
    shape_error("slice_cols", "columns [" + std::to_string(start) + ", " + std::to_string(start + count) +
                                  ") of " + shape_string(a.shape()));
  }
  std::vector<double> out(m * count);
  const auto A = a.data();
  for (std::size_t i = 0; i < m; ++i) std::copy_n(A.data() + i * n + start, count, out.data() + i * count);
  return Tensor::make_result({m, count}, std::move(out), {a},
                             [an = a.node(), m, n, start, count](Node& self) {
                               if (double* ga = grad_of(an))
                                 for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < count; ++j)
                                     ga[i * n + start + j] += self.grad[i * count + j];
                             });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) fail(ErrorKind::Shape, "concat_cols: no inputs");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  for (const auto& p : parts) {
    require_rank2("concat_cols", p);
    if (p.rows() != m) shape_error("concat_cols", "row count mismatch " + shape_string(p.shape()));
    n += p.cols();
  }
  std::vector<double> out(m * n);
  std::vector<NodePtr> nodes;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.cols();
    const auto P = p.data();
    for (std::size_t i = 0; i < m; ++i) std::copy_n(P.data() + i * c, c, out.data() + i * n + off);
    nodes.push_back(p.node());
    offsets.push_back(off);
    off += c;
  }
  return Tensor::make_result({m, n}, std::move(out), {parts.begin(), parts.end()},
                             [nodes = std::move(nodes), offsets = std::move(offsets), m, n](Node& self) {
                               for (std::size_t k = 0; k < nodes.size(); ++k) {
                                 double* g = grad_of(nodes[k]);
                                 if (!g) continue;
                                 const std::size_t c = nodes[k]->shape[1];
                                 for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < c; ++j)
                                     g[i * c + j] += self.grad[i * n + offsets[k] + j];
                               }
                             });
}

Tensor select_row(const Tensor& a, std::size_t row) {
  require_rank2("select_row", a);
  if (row >= a.rows()) shape_error("select_row", "row " + std::to_string(row) + " of " + shape_string(a.shape()));
  const std::size_t n = a.cols();
  std::vector<double> out(a.data().begin() + row * n, a.data().begin() + (row + 1) * n);
  return Tensor::make_result({n}, std::move(out), {a}, [an = a.node(), row, n](Node& self) {
    if (double* ga = grad_of(an))
      for (std::size_t j = 0; j < n; ++j) ga[row * n + j] += self.grad[j];
  });
}

Tensor stack_rows(std::span<const Tensor> rows) {
  if (rows.empty()) fail(ErrorKind::Shape, "stack_rows: no inputs");
  const std::size_t n = rows[0].numel();
  std::vector<double> out;
  out.reserve(rows.size() * n);
  std::vector<NodePtr> nodes;
  for (const auto& r : rows) {
    require_defined("stack_rows", r);
    if (r.numel() != n || r.rows() != 1) shape_error("stack_rows", "row shape " + shape_string(r.shape()));
    out.insert(out.end(), r.data().begin(), r.data().end());
    nodes.push_back(r.node());
  }
  return Tensor::make_result({rows.size(), n}, std::move(out), {rows.begin(), rows.end()},
                             [nodes = std::move(nodes), n](Node& self) {
                               for (std::size_t i = 0; i < nodes.size(); ++i)
                                 if (double* g = grad_of(nodes[i]))
                                   for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
                             });
}

// ---------------------------------------------------------------------------
// Masking

namespace {

void check_mask(std::string_view op, const Tensor& weight, std::span<const std::uint8_t> mask) {
  if (mask.size() != weight.numel()) {
    shape_error(op, "mask of " + std::to_string(mask.size()) + " entries for weight " +
                        shape_string(weight.shape()));
  }
  for (std::uint8_t m : mask) {
    if (m > 1) fail(ErrorKind::Domain, std::string(op) + ": mask is not binary");
  }
}

}  // namespace

Tensor ste_mask_apply(const Tensor& weight, std::span<const std::uint8_t> mask, const Tensor& scores) {
  require_defined("ste_mask_apply", weight);
  require_defined("ste_mask_apply", scores);
  if (weight.shape() != scores.shape()) {
    shape_error("ste_mask_apply", "weight " + shape_string(weight.shape()) + " vs scores " +
                                      shape_string(scores.shape()));
  }
  check_mask("ste_mask_apply", weight, mask);
  if (weight.requires_grad()) fail(ErrorKind::Contract, "ste_mask_apply: weight must be frozen");
  if (!scores.requires_grad()) fail(ErrorKind::Contract, "ste_mask_apply: scores must be learnable");
  return masked_weight(weight, mask, scores);
}

Tensor ste_mask_apply(const Tensor& weight, const Tensor& mask, const Tensor& scores) {
  require_defined("ste_mask_apply", mask);
  if (mask.shape() != weight.shape()) {
    shape_error("ste_mask_apply", "mask " + shape_string(mask.shape()) + " vs weight " +
                                      shape_string(weight.shape()));
  }
  std::vector<std::uint8_t> bits(mask.numel());
  for (std::size_t i = 0; i < bits.size(); ++i) {
    const double v = mask.data()[i];
    if (v != 0.0 && v != 1.0) fail(ErrorKind::Domain, "ste_mask_apply: mask is not binary");
    bits[i] = v == 1.0 ? 1 : 0;
  }
  return ste_mask_apply(weight, std::span<const std::uint8_t>(bits), scores);
}

Tensor masked_weight(const Tensor& weight, std::span<const std::uint8_t> mask, const Tensor& scores) {
  require_defined("masked_weight", weight);
  check_mask("masked_weight", weight, mask);
  if (scores.defined() && scores.shape() != weight.shape()) {
    shape_error("masked_weight", "weight " + shape_string(weight.shape()) + " vs scores " +
                                     shape_string(scores.shape()));
  }
  const auto W = weight.data();
  std::vector<double> out(W.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = mask[i] ? W[i] : 0.0;
  std::vector<std::uint8_t> bits(mask.begin(), mask.end());
  return Tensor::make_result(weight.shape(), std::move(out), {weight, scores},
                             [wn = weight.node(), sn = scores.node(), bits = std::move(bits)](Node& self) {
                               const std::size_t n = self.grad.size();
                               if (double* gs = grad_of(sn))
                                 for (std::size_t i = 0; i < n; ++i) gs[i] += self.grad[i] * wn->data[i];
                               if (double* gw = grad_of(wn))
                                 for (std::size_t i = 0; i < n; ++i)
                                   if (bits[i]) gw[i] += self.grad[i];
                             });
}

}  // namespace smp
