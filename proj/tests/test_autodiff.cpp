// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "smp/error.hpp"
#include "smp/tensor.hpp"
#include "support/gradcheck.hpp"

using namespace smp;

namespace {

bool throws_kind(const std::function<void()>& f, ErrorKind kind) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind() == kind;
  }
  return false;
}

}  // namespace

TEST_CASE("random small graphs agree with central differences") {
  Rng rng(20240611);
  for (int i = 0; i < 300; ++i) {
    auto g = testing::random_graph(rng);
    const auto r = testing::check_gradients(g);
    INFO(g.description);
    CHECK(r.max_error < 1e-4);
  }
}

TEST_CASE("matmul values") {
  auto a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = Tensor::from({3, 2}, {7, 8, 9, 10, 11, 12});
  auto c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 2});
  CHECK(c.at(0, 0) == 58);
  CHECK(c.at(0, 1) == 64);
  CHECK(c.at(1, 0) == 139);
  CHECK(c.at(1, 1) == 154);
}

TEST_CASE("linear uses an out-by-in weight") {
  auto x = Tensor::from({1, 2}, {1, 2});
  auto w = Tensor::from({3, 2}, {1, 0, 0, 1, 1, 1});
  auto b = Tensor::from({3}, {0.5, 0.5, 0.5});
  auto y = linear(x, w, b);
  CHECK(y.shape() == Shape{1, 3});
  CHECK(y.at(0, 0) == 1.5);
  CHECK(y.at(0, 1) == 2.5);
  CHECK(y.at(0, 2) == 3.5);
  auto v = linear(Tensor::from({2}, {1, 2}), w, Tensor());
  CHECK(v.shape() == Shape{3});
}

TEST_CASE("gelu tanh approximation at known points") {
  auto y = gelu(Tensor::from({3}, {0.0, 1.0, -1.0}));
  const double c = std::sqrt(2.0 / M_PI);
  const double at1 = 0.5 * (1.0 + std::tanh(c * (1.0 + 0.044715)));
  CHECK(y.data()[0] == 0.0);
  CHECK(y.data()[1] == doctest::Approx(at1).epsilon(1e-15));
  CHECK(y.data()[2] == doctest::Approx(-(1.0 - at1)).epsilon(1e-12));
}

TEST_CASE("softmax is shift invariant and survives large inputs") {
  auto a = softmax(Tensor::from({1, 3}, {1, 2, 3}));
  auto b = softmax(Tensor::from({1, 3}, {1001, 1002, 1003}));
  double total = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(a.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-12));
    total += a.data()[i];
  }
  CHECK(total == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(a.data()[2] == doctest::Approx(std::exp(2.0) / (1 + std::exp(1.0) + std::exp(2.0))));
}

TEST_CASE("cross entropy of uniform logits is log n") {
  std::vector<std::uint32_t> labels{0, 3};
  auto loss = cross_entropy(Tensor::zeros({2, 4}), labels);
  CHECK(loss.item() == doctest::Approx(std::log(4.0)).epsilon(1e-14));
}

TEST_CASE("kl divergence checks its inputs") {
  auto p = Tensor::from({1, 2}, {0.5, 0.5});
  auto q = Tensor::from({1, 2}, {0.25, 0.75});
  const double expect = 0.5 * std::log(0.5 / 0.25) + 0.5 * std::log(0.5 / 0.75);
  CHECK(kl_divergence(p, q).item() == doctest::Approx(expect).epsilon(1e-14));
  CHECK(kl_divergence(p, p).item() == 0.0);
  CHECK(throws_kind([&] { kl_divergence(Tensor::from({1, 2}, {0.7, 0.7}), q); }, ErrorKind::Domain));
  CHECK(throws_kind([&] { kl_divergence(p, Tensor::from({1, 2}, {1.0, 0.0})); }, ErrorKind::Domain));
}

TEST_CASE("gradients accumulate over shared uses") {
  auto x = Tensor::from({2}, {3, -1}, true);
  backward(sum(add(x, x)));
  CHECK(x.grad()[0] == 2.0);
  backward(sum(x));
  CHECK(x.grad()[0] == 3.0);
  x.zero_grad();
  CHECK(x.grad()[1] == 0.0);
}

TEST_CASE("backward contract") {
  auto x = Tensor::from({2}, {1, 2}, true);
  CHECK(throws_kind([&] { backward(x); }, ErrorKind::Contract));
  CHECK(throws_kind([&] { backward(Tensor::scalar(1.0)); }, ErrorKind::Contract));
  CHECK(throws_kind([&] { backward(Tensor()); }, ErrorKind::Contract));
}

TEST_CASE("tape is ordered parents first") {
  auto a = Tensor::from({2}, {1, 2}, true);
  auto b = Tensor::from({2}, {3, 4}, true);
  auto c = multiply(a, b);
  auto d = add(c, a);
  auto tape = Tape::record(sum(d));
  const auto nodes = tape.nodes();
  for (std::size_t i = 1; i < nodes.size(); ++i) CHECK(nodes[i - 1]->id < nodes[i]->id);
  CHECK(nodes.front()->id == a.id());
}

TEST_CASE("interior grads are released after backward") {
  auto x = Tensor::from({2}, {1, 2}, true);
  auto h = scale(x, 2.0);
  backward(sum(h));
  CHECK(x.has_grad());
  CHECK_FALSE(h.has_grad());
}

TEST_CASE("shape errors name the op") {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL("expected a shape error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Shape);
    CHECK(std::string(e.what()).find("matmul") != std::string::npos);
  }
  CHECK(throws_kind([&] { add(a, Tensor::zeros({3, 2})); }, ErrorKind::Shape));
  CHECK(throws_kind([&] { slice_cols(a, 2, 2); }, ErrorKind::Shape));
  std::vector<std::uint32_t> ids{7};
  CHECK(throws_kind([&] { embedding_lookup(a, ids); }, ErrorKind::Domain));
}

TEST_CASE("straight-through grad reaches scores for kept and pruned entries") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + uniform_index(rng, 4), k = 1 + uniform_index(rng, 4);
    auto w = testing::random_leaf(rng, {n, k});
    w.set_requires_grad(false);
    auto s = testing::random_leaf(rng, {n, k});
    std::vector<std::uint8_t> mask(n * k);
    for (auto& m : mask) m = static_cast<std::uint8_t>(uniform_index(rng, 2));
    auto x = testing::random_leaf(rng, {3, k});
    x.set_requires_grad(false);
    auto up = testing::random_leaf(rng, {3, n});
    up.set_requires_grad(false);

    auto wm = ste_mask_apply(w, mask, s);
    for (std::size_t i = 0; i < wm.numel(); ++i) CHECK(wm.data()[i] == w.data()[i] * mask[i]);
    backward(sum(multiply(linear(x, wm, Tensor()), up)));

    // dL/dW'[j][p] = sum_i up[i][j] * x[i][p]
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) {
        double g = 0.0;
        for (std::size_t i = 0; i < 3; ++i) g += up.at(i, j) * x.at(i, p);
        CHECK(s.grad()[j * k + p] == doctest::Approx(g * w.at(j, p)).epsilon(1e-13));
      }
    CHECK_FALSE(w.has_grad());
  }
}

TEST_CASE("ste_mask_apply rejects trainable weights and frozen scores") {
  auto w = Tensor::from({1, 2}, {1, 2}, true);
  auto s = Tensor::from({1, 2}, {0, 0}, true);
  std::vector<std::uint8_t> mask{1, 0};
  CHECK(throws_kind([&] { ste_mask_apply(w, mask, s); }, ErrorKind::Contract));
  w.set_requires_grad(false);
  s.set_requires_grad(false);
  CHECK(throws_kind([&] { ste_mask_apply(w, mask, s); }, ErrorKind::Contract));
  std::vector<std::uint8_t> short_mask{1};
  s.set_requires_grad(true);
  CHECK(throws_kind([&] { ste_mask_apply(w, short_mask, s); }, ErrorKind::Shape));
}

TEST_CASE("masked_weight routes grads for the fine-tuning baselines") {
  auto w = Tensor::from({1, 3}, {2, -3, 4}, true);
  auto s = Tensor::from({1, 3}, {0, 0, 0}, true);
  std::vector<std::uint8_t> mask{1, 0, 1};
  auto wm = masked_weight(w, mask, s);
  backward(sum(scale(wm, 5.0)));
  CHECK(w.grad()[0] == 5.0);
  CHECK(w.grad()[1] == 0.0);
  CHECK(w.grad()[2] == 5.0);
  CHECK(s.grad()[0] == 10.0);
  CHECK(s.grad()[1] == -15.0);
  CHECK(s.grad()[2] == 20.0);
}
