#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "lce/tensor.hpp"
#include "testutil.hpp"

using lce::BoolMatrix;
using lce::Index;
using lce::Tape;
using lce::Tensor;

namespace {

Tensor<double> make(Tape<double>& tape, lce::Shape shape, std::vector<double> v,
                    bool requires_grad = true) {
  return tape.leaf(shape, std::move(v), requires_grad);
}

}  // namespace

TEST_CASE("matmul identity cases") {
  Tape<double> tape;
  auto eye = make(tape, {3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}, false);
  auto x = make(tape, {3, 2}, {1, 2, 3, 4, 5, 6}, false);
  auto out = lce::matmul(eye, x);
  for (Index i = 0; i < 6; ++i) CHECK(out(i / 2, i % 2) == doctest::Approx((*x.values)[i]));

  auto a = make(tape, {2, 2}, {1, 2, 3, 4}, false);
  auto b = make(tape, {2, 2}, {1, 0, 0, 1}, false);
  auto ab = lce::matmul(a, b);
  CHECK(ab(0, 0) == 1);
  CHECK(ab(0, 1) == 2);
  CHECK(ab(1, 0) == 3);
  CHECK(ab(1, 1) == 4);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tape<double> tape;
  auto a = make(tape, {2, 3}, std::vector<double>(6, 1.0));
  auto b = make(tape, {2, 2}, std::vector<double>(4, 1.0));
  CHECK_THROWS_WITH_AS(lce::matmul(a, b), doctest::Contains("[2,3]"), lce::ShapeError);
  CHECK_THROWS_WITH_AS(lce::matmul(a, b), doctest::Contains("[2,2]"), lce::ShapeError);
}

TEST_CASE("matmul gradient matches finite differences") {
  auto a_store = testutil::random_vec(35, 11);
  auto b_store = testutil::random_vec(21, 12);
  auto forward = [&]() {
    Tape<double> t;
    auto a = t.leaf({5, 7}, a_store);
    auto b = t.leaf({7, 3}, b_store);
    return lce::sum(lce::matmul(a, b)).item();
  };
  // Analytic gradients from one recorded run.
  Tape<double> t;
  auto a = t.leaf({5, 7}, a_store);
  auto b = t.leaf({7, 3}, b_store);
  auto loss = lce::sum(lce::matmul(a, b));
  t.backward(loss);

  // d sum(a.b) / d a[i,k] = sum_j b[k,j]: the column-sum of b broadcast.
  for (Index i = 0; i < 5; ++i)
    for (Index k = 0; k < 7; ++k) {
      double col_sum = 0;
      for (Index j = 0; j < 3; ++j) col_sum += b_store[static_cast<std::size_t>(k * 3 + j)];
      CHECK((*a.grad)[i * 7 + k] == doctest::Approx(col_sum).epsilon(1e-12));
    }
  CHECK(testutil::max_grad_rel_err(a_store, *a.grad, forward, 1e-5) <= 1e-6);
  CHECK(testutil::max_grad_rel_err(b_store, *b.grad, forward, 1e-5) <= 1e-6);
}

TEST_CASE("matmul transpose_b matches explicit transpose") {
  auto a_store = testutil::random_vec(12, 21);
  auto b_store = testutil::random_vec(20, 22);  // stored as [5,4] for a [3,4] x [4,5]
  Tape<double> t;
  auto a = t.leaf({3, 4}, a_store);
  auto bt = t.leaf({5, 4}, b_store);
  auto out = lce::matmul(a, bt, /*transpose_b=*/true);
  REQUIRE(out.shape == lce::Shape{3, 5});
  for (Index i = 0; i < 3; ++i)
    for (Index j = 0; j < 5; ++j) {
      double acc = 0;
      for (Index k = 0; k < 4; ++k)
        acc += a_store[static_cast<std::size_t>(i * 4 + k)] *
               b_store[static_cast<std::size_t>(j * 4 + k)];
      CHECK(out(i, j) == doctest::Approx(acc).epsilon(1e-12));
    }
  auto loss = lce::sum(out);
  t.backward(loss);
  auto forward = [&]() {
    Tape<double> t2;
    auto a2 = t2.leaf({3, 4}, a_store);
    auto b2 = t2.leaf({5, 4}, b_store);
    return lce::sum(lce::matmul(a2, b2, true)).item();
  };
  CHECK(testutil::max_grad_rel_err(a_store, *a.grad, forward, 1e-5) <= 1e-6);
  CHECK(testutil::max_grad_rel_err(b_store, *bt.grad, forward, 1e-5) <= 1e-6);
}

TEST_CASE("masked_softmax uniform and pair-symmetric cases") {
  Tape<double> tape;
  auto scores = make(tape, {4, 4}, std::vector<double>(16, 0.0), false);
  BoolMatrix all(4, 4, true);
  auto probs = lce::masked_softmax(scores, all);
  for (Index i = 0; i < 16; ++i) CHECK((*probs.values)[i] == doctest::Approx(0.25));

  auto s2 = make(tape, {1, 3}, {10, 10, 123456.0}, false);
  BoolMatrix m2(1, 3, true);
  m2.set(0, 2, false);
  auto p2 = lce::masked_softmax(s2, m2);
  CHECK(p2(0, 0) == doctest::Approx(0.5));
  CHECK(p2(0, 1) == doctest::Approx(0.5));
  CHECK(p2(0, 2) == 0.0);  // exactly zero
}

TEST_CASE("masked_softmax matches direct exponentiation oracle") {
  lce::Rng rng(777);
  for (int trial = 0; trial < 20; ++trial) {
    Tape<double> tape;
    std::vector<double> s(36);
    for (auto& x : s) x = 4.0 * (rng.uniform() - 0.5);
    BoolMatrix mask(6, 6);
    for (Index i = 0; i < 6; ++i) {
      for (Index j = 0; j < 6; ++j) mask.set(i, j, rng.uniform() < 0.5);
      mask.set(i, i, true);  // keep rows non-degenerate
    }
    auto scores = make(tape, {6, 6}, s, false);
    auto p = lce::masked_softmax(scores, mask);
    for (Index i = 0; i < 6; ++i) {
      double denom = 0;
      for (Index j = 0; j < 6; ++j)
        if (mask.get(i, j)) denom += std::exp(s[static_cast<std::size_t>(i * 6 + j)]);
      double row_sum = 0;
      for (Index j = 0; j < 6; ++j) {
        const double want =
            mask.get(i, j) ? std::exp(s[static_cast<std::size_t>(i * 6 + j)]) / denom : 0.0;
        CHECK(std::fabs(p(i, j) - want) <= 1e-9);
        row_sum += p(i, j);
      }
      CHECK(std::fabs(row_sum - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("masked_softmax rejects degenerate rows") {
  Tape<double> tape;
  auto scores = make(tape, {2, 2}, {1, 2, 3, 4}, false);
  BoolMatrix mask(2, 2, true);
  mask.set(1, 0, false);
  mask.set(1, 1, false);
  CHECK_THROWS_AS(lce::masked_softmax(scores, mask), lce::ValueError);
}

TEST_CASE("masked_softmax gradient vs finite differences") {
  auto s_store = testutil::random_vec(25, 31, 2.0);
  BoolMatrix mask(5, 5);
  lce::Rng rng(32);
  for (Index i = 0; i < 5; ++i) {
    for (Index j = 0; j < 5; ++j) mask.set(i, j, rng.uniform() < 0.6);
    mask.set(i, i, true);
  }
  auto forward = [&]() {
    Tape<double> t;
    auto s = t.leaf({5, 5}, s_store);
    auto p = lce::masked_softmax(s, mask);
    // weight the rows unevenly so grads are generic
    auto w = t.constant({5, 5}, testutil::random_vec(25, 33));
    return lce::sum(lce::multiply(p, w)).item();
  };
  Tape<double> t;
  auto s = t.leaf({5, 5}, s_store);
  auto p = lce::masked_softmax(s, mask);
  auto w = t.constant({5, 5}, testutil::random_vec(25, 33));
  t.backward(lce::sum(lce::multiply(p, w)));
  CHECK(testutil::max_grad_rel_err(s_store, *s.grad, forward) <= 1e-5);
}

TEST_CASE("layer_norm closed forms") {
  Tape<double> tape;
  auto gain = make(tape, {4}, {1, 1, 1, 1}, false);
  auto bias = make(tape, {4}, {0, 0, 0, 0}, false);
  auto constant = make(tape, {4}, {3.5, 3.5, 3.5, 3.5}, false);
  auto z = lce::layer_norm(constant, gain, bias);
  for (Index i = 0; i < 4; ++i) CHECK(std::fabs(z(i)) <= 1e-12);

  auto g2 = make(tape, {2}, {1, 1}, false);
  auto b2 = make(tape, {2}, {0, 0}, false);
  auto x2 = make(tape, {2}, {1, -1}, false);
  auto y = lce::layer_norm(x2, g2, b2);
  // variance 1, so y = x / sqrt(1 + eps)
  const double want = 1.0 / std::sqrt(1.0 + 1e-5);
  CHECK(y(0) == doctest::Approx(want).epsilon(1e-12));
  CHECK(y(1) == doctest::Approx(-want).epsilon(1e-12));
  CHECK(std::fabs(y(0) - 1.0) <= 1e-3);
}

TEST_CASE("layer_norm gradient vs finite differences") {
  auto x_store = testutil::random_vec(24, 41, 2.0);
  auto g_store = testutil::random_vec(8, 42);
  auto b_store = testutil::random_vec(8, 43);
  auto forward = [&]() {
    Tape<double> t;
    auto x = t.leaf({3, 8}, x_store);
    auto g = t.leaf({8}, g_store);
    auto b = t.leaf({8}, b_store);
    auto w = t.constant({3, 8}, testutil::random_vec(24, 44));
    return lce::sum(lce::multiply(lce::layer_norm(x, g, b), w)).item();
  };
  Tape<double> t;
  auto x = t.leaf({3, 8}, x_store);
  auto g = t.leaf({8}, g_store);
  auto b = t.leaf({8}, b_store);
  auto w = t.constant({3, 8}, testutil::random_vec(24, 44));
  t.backward(lce::sum(lce::multiply(lce::layer_norm(x, g, b), w)));
  CHECK(testutil::max_grad_rel_err(x_store, *x.grad, forward) <= 1e-5);
  CHECK(testutil::max_grad_rel_err(g_store, *g.grad, forward) <= 1e-5);
  CHECK(testutil::max_grad_rel_err(b_store, *b.grad, forward) <= 1e-5);
}

TEST_CASE("cross_entropy closed forms and oracle") {
  Tape<double> tape;
  auto uniform = make(tape, {1, 256}, std::vector<double>(256, 0.0), false);
  auto l1 = lce::cross_entropy(uniform, {7});
  CHECK(l1.item() == doctest::Approx(std::log(256.0)).epsilon(1e-12));
  CHECK(l1.item() == doctest::Approx(5.5452).epsilon(1e-4));

  std::vector<double> onehot(5, 0.0);
  onehot[2] = 20.0;
  auto sharp = make(tape, {1, 5}, onehot, false);
  CHECK(lce::cross_entropy(sharp, {2}).item() < 1e-8);

  // random case against a direct log-sum-exp oracle
  auto z = testutil::random_vec(40, 55, 3.0);
  std::vector<int> targets = {0, 4, 2, 1, 3, 0, 2, 4};
  auto logits = make(tape, {8, 5}, z, false);
  auto loss = lce::cross_entropy(logits, targets);
  double want = 0;
  for (int i = 0; i < 8; ++i) {
    double lse = 0;
    for (int j = 0; j < 5; ++j) lse += std::exp(z[static_cast<std::size_t>(i * 5 + j)]);
    want += std::log(lse) - z[static_cast<std::size_t>(i * 5 + targets[static_cast<std::size_t>(i)])];
  }
  want /= 8;
  CHECK(std::fabs(loss.item() - want) <= 1e-9);
}

TEST_CASE("cross_entropy ignore-index and empty-loss error") {
  Tape<double> tape;
  auto logits = make(tape, {3, 4}, testutil::random_vec(12, 61), false);
  auto partial = lce::cross_entropy(logits, {1, lce::kIgnoreIndex, 2});
  auto full = lce::cross_entropy(logits, {1, 1, 2});
  CHECK(partial.item() != doctest::Approx(full.item()));
  CHECK_THROWS_AS(
      lce::cross_entropy(logits, {lce::kIgnoreIndex, lce::kIgnoreIndex, lce::kIgnoreIndex}),
      lce::ValueError);
  CHECK_THROWS_AS(lce::cross_entropy(logits, {1, 9, 2}), lce::ValueError);
}

TEST_CASE("cross_entropy gradient vs finite differences") {
  auto z = testutil::random_vec(15, 71, 2.0);
  std::vector<int> targets = {2, lce::kIgnoreIndex, 0};
  auto forward = [&]() {
    Tape<double> t;
    auto logits = t.leaf({3, 5}, z);
    return lce::cross_entropy(logits, targets).item();
  };
  Tape<double> t;
  auto logits = t.leaf({3, 5}, z);
  t.backward(lce::cross_entropy(logits, targets));
  CHECK(testutil::max_grad_rel_err(z, *logits.grad, forward) <= 1e-6);
}

TEST_CASE("backward basics") {
  Tape<double> t;
  auto x = t.leaf({2, 3}, testutil::random_vec(6, 81));
  auto loss = lce::sum(x);
  t.backward(loss);
  for (Index i = 0; i < 6; ++i) CHECK((*x.grad)[i] == doctest::Approx(1.0));

  Tape<double> t2;
  auto y = t2.leaf({4}, testutil::random_vec(4, 82));
  auto q = lce::scale(lce::sum(lce::multiply(y, y)), 0.5);
  t2.backward(q);
  for (Index i = 0; i < 4; ++i)
    CHECK((*y.grad)[i] == doctest::Approx((*y.values)[i]).epsilon(1e-12));
}

TEST_CASE("backward rejects non-scalar and double invocation") {
  Tape<double> t;
  auto x = t.leaf({2, 2}, testutil::random_vec(4, 91));
  auto y = lce::add(x, x);
  CHECK_THROWS_AS(t.backward(y), lce::TapeError);

  Tape<double> t2;
  auto x2 = t2.leaf({3}, testutil::random_vec(3, 92));
  auto loss = lce::sum(x2);
  t2.backward(loss);
  CHECK_THROWS_AS(t2.backward(loss), lce::TapeError);
}

TEST_CASE("gelu, slice, concat, reshape, embedding, max: composed graph FD audit") {
  auto table_store = testutil::random_vec(6 * 4, 101);
  auto w_store = testutil::random_vec(4 * 4, 102);
  auto g_store = testutil::random_vec(4, 103);
  auto b_store = testutil::random_vec(4, 104);
  std::vector<int> ids = {0, 3, 5, 1, 3};
  auto forward = [&]() {
    Tape<double> t;
    auto table = t.leaf({6, 4}, table_store);
    auto w = t.leaf({4, 4}, w_store);
    auto g = t.leaf({4}, g_store);
    auto b = t.leaf({4}, b_store);
    auto h = lce::embedding_gather(table, ids);
    h = lce::layer_norm(h, g, b);
    h = lce::gelu(lce::matmul(h, w));
    auto left = lce::slice(h, 1, 0, 2);
    auto right = lce::slice(h, 1, 2, 2);
    auto mx = lce::elementwise_max(left, right);
    auto flat = lce::reshape(lce::concatenate<double>({mx, left}, 1), {20, 1});
    return lce::sum(lce::multiply(flat, flat)).item();
  };
  Tape<double> t;
  auto table = t.leaf({6, 4}, table_store);
  auto w = t.leaf({4, 4}, w_store);
  auto g = t.leaf({4}, g_store);
  auto b = t.leaf({4}, b_store);
  auto h = lce::embedding_gather(table, ids);
  h = lce::layer_norm(h, g, b);
  h = lce::gelu(lce::matmul(h, w));
  auto left = lce::slice(h, 1, 0, 2);
  auto right = lce::slice(h, 1, 2, 2);
  auto mx = lce::elementwise_max(left, right);
  auto flat = lce::reshape(lce::concatenate<double>({mx, left}, 1), {20, 1});
  t.backward(lce::sum(lce::multiply(flat, flat)));
  CHECK(testutil::max_grad_rel_err(table_store, *table.grad, forward) <= 1e-3);
  CHECK(testutil::max_grad_rel_err(w_store, *w.grad, forward) <= 1e-3);
  CHECK(testutil::max_grad_rel_err(g_store, *g.grad, forward) <= 1e-3);
  CHECK(testutil::max_grad_rel_err(b_store, *b.grad, forward) <= 1e-3);
}

TEST_CASE("forward and gradients are bitwise deterministic across runs") {
  auto run = [](std::uint64_t seed) {
    Tape<double> t;
    auto a = t.leaf({6, 6}, testutil::random_vec(36, seed));
    auto b = t.leaf({6, 6}, testutil::random_vec(36, seed + 1));
    auto g = t.leaf({6}, testutil::random_vec(6, seed + 2));
    auto bias = t.leaf({6}, testutil::random_vec(6, seed + 3));
    BoolMatrix mask(6, 6, true);
    auto h = lce::layer_norm(lce::matmul(a, b), g, bias);
    auto p = lce::masked_softmax(h, mask);
    auto loss = lce::sum(lce::multiply(p, p));
    t.backward(loss);
    std::vector<double> out = *a.grad;
    out.insert(out.end(), b.grad->begin(), b.grad->end());
    out.push_back(loss.item());
    return out;
  };
  auto r1 = run(2024);
  auto r2 = run(2024);
  CHECK(r1 == r2);  // bitwise
}

TEST_CASE("embedding_gather validates ids") {
  Tape<double> t;
  auto table = t.leaf({4, 2}, testutil::random_vec(8, 111));
  CHECK_THROWS_AS(lce::embedding_gather(table, {0, 4}), lce::ValueError);
  CHECK_THROWS_AS(lce::embedding_gather(table, {-1}), lce::ValueError);
}

TEST_CASE("bias-broadcast add gradient") {
  auto x_store = testutil::random_vec(12, 121);
  auto b_store = testutil::random_vec(4, 122);
  auto forward = [&]() {
    Tape<double> t;
    auto x = t.leaf({3, 4}, x_store);
    auto b = t.leaf({4}, b_store);
    auto y = lce::add(x, b);
    return lce::sum(lce::multiply(y, y)).item();
  };
  Tape<double> t;
  auto x = t.leaf({3, 4}, x_store);
  auto b = t.leaf({4}, b_store);
  auto y = lce::add(x, b);
  t.backward(lce::sum(lce::multiply(y, y)));
  CHECK(testutil::max_grad_rel_err(b_store, *b.grad, forward) <= 1e-6);
}
