#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "lce/attention.hpp"
#include "testutil.hpp"

using namespace lce::attn;
using lce::BoolMatrix;
using lce::Index;
using lce::Tape;
using lce::Tensor;

namespace {

// Brute-force permitted-set enumeration straight from the pattern's
// definition, independent of build_plan's row construction.
BoolMatrix brute_mask(const AttentionPattern& p, Index n) {
  BoolMatrix mask(n, n, false);
  if (p.kind == PatternKind::Full) {
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < n; ++j) mask.set(i, j, true);
    return mask;
  }
  const Index h = p.window / 2;
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j)
      if (std::llabs(i - j) <= h) mask.set(i, j, true);
  for (Index g : p.global_positions)
    for (Index t = 0; t < n; ++t) {
      mask.set(g, t, true);
      mask.set(t, g, true);
    }
  if (p.kind == PatternKind::WindowGlobalRandom) {
    const Index b = p.block_size;
    for (const auto& [I, J] : random_block_pairs(p, n)) {
      for (Index i = I * b; i < std::min(n, (I + 1) * b); ++i)
        for (Index j = J * b; j < std::min(n, (J + 1) * b); ++j) {
          mask.set(i, j, true);
          mask.set(j, i, true);
        }
    }
  }
  return mask;
}

Index mask_sum(const BoolMatrix& m) {
  Index total = 0;
  for (auto bit : m.bits) total += bit;
  return total;
}

template <typename Scalar>
Tensor<Scalar> rand_tensor(Tape<Scalar>& tape, Index n, Index d, std::uint64_t key,
                           bool requires_grad = false) {
  lce::Rng rng(key);
  std::vector<Scalar> v(static_cast<std::size_t>(n * d));
  for (auto& x : v) x = static_cast<Scalar>(2.0 * rng.uniform() - 1.0);
  return tape.leaf({n, d}, std::move(v), requires_grad);
}

std::vector<Index> some_globals(lce::Rng& rng, Index n) {
  std::vector<Index> g;
  const int count = static_cast<int>(rng.uniform_int(3));
  for (int i = 0; i < count; ++i) g.push_back(static_cast<Index>(rng.uniform_int(static_cast<std::uint64_t>(n))));
  return g;
}

}  // namespace

TEST_CASE("plan pair counts: full, hand-enumerated window+global, full-coverage window") {
  CHECK(build_plan(AttentionPattern::full(), 4).total_pairs == 16);
  CHECK(count_pairs(AttentionPattern::full(), 4) == 16);

  // w=3 band over n=5 has 13 pairs; global row 0 adds (0,2),(0,3),(0,4) and
  // global column 0 adds (2,0),(3,0),(4,0): 19 in total by direct union.
  auto wg = AttentionPattern::window_global(3, {0});
  CHECK(mask_sum(brute_mask(wg, 5)) == 19);
  CHECK(build_plan(wg, 5).total_pairs == 19);
  CHECK(count_pairs(wg, 5) == 19);

  auto wg_plain = AttentionPattern::window_global(3, {});
  CHECK(count_pairs(wg_plain, 5) == 13);

  for (Index n : {1, 3, 9}) {
    auto wide = AttentionPattern::window_global(static_cast<int>(2 * n - 1), {});
    CHECK(count_pairs(wide, n) == n * n);
    CHECK(build_plan(wide, n).total_pairs == n * n);
  }
}

TEST_CASE("count_pairs equals brute-force mask summation across random patterns") {
  lce::Rng rng(31337);
  for (int trial = 0; trial < 60; ++trial) {
    const Index n = 1 + static_cast<Index>(rng.uniform_int(512));
    const int w = 1 + 2 * static_cast<int>(rng.uniform_int(16));
    auto globals = some_globals(rng, n);
    AttentionPattern p;
    if (trial % 3 == 0) {
      p = AttentionPattern::full();
    } else if (trial % 3 == 1) {
      p = AttentionPattern::window_global(w, globals);
    } else {
      p = AttentionPattern::window_global_random(
          w, globals, 1 + static_cast<int>(rng.uniform_int(64)),
          static_cast<int>(rng.uniform_int(4)), rng.next_u64(),
          static_cast<int>(rng.uniform_int(4)));
    }
    const Index want = mask_sum(brute_mask(p, n));
    CHECK(count_pairs(p, n) == want);
    auto plan = build_plan(p, n);
    CHECK(plan.total_pairs == want);
    // per-row lists agree with the brute mask
    const auto mask = brute_mask(p, n);
    for (Index i = 0; i < n; ++i) {
      Index row_count = 0;
      for (Index j = 0; j < n; ++j) row_count += mask.get(i, j) ? 1 : 0;
      CHECK(row_count == static_cast<Index>(plan.permitted[static_cast<std::size_t>(i)].size()));
      for (Index j : plan.permitted[static_cast<std::size_t>(i)]) CHECK(mask.get(i, j));
    }
  }
}

TEST_CASE("plans include the diagonal and keep global rows/columns symmetric") {
  lce::Rng rng(90210);
  for (int trial = 0; trial < 20; ++trial) {
    const Index n = 2 + static_cast<Index>(rng.uniform_int(100));
    auto p = AttentionPattern::window_global(1 + 2 * static_cast<int>(rng.uniform_int(5)),
                                             some_globals(rng, n));
    auto plan = build_plan(p, n);
    for (Index i = 0; i < n; ++i) {
      const auto& row = plan.permitted[static_cast<std::size_t>(i)];
      CHECK(std::binary_search(row.begin(), row.end(), i));  // diagonal
    }
    for (Index g : p.global_positions) {
      CHECK(plan.permitted[static_cast<std::size_t>(g)].size() == static_cast<std::size_t>(n));
      for (Index i = 0; i < n; ++i) {
        const auto& row = plan.permitted[static_cast<std::size_t>(i)];
        CHECK(std::binary_search(row.begin(), row.end(), g));
      }
    }
  }
}

TEST_CASE("pattern validation errors") {
  CHECK_THROWS_AS(build_plan(AttentionPattern::window_global(4, {}), 8), lce::ValueError);
  CHECK_THROWS_AS(build_plan(AttentionPattern::window_global(3, {8}), 8), lce::ValueError);
  Tape<double> t;
  auto q = rand_tensor(t, 4, 2, 1);
  CHECK_THROWS_AS(sparse_attention(q, q, q, AttentionPattern::full()), lce::ValueError);
}

TEST_CASE("n=1 attention returns v; full attention is permutation-equivariant") {
  Tape<double> t;
  auto q = rand_tensor(t, 1, 4, 11);
  auto k = rand_tensor(t, 1, 4, 12);
  auto v = rand_tensor(t, 1, 4, 13);
  auto out = full_attention(q, k, v);
  for (Index j = 0; j < 4; ++j) CHECK(out(0, j) == doctest::Approx(v(0, j)).epsilon(1e-15));

  // permuting rows of q permutes output rows identically (k, v permuted too)
  const Index n = 6, d = 3;
  std::vector<Index> perm = {3, 1, 5, 0, 2, 4};
  Tape<double> t2;
  auto q2 = rand_tensor(t2, n, d, 21);
  auto k2 = rand_tensor(t2, n, d, 22);
  auto v2 = rand_tensor(t2, n, d, 23);
  auto base = full_attention(q2, k2, v2);
  auto permute = [&](const Tensor<double>& x) {
    std::vector<double> out_v(static_cast<std::size_t>(n * d));
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < d; ++j)
        out_v[static_cast<std::size_t>(i * d + j)] = x(perm[static_cast<std::size_t>(i)], j);
    return t2.leaf({n, d}, std::move(out_v), false);
  };
  auto permuted = full_attention(permute(q2), permute(k2), permute(v2));
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < d; ++j)
      CHECK(permuted(i, j) ==
            doctest::Approx(base(perm[static_cast<std::size_t>(i)], j)).epsilon(1e-12));
}

TEST_CASE("near-uniform mixing for tiny query norms") {
  const Index n = 5, d = 4;
  Tape<double> t;
  lce::Rng rng(404);
  std::vector<double> tiny(static_cast<std::size_t>(n * d));
  for (auto& x : tiny) x = 1e-9 * (rng.uniform() - 0.5);
  auto q = t.leaf({n, d}, tiny, false);
  auto k = rand_tensor(t, n, d, 41);
  auto v = rand_tensor(t, n, d, 42);
  auto out = full_attention(q, k, v);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < d; ++j) {
      double mean_col = 0;
      for (Index r = 0; r < n; ++r) mean_col += v(r, j) / n;
      CHECK(out(i, j) == doctest::Approx(mean_col).epsilon(1e-6));
    }
}

template <typename Scalar>
static void equivalence_trials(int trials, double tol) {
  lce::Rng rng(777001);
  for (int trial = 0; trial < trials; ++trial) {
    const Index n = 2 + static_cast<Index>(rng.uniform_int(127));
    const Index d = 1 + static_cast<Index>(rng.uniform_int(32));
    AttentionPattern p;
    if (trial % 2 == 0)
      p = AttentionPattern::window_global(1 + 2 * static_cast<int>(rng.uniform_int(8)),
                                          some_globals(rng, n));
    else
      p = AttentionPattern::window_global_random(
          1 + 2 * static_cast<int>(rng.uniform_int(8)), some_globals(rng, n),
          1 + static_cast<int>(rng.uniform_int(32)), static_cast<int>(rng.uniform_int(3)),
          rng.next_u64(), static_cast<int>(rng.uniform_int(3)));
    Tape<Scalar> t;
    auto q = rand_tensor<Scalar>(t, n, d, rng.next_u64());
    auto k = rand_tensor<Scalar>(t, n, d, rng.next_u64());
    auto v = rand_tensor<Scalar>(t, n, d, rng.next_u64());
    auto sparse = sparse_attention(q, k, v, p);
    auto dense = full_attention(q, k, v, build_plan(p, n));
    double worst = 0;
    for (Index i = 0; i < n * d; ++i)
      worst = std::max(worst, std::fabs(static_cast<double>(sparse(i) - dense(i))));
    CHECK(worst <= tol);
  }
}

TEST_CASE("sparse kernel equals masked full attention (double and float paths)") {
  equivalence_trials<double>(40, lce::PathTol<double>::attention_equiv);
  equivalence_trials<float>(40, lce::PathTol<float>::attention_equiv);
}

TEST_CASE("window covering the sequence reproduces unmasked full attention") {
  lce::Rng rng(5150);
  for (Index n : {4, 17, 40}) {
    const Index d = 8;
    Tape<double> t;
    auto q = rand_tensor(t, n, d, rng.next_u64());
    auto k = rand_tensor(t, n, d, rng.next_u64());
    auto v = rand_tensor(t, n, d, rng.next_u64());
    auto p = AttentionPattern::window_global(static_cast<int>(2 * n - 1), {});
    auto sparse = sparse_attention(q, k, v, p);
    auto dense = full_attention(q, k, v);
    for (Index i = 0; i < n * d; ++i)
      CHECK(std::fabs(sparse(i) - dense(i)) <= 1e-10);
  }
}

TEST_CASE("gradients through sparse and masked-full attention agree") {
  lce::Rng rng(8181);
  for (int trial = 0; trial < 8; ++trial) {
    const Index n = 2 + static_cast<Index>(rng.uniform_int(63));
    const Index d = 1 + static_cast<Index>(rng.uniform_int(16));
    auto p = AttentionPattern::window_global_random(
        1 + 2 * static_cast<int>(rng.uniform_int(6)), some_globals(rng, n),
        1 + static_cast<int>(rng.uniform_int(16)), static_cast<int>(rng.uniform_int(3)),
        rng.next_u64(), trial);
    const std::uint64_t kq = rng.next_u64(), kk = rng.next_u64(), kv = rng.next_u64(),
                        kw = rng.next_u64();
    auto run = [&](bool use_sparse) {
      Tape<double> t;
      auto q = rand_tensor(t, n, d, kq, true);
      auto k = rand_tensor(t, n, d, kk, true);
      auto v = rand_tensor(t, n, d, kv, true);
      auto out = use_sparse ? sparse_attention(q, k, v, p)
                            : full_attention(q, k, v, build_plan(p, n));
      auto w = t.constant({n, d}, testutil::random_vec(static_cast<std::size_t>(n * d), kw));
      t.backward(lce::sum(lce::multiply(out, w)));
      std::vector<double> grads = *q.grad;
      grads.insert(grads.end(), k.grad->begin(), k.grad->end());
      grads.insert(grads.end(), v.grad->begin(), v.grad->end());
      return grads;
    };
    auto gs = run(true);
    auto gf = run(false);
    REQUIRE(gs.size() == gf.size());
    double worst = 0;
    for (std::size_t i = 0; i < gs.size(); ++i) worst = std::max(worst, std::fabs(gs[i] - gf[i]));
    CHECK(worst <= lce::PathTol<double>::grad_parity);
  }
}

TEST_CASE("instrumented counters: pair identity and the linear memory law") {
  const Index n = 256, d = 8;
  auto p = AttentionPattern::window_global_random(9, {0, 1}, 32, 2, 99, 0);
  auto plan = build_plan(p, n);
  Tape<float> t;
  auto q = rand_tensor<float>(t, n, d, 1);
  auto k = rand_tensor<float>(t, n, d, 2);
  auto v = rand_tensor<float>(t, n, d, 3);

  counters().reset();
  sparse_attention(q, k, v, std::make_shared<const AttendancePlan>(plan));
  CHECK(counters().pairs_scored == plan.total_pairs);
  CHECK(counters().peak_score_elements == plan.total_pairs);
  // peak score storage stays within twice n*(w + 2g + r*b)
  const long long bound = 2 * n * (9 + 2 * 2 + 2 * 32);
  CHECK(counters().peak_score_elements <= bound);

  counters().reset();
  full_attention(q, k, v);
  CHECK(counters().pairs_scored == n * n);
  CHECK(counters().peak_score_elements == 2 * n * n);

  // whenever w + 2g + r*b < n, the sparse buffer is smaller than the full one
  CHECK(plan.total_pairs < n * n);
}

TEST_CASE("random blocks are deterministic per (seed, layer) and differ across layers") {
  const Index n = 512;
  auto base = AttentionPattern::window_global_random(9, {0}, 64, 2, 1234, 0);
  auto again = base;
  CHECK(random_block_pairs(base, n) == random_block_pairs(again, n));

  auto other_layer = base;
  other_layer.layer_id = 1;
  CHECK(random_block_pairs(base, n) != random_block_pairs(other_layer, n));

  auto other_seed = base;
  other_seed.seed = 4321;
  CHECK(random_block_pairs(base, n) != random_block_pairs(other_seed, n));
}
