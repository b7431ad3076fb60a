#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <set>
#include <vector>

#include "lce/rng.hpp"
#include "lce/tensor.hpp"

namespace lce::attn {

enum class PatternKind { Full, WindowGlobal, WindowGlobalRandom };

// Declarative description of which (query, key) pairs attend. The window
// width is the total band width (symmetric, odd); global positions attend
// everywhere and are attended from everywhere; the random variant adds
// blockatomic attendance drawn per (seed, layer, block row).
struct AttentionPattern {
  PatternKind kind = PatternKind::Full;
  int window = 1;
  std::vector<Index> global_positions;
  int block_size = 64;
  int random_blocks = 0;
  std::uint64_t seed = 0;
  int layer_id = 0;

  static AttentionPattern full() { return {}; }

  static AttentionPattern window_global(int window, std::vector<Index> globals) {
    AttentionPattern p;
    p.kind = PatternKind::WindowGlobal;
    p.window = window;
    p.global_positions = std::move(globals);
    p.normalize();
    return p;
  }

  static AttentionPattern window_global_random(int window, std::vector<Index> globals,
                                               int block_size, int random_blocks,
                                               std::uint64_t seed, int layer_id = 0) {
    AttentionPattern p;
    p.kind = PatternKind::WindowGlobalRandom;
    p.window = window;
    p.global_positions = std::move(globals);
    p.block_size = block_size;
    p.random_blocks = random_blocks;
    p.seed = seed;
    p.layer_id = layer_id;
    p.normalize();
    return p;
  }

  void normalize() {
    std::sort(global_positions.begin(), global_positions.end());
    global_positions.erase(std::unique(global_positions.begin(), global_positions.end()),
                           global_positions.end());
  }

  void check(Index n) const {
    if (n < 1) throw ValueError("attention pattern: sequence length must be >= 1");
    if (kind == PatternKind::Full) return;
    if (window < 1 || window % 2 == 0)
      throw ValueError("attention pattern: window must be odd and >= 1, got " +
                       std::to_string(window));
    for (Index g : global_positions)
      if (g < 0 || g >= n)
        throw ValueError("attention pattern: global index " + std::to_string(g) +
                         " outside sequence of length " + std::to_string(n));
    if (kind == PatternKind::WindowGlobalRandom) {
      if (block_size < 1) throw ValueError("attention pattern: block size must be >= 1");
      if (random_blocks < 0) throw ValueError("attention pattern: random blocks must be >= 0");
    }
  }
};

struct AttendancePlan {
  Index n = 0;
  std::vector<std::vector<Index>> permitted;  // sorted key lists per query row
  Index total_pairs = 0;
};

// Unordered non-global block pairs added by the random variant, replayed
// deterministically from (seed, layer_id, block row).
inline std::set<std::pair<Index, Index>> random_block_pairs(const AttentionPattern& p, Index n) {
  std::set<std::pair<Index, Index>> pairs;
  if (p.kind != PatternKind::WindowGlobalRandom || p.random_blocks == 0) return pairs;
  const Index b = p.block_size;
  const Index nblocks = (n + b - 1) / b;
  const Index h = p.window / 2;
  std::vector<char> global_block(static_cast<std::size_t>(nblocks), 0);
  for (Index g : p.global_positions) global_block[static_cast<std::size_t>(g / b)] = 1;
  auto lo = [&](Index blk) { return blk * b; };
  auto hi = [&](Index blk) { return std::min(n, (blk + 1) * b) - 1; };
  for (Index I = 0; I < nblocks; ++I) {
    if (global_block[static_cast<std::size_t>(I)]) continue;
    std::vector<Index> cands;
    for (Index J = 0; J < nblocks; ++J) {
      if (J == I || global_block[static_cast<std::size_t>(J)]) continue;
      // exclude blocks already reachable through the window band
      if (lo(J) <= hi(I) + h && hi(J) >= lo(I) - h) continue;
      cands.push_back(J);
    }
    Rng rng({p.seed, static_cast<std::uint64_t>(p.layer_id), static_cast<std::uint64_t>(I)});
    const Index draws = std::min<Index>(p.random_blocks, static_cast<Index>(cands.size()));
    for (Index d = 0; d < draws; ++d) {
      const std::size_t pick = static_cast<std::size_t>(d) +
                               rng.uniform_int(cands.size() - static_cast<std::size_t>(d));
      std::swap(cands[static_cast<std::size_t>(d)], cands[pick]);
      const Index J = cands[static_cast<std::size_t>(d)];
      pairs.emplace(std::min(I, J), std::max(I, J));
    }
  }
  return pairs;
}

inline AttendancePlan build_plan(const AttentionPattern& pattern, Index n) {
  pattern.check(n);
  AttendancePlan plan;
  plan.n = n;
  plan.permitted.resize(static_cast<std::size_t>(n));

  if (pattern.kind == PatternKind::Full) {
    std::vector<Index> all(static_cast<std::size_t>(n));
    for (Index j = 0; j < n; ++j) all[static_cast<std::size_t>(j)] = j;
    for (Index i = 0; i < n; ++i) plan.permitted[static_cast<std::size_t>(i)] = all;
    plan.total_pairs = n * n;
    return plan;
  }

  const Index h = pattern.window / 2;
  const auto& globals = pattern.global_positions;
  std::vector<char> is_global(static_cast<std::size_t>(n), 0);
  for (Index g : globals) is_global[static_cast<std::size_t>(g)] = 1;

  // Random block pairs, grouped per block row for the row loop below.
  std::vector<std::vector<Index>> extra_blocks;
  Index b = pattern.block_size;
  if (pattern.kind == PatternKind::WindowGlobalRandom) {
    const Index nblocks = (n + b - 1) / b;
    extra_blocks.resize(static_cast<std::size_t>(nblocks));
    for (const auto& [I, J] : random_block_pairs(pattern, n)) {
      extra_blocks[static_cast<std::size_t>(I)].push_back(J);
      extra_blocks[static_cast<std::size_t>(J)].push_back(I);
    }
    for (auto& v : extra_blocks) std::sort(v.begin(), v.end());
  }

  for (Index i = 0; i < n; ++i) {
    auto& row = plan.permitted[static_cast<std::size_t>(i)];
    if (is_global[static_cast<std::size_t>(i)]) {
      row.resize(static_cast<std::size_t>(n));
      for (Index j = 0; j < n; ++j) row[static_cast<std::size_t>(j)] = j;
    } else {
      const Index wlo = std::max<Index>(0, i - h);
      const Index whi = std::min<Index>(n - 1, i + h);
      for (Index g : globals) {
        if (g < wlo)
          row.push_back(g);
        else
          break;
      }
      for (Index j = wlo; j <= whi; ++j) row.push_back(j);
      for (Index g : globals)
        if (g > whi) row.push_back(g);
      if (!extra_blocks.empty()) {
        for (Index J : extra_blocks[static_cast<std::size_t>(i / b)]) {
          const Index lo = J * b;
          const Index hi = std::min(n, (J + 1) * b);
          for (Index j = lo; j < hi; ++j) row.push_back(j);
        }
        std::sort(row.begin(), row.end());
      }
    }
    plan.total_pairs += static_cast<Index>(row.size());
  }
  return plan;
}

// Pair count without materializing per-row lists: closed form for the banded
// and global parts, plus a replay of the random block draw.
inline Index count_pairs(const AttentionPattern& pattern, Index n) {
  pattern.check(n);
  if (pattern.kind == PatternKind::Full) return n * n;
  const Index h = pattern.window / 2;
  const auto& globals = pattern.global_positions;
  const Index g = static_cast<Index>(globals.size());

  std::vector<Index> block_extra;  // extra key columns for rows of each block
  Index b = pattern.block_size;
  if (pattern.kind == PatternKind::WindowGlobalRandom) {
    block_extra.assign(static_cast<std::size_t>((n + b - 1) / b), 0);
    for (const auto& [I, J] : random_block_pairs(pattern, n)) {
      const Index size_i = std::min(n, (I + 1) * b) - I * b;
      const Index size_j = std::min(n, (J + 1) * b) - J * b;
      block_extra[static_cast<std::size_t>(I)] += size_j;
      block_extra[static_cast<std::size_t>(J)] += size_i;
    }
  }

  Index total = 0;
  for (Index i = 0; i < n; ++i) {
    const bool global_row = std::binary_search(globals.begin(), globals.end(), i);
    if (global_row) {
      total += n;
      continue;
    }
    const Index wlo = std::max<Index>(0, i - h);
    const Index whi = std::min<Index>(n - 1, i + h);
    total += whi - wlo + 1;
    // globals outside the window band
    const auto lo_it = std::lower_bound(globals.begin(), globals.end(), wlo);
    const auto hi_it = std::upper_bound(globals.begin(), globals.end(), whi);
    total += g - static_cast<Index>(hi_it - lo_it);
    if (!block_extra.empty()) total += block_extra[static_cast<std::size_t>(i / b)];
  }
  return total;
}

inline BoolMatrix mask_from_plan(const AttendancePlan& plan) {
  BoolMatrix mask(plan.n, plan.n, false);
  for (Index i = 0; i < plan.n; ++i)
    for (Index j : plan.permitted[static_cast<std::size_t>(i)]) mask.set(i, j, true);
  return mask;
}

// Instrumentation shared with the benchmark harness. Deterministic: counts
// pair work and score-buffer allocations, never timing.
struct Counters {
  long long pairs_scored = 0;
  long long score_elements = 0;
  long long peak_score_elements = 0;

  void reset() { *this = Counters{}; }
  void note_alloc(long long elems) {
    score_elements += elems;
    peak_score_elements = std::max(peak_score_elements, score_elements);
  }
};

inline Counters& counters() {
  thread_local Counters c;
  return c;
}

namespace detail {

template <typename Scalar>
void check_qkv(const Tensor<Scalar>& q, const Tensor<Scalar>& k, const Tensor<Scalar>& v) {
  if (q.rank() != 2 || k.shape != q.shape || v.shape != q.shape)
    throw ShapeError("attention: q, k, v must share an [n,d] shape; got " + shape_str(q.shape) +
                     ", " + shape_str(k.shape) + ", " + shape_str(v.shape));
}

}  // namespace detail

// Reference kernel: materializes the full n-by-n score matrix, masks it, and
// mixes values. Composed from recorded ops, so gradients come for free.
template <typename Scalar>
Tensor<Scalar> full_attention(const Tensor<Scalar>& q, const Tensor<Scalar>& k,
                              const Tensor<Scalar>& v, const AttendancePlan& plan) {
  detail::check_qkv(q, k, v);
  const Index n = q.dim(0), d = q.dim(1);
  if (plan.n != n)
    throw ShapeError("attention: plan built for n=" + std::to_string(plan.n) + ", inputs have n=" +
                     std::to_string(n));
  counters().pairs_scored += n * n;
  counters().note_alloc(2 * n * n);  // scores + probabilities
  auto scores = scale(matmul(q, k, /*transpose_b=*/true), Scalar(1) / std::sqrt(Scalar(d)));
  auto probs = masked_softmax(scores, mask_from_plan(plan));
  return matmul(probs, v);
}

template <typename Scalar>
Tensor<Scalar> full_attention(const Tensor<Scalar>& q, const Tensor<Scalar>& k,
                              const Tensor<Scalar>& v) {
  return full_attention(q, k, v, build_plan(AttentionPattern::full(), q.dim(0)));
}

// Sparse kernel: touches only permitted pairs. Scores are written into one
// flat buffer of plan.total_pairs elements, softmaxed in place, kept for the
// backward rule. Never materializes n-by-n storage.
template <typename Scalar>
Tensor<Scalar> sparse_attention(const Tensor<Scalar>& q, const Tensor<Scalar>& k,
                                const Tensor<Scalar>& v,
                                std::shared_ptr<const AttendancePlan> plan) {
  detail::check_qkv(q, k, v);
  const Index n = q.dim(0), d = q.dim(1);
  if (!plan || plan->n != n)
    throw ShapeError("sparse_attention: plan does not match sequence length " + std::to_string(n));

  using RowVec = Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>;
  using MutRow = Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>;

  counters().pairs_scored += plan->total_pairs;
  counters().note_alloc(plan->total_pairs);

  Tape<Scalar>* tape = q.tape;
  Tensor<Scalar> out = tape->alloc({n, d}, q.requires_grad || k.requires_grad || v.requires_grad);
  auto weights = std::make_shared<std::vector<Scalar>>(static_cast<std::size_t>(plan->total_pairs));
  auto row_offset = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(n) + 1, 0);
  const Scalar inv_sqrt_d = Scalar(1) / std::sqrt(Scalar(d));

  Index cursor = 0;
  for (Index i = 0; i < n; ++i) {
    (*row_offset)[static_cast<std::size_t>(i)] = cursor;
    const auto& cols = plan->permitted[static_cast<std::size_t>(i)];
    RowVec qi(q.data() + i * d, d);
    Scalar mx = std::numeric_limits<Scalar>::lowest();
    for (std::size_t t = 0; t < cols.size(); ++t) {
      const Scalar s = qi.dot(RowVec(k.data() + cols[t] * d, d)) * inv_sqrt_d;
      (*weights)[static_cast<std::size_t>(cursor) + t] = s;
      mx = std::max(mx, s);
    }
    Scalar denom = 0;
    for (std::size_t t = 0; t < cols.size(); ++t) {
      Scalar& w = (*weights)[static_cast<std::size_t>(cursor) + t];
      w = std::exp(w - mx);
      denom += w;
    }
    MutRow oi(out.data() + i * d, d);
    for (std::size_t t = 0; t < cols.size(); ++t) {
      Scalar& w = (*weights)[static_cast<std::size_t>(cursor) + t];
      w /= denom;
      oi += w * RowVec(v.data() + cols[t] * d, d);
    }
    cursor += static_cast<Index>(cols.size());
  }
  (*row_offset)[static_cast<std::size_t>(n)] = cursor;

  if (out.requires_grad) {
    tape->record([q, k, v, out, plan, weights, row_offset, n, d, inv_sqrt_d]() {
      std::vector<Scalar> dscore;
      for (Index i = 0; i < n; ++i) {
        const auto& cols = plan->permitted[static_cast<std::size_t>(i)];
        const Index base = (*row_offset)[static_cast<std::size_t>(i)];
        RowVec gout(out.grad_data() + i * d, d);
        dscore.assign(cols.size(), Scalar(0));
        Scalar gbar = 0;
        for (std::size_t t = 0; t < cols.size(); ++t) {
          const Scalar gj = gout.dot(RowVec(v.data() + cols[t] * d, d));
          dscore[t] = gj;
          gbar += (*weights)[static_cast<std::size_t>(base) + t] * gj;
        }
        for (std::size_t t = 0; t < cols.size(); ++t) {
          const Scalar w = (*weights)[static_cast<std::size_t>(base) + t];
          dscore[t] = w * (dscore[t] - gbar);
          if (v.requires_grad)
            MutRow(v.grad_data() + cols[t] * d, d) += w * gout;
        }
        if (q.requires_grad) {
          MutRow dqi(q.grad_data() + i * d, d);
          for (std::size_t t = 0; t < cols.size(); ++t)
            dqi += dscore[t] * inv_sqrt_d * RowVec(k.data() + cols[t] * d, d);
        }
        if (k.requires_grad) {
          RowVec qi(q.data() + i * d, d);
          for (std::size_t t = 0; t < cols.size(); ++t)
            MutRow(k.grad_data() + cols[t] * d, d) += dscore[t] * inv_sqrt_d * qi;
        }
      }
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> sparse_attention(const Tensor<Scalar>& q, const Tensor<Scalar>& k,
                                const Tensor<Scalar>& v, const AttentionPattern& pattern) {
  if (pattern.kind == PatternKind::Full)
    throw ValueError("sparse_attention: pattern must be sparse; use full_attention for Full");
  auto plan = std::make_shared<const AttendancePlan>(build_plan(pattern, q.dim(0)));
  return sparse_attention(q, k, v, std::move(plan));
}

}  // namespace lce::attn
