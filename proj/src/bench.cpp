#include "lce/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "lce/rng.hpp"

namespace lce::bench {

attn::AttentionPattern pattern_by_name(const std::string& name, const SweepConfig& cfg) {
  std::vector<Index> globals;
  for (int g = 0; g < cfg.globals; ++g) globals.push_back(g);
  if (name == "full") return attn::AttentionPattern::full();
  if (name == "window-global") return attn::AttentionPattern::window_global(cfg.window, globals);
  if (name == "window-global-random")
    return attn::AttentionPattern::window_global_random(cfg.window, globals, cfg.block_size,
                                                        cfg.random_blocks, cfg.seed);
  throw ValueError("unknown pattern name: " + name);
}

namespace {

Tensor<float> seeded(Tape<float>& tape, Index n, Index d, std::uint64_t key) {
  Rng rng(key);
  std::vector<float> v(static_cast<std::size_t>(n * d));
  for (auto& x : v) x = static_cast<float>(2.0 * rng.uniform() - 1.0);
  return tape.leaf({n, d}, std::move(v), false);
}

}  // namespace

std::vector<BenchPoint> run_sweep(const SweepConfig& cfg) {
  if (cfg.trials < 3) throw ValueError("run_sweep: at least 3 trials required");
  if (!std::is_sorted(cfg.n_list.begin(), cfg.n_list.end()))
    throw ValueError("run_sweep: n list must be ascending");
  std::vector<BenchPoint> points;
  for (const auto& name : cfg.patterns) {
    for (Index n : cfg.n_list) {
      auto pattern = pattern_by_name(name, cfg);
      // drop global positions that fall outside short sequences
      std::erase_if(pattern.global_positions, [n](Index g) { return g >= n; });
      BenchPoint pt;
      pt.pattern = name;
      pt.n = n;
      pt.pairs = attn::count_pairs(pattern, n);
      pt.flops = 4.0 * static_cast<double>(cfg.d) * static_cast<double>(pt.pairs);

      const bool is_full = pattern.kind == attn::PatternKind::Full;
      if (is_full && n > cfg.full_ceiling_n) {
        pt.skipped = true;
        pt.ms_median = std::numeric_limits<double>::quiet_NaN();
        points.push_back(std::move(pt));
        continue;
      }

      auto plan = std::make_shared<const attn::AttendancePlan>(attn::build_plan(pattern, n));
      if (plan->total_pairs != pt.pairs)
        throw ValueError("run_sweep: plan pair count disagrees with count_pairs");

      std::vector<double> trial_ms;
      for (int trial = 0; trial < cfg.trials; ++trial) {
        Tape<float> tape;
        auto q = seeded(tape, n, cfg.d, Rng::key_of({cfg.seed, static_cast<std::uint64_t>(n), 1}));
        auto k = seeded(tape, n, cfg.d, Rng::key_of({cfg.seed, static_cast<std::uint64_t>(n), 2}));
        auto v = seeded(tape, n, cfg.d, Rng::key_of({cfg.seed, static_cast<std::uint64_t>(n), 3}));
        attn::counters().reset();
        const auto t0 = std::chrono::steady_clock::now();
        auto out = is_full ? attn::full_attention(q, k, v, *plan)
                           : attn::sparse_attention(q, k, v, plan);
        const auto t1 = std::chrono::steady_clock::now();
        trial_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        if (attn::counters().pairs_scored !=
            (is_full ? static_cast<long long>(n) * n : plan->total_pairs))
          throw ValueError("run_sweep: instrumented pair counter mismatch");
        pt.peak_elems = attn::counters().peak_score_elements;
      }
      std::sort(trial_ms.begin(), trial_ms.end());
      pt.ms_median = trial_ms[trial_ms.size() / 2];
      points.push_back(std::move(pt));
    }
  }
  return points;
}

std::map<std::string, double> fit_scaling(const std::vector<BenchPoint>& points) {
  std::map<std::string, std::vector<std::pair<double, double>>> series;
  for (const auto& pt : points)
    series[pt.pattern].emplace_back(std::log(static_cast<double>(pt.n)),
                                    std::log(static_cast<double>(pt.pairs)));
  std::map<std::string, double> slopes;
  for (const auto& [name, xy] : series) {
    if (xy.size() < 3)
      throw ValueError("fit_scaling: pattern '" + name + "' has fewer than 3 points");
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (const auto& [x, y] : xy) {
      sx += x;
      sy += y;
      sxx += x * x;
      sxy += x * y;
    }
    const double m = static_cast<double>(xy.size());
    slopes[name] = (m * sxy - sx * sy) / (m * sxx - sx * sx);
  }
  return slopes;
}

std::string to_csv(const std::vector<BenchPoint>& points) {
  std::ostringstream os;
  os << "pattern,n,pairs,peak_elems,flops,ms_median\n";
  for (const auto& pt : points) {
    os << pt.pattern << ',' << pt.n << ',' << pt.pairs << ',' << pt.peak_elems << ','
       << static_cast<long long>(pt.flops) << ',';
    if (!pt.skipped) os << pt.ms_median;
    os << '\n';
  }
  return os.str();
}

}  // namespace lce::bench
