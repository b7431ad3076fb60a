#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "lce/attention.hpp"

namespace lce::bench {

struct BenchPoint {
  std::string pattern;
  Index n = 0;
  long long pairs = 0;
  long long peak_elems = 0;
  double flops = 0;
  double ms_median = 0;
  bool skipped = false;  // kernel not run (memory ceiling); counters still exact
};

struct SweepConfig {
  std::vector<std::string> patterns = {"full", "window-global", "window-global-random"};
  std::vector<Index> n_list = {512, 1024, 2048, 4096};
  Index d = 32;
  int trials = 5;
  std::uint64_t seed = 1;
  int window = 33;
  int globals = 1;
  // Desk-scale block granularity: 8 random-reachable blocks already exist at
  // n=512, so the pair count sits in its linear regime across the sweep.
  int block_size = 32;
  int random_blocks = 3;
  Index full_ceiling_n = 4096;  // Full kernels beyond this report counts only
};

attn::AttentionPattern pattern_by_name(const std::string& name, const SweepConfig& cfg);

// Executes each kernel on seeded random inputs at every n: deterministic
// counters, best-effort timing (median over trials).
std::vector<BenchPoint> run_sweep(const SweepConfig& cfg);

// Least-squares slope of log(pairs) vs log(n) per pattern.
std::map<std::string, double> fit_scaling(const std::vector<BenchPoint>& points);

std::string to_csv(const std::vector<BenchPoint>& points);

}  // namespace lce::bench
