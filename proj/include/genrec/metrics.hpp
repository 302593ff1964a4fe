#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "genrec/beam.hpp"

namespace genrec {

struct QueryResult {
  std::vector<std::int64_t> ranked;  // best first
  std::int64_t truth = 0;
};

// Fraction of queries whose truth appears in the top k.
double hit_at_k(const std::vector<QueryResult>& queries, int k);

// Single-relevant NDCG: 1/log2(rank+1) when the truth ranks within k, else 0.
double ndcg_at_k(const std::vector<QueryResult>& queries, int k);

struct LevelDiagnostics {
  std::vector<double> acc;                       // teacher-forced accuracy per level
  std::vector<std::optional<double>> precision;  // greedy chain, prefix-conditioned
  std::vector<int> chain_counts;                 // queries correct through each level
  int n = 0;
};

// acc comes from teacher-forced per-level correctness; precision from the
// greedy decode path: precision[l] = chain_counts[l] / chain_counts[l-1]
// (denominator n for l = 0), empty when the denominator is 0. The product
// of defined precisions telescopes to greedy Hit@1.
LevelDiagnostics level_diagnostics(const std::vector<std::array<bool, 4>>& tf_correct,
                                   const std::vector<std::array<bool, 4>>& greedy_prefix_ok,
                                   int n_levels);

struct CrpResult {
  std::vector<double> crp;    // mean 1-based rank of the true prefix per depth
  std::vector<int> eligible;  // queries whose true prefix survived at that depth
};

// Ranks come from the per-depth beam lists of each query's decode trace.
CrpResult crp_from_traces(const std::vector<DecodeTrace>& traces,
                          const std::vector<std::vector<int>>& true_tokens);

struct GateBin {
  int lo = 0, hi = 0;  // retrieved-length range [lo, hi)
  double mean_gate = 0.0;
  int count = 0;
};

struct GateReport {
  std::vector<GateBin> bins;  // non-empty bins, ascending
  double spearman = 0.0;      // rank correlation of (bin index, mean gate)
  int n_points = 0;
  double mean_ret_len = 0.0;
};

GateReport gate_trace_report(const std::vector<GatePoint>& points, int bin_width = 4);

// Spearman rank correlation with average ranks on ties.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace genrec
