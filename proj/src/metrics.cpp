#include "genrec/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace genrec {

namespace {

int rank_of(const std::vector<std::int64_t>& ranked, std::int64_t truth) {
  for (std::size_t i = 0; i < ranked.size(); ++i)
    if (ranked[i] == truth) return static_cast<int>(i) + 1;
  return 0;  // absent
}

}  // namespace

double hit_at_k(const std::vector<QueryResult>& queries, int k) {
  if (queries.empty()) return 0.0;
  int hits = 0;
  for (const auto& q : queries) {
    const int r = rank_of(q.ranked, q.truth);
    if (r >= 1 && r <= k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(queries.size());
}

double ndcg_at_k(const std::vector<QueryResult>& queries, int k) {
  if (queries.empty()) return 0.0;
  double total = 0.0;
  for (const auto& q : queries) {
    const int r = rank_of(q.ranked, q.truth);
    if (r >= 1 && r <= k) total += 1.0 / std::log2(static_cast<double>(r) + 1.0);
  }
  return total / static_cast<double>(queries.size());
}

LevelDiagnostics level_diagnostics(const std::vector<std::array<bool, 4>>& tf_correct,
                                   const std::vector<std::array<bool, 4>>& greedy_prefix_ok,
                                   int n_levels) {
  if (tf_correct.size() != greedy_prefix_ok.size())
    throw ConfigError("level_diagnostics: mismatched inputs");
  LevelDiagnostics out;
  out.n = static_cast<int>(tf_correct.size());
  out.acc.assign(n_levels, 0.0);
  out.precision.assign(n_levels, std::nullopt);
  out.chain_counts.assign(n_levels, 0);
  if (out.n == 0) return out;

  for (int l = 0; l < n_levels; ++l) {
    int acc_hits = 0;
    for (const auto& f : tf_correct) acc_hits += f[l] ? 1 : 0;
    out.acc[l] = static_cast<double>(acc_hits) / out.n;
  }
  for (const auto& ok : greedy_prefix_ok) {
    for (int l = 0; l < n_levels; ++l) {
      if (!ok[l]) break;
      ++out.chain_counts[l];
    }
  }
  for (int l = 0; l < n_levels; ++l) {
    const int denom = l == 0 ? out.n : out.chain_counts[l - 1];
    if (denom > 0)
      out.precision[l] = static_cast<double>(out.chain_counts[l]) / denom;
  }
  return out;
}

CrpResult crp_from_traces(const std::vector<DecodeTrace>& traces,
                          const std::vector<std::vector<int>>& true_tokens) {
  if (traces.size() != true_tokens.size())
    throw ConfigError("crp_from_traces: mismatched inputs");
  CrpResult out;
  if (traces.empty()) return out;
  const int depth = static_cast<int>(traces[0].depths.size());
  out.crp.assign(depth, 0.0);
  out.eligible.assign(depth, 0);
  std::vector<double> sums(depth, 0.0);
  for (std::size_t qi = 0; qi < traces.size(); ++qi) {
    const auto& trace = traces[qi];
    const auto& truth = true_tokens[qi];
    for (int d = 0; d < depth && d < static_cast<int>(truth.size()); ++d) {
      const auto& entries = trace.depths[d];
      for (std::size_t r = 0; r < entries.size(); ++r) {
        bool match = entries[r].tokens.size() == static_cast<std::size_t>(d) + 1;
        for (int j = 0; match && j <= d; ++j) match = entries[r].tokens[j] == truth[j];
        if (match) {
          sums[d] += static_cast<double>(r) + 1.0;
          ++out.eligible[d];
          break;
        }
      }
    }
  }
  for (int d = 0; d < depth; ++d)
    out.crp[d] = out.eligible[d] > 0 ? sums[d] / out.eligible[d] : 0.0;
  return out;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  if (n != y.size() || n < 2) return 0.0;
  auto ranks = [](const std::vector<double>& v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&v](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(n);
    std::size_t i = 0;
    while (i < n) {
      std::size_t j = i;
      while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
      const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x);
  const auto ry = ranks(y);
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

GateReport gate_trace_report(const std::vector<GatePoint>& points, int bin_width) {
  if (bin_width <= 0) throw ConfigError("gate_trace_report: bin width must be positive");
  GateReport out;
  out.n_points = static_cast<int>(points.size());
  if (points.empty()) return out;

  std::map<int, std::pair<double, int>> acc;  // bin -> (gate sum, count)
  double len_sum = 0.0;
  for (const auto& p : points) {
    auto& slot = acc[p.ret_len / bin_width];
    slot.first += p.gate;
    slot.second += 1;
    len_sum += p.ret_len;
  }
  out.mean_ret_len = len_sum / points.size();
  std::vector<double> bin_idx, bin_mean;
  for (const auto& [b, slot] : acc) {
    GateBin gb;
    gb.lo = b * bin_width;
    gb.hi = (b + 1) * bin_width;
    gb.count = slot.second;
    gb.mean_gate = slot.first / slot.second;
    out.bins.push_back(gb);
    bin_idx.push_back(static_cast<double>(b));
    bin_mean.push_back(gb.mean_gate);
  }
  out.spearman = spearman(bin_idx, bin_mean);
  return out;
}

}  // namespace genrec
