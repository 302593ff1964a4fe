#include <doctest.h>

#include <cmath>
#include <vector>

#include "genrec/metrics.hpp"

using namespace genrec;

namespace {

// One query whose truth sits at 1-based rank r in a 24-item ranking.
QueryResult query_with_rank(int r) {
  QueryResult q;
  q.truth = 1000;
  for (int i = 0; i < 24; ++i) q.ranked.push_back(100 + i);
  if (r >= 1) q.ranked[r - 1] = q.truth;
  return q;
}

}  // namespace

TEST_CASE("ndcg matches the closed form at every rank and cutoff") {
  for (int r = 1; r <= 20; ++r) {
    std::vector<QueryResult> qs = {query_with_rank(r)};
    for (int k : {3, 5, 10, 20}) {
      const double expect = r <= k ? 1.0 / std::log2(static_cast<double>(r) + 1.0) : 0.0;
      CHECK(std::abs(ndcg_at_k(qs, k) - expect) < 1e-12);
      CHECK(hit_at_k(qs, k) == (r <= k ? 1.0 : 0.0));
    }
  }
}

TEST_CASE("hit and ndcg average over queries, absent truth scores zero") {
  std::vector<QueryResult> qs = {query_with_rank(1), query_with_rank(3),
                                 query_with_rank(0), query_with_rank(7)};
  CHECK(hit_at_k(qs, 5) == 0.5);
  CHECK(hit_at_k(qs, 10) == 0.75);
  const double expect =
      (1.0 + 1.0 / std::log2(4.0) + 0.0 + 1.0 / std::log2(8.0)) / 4.0;
  CHECK(std::abs(ndcg_at_k(qs, 10) - expect) < 1e-12);

  CHECK(hit_at_k({}, 5) == 0.0);
  CHECK(ndcg_at_k({}, 5) == 0.0);
  CHECK(hit_at_k(qs, 0) == 0.0);
}

TEST_CASE("hit and ndcg are non-decreasing in k") {
  Rng rng(31);
  std::vector<QueryResult> qs;
  for (int i = 0; i < 200; ++i) {
    QueryResult q;
    q.truth = rng.uniform_int(40);  // sometimes absent from the top-24 list
    std::vector<std::int64_t> pool(30);
    for (int j = 0; j < 30; ++j) pool[j] = j;
    rng.shuffle(pool);
    q.ranked.assign(pool.begin(), pool.begin() + 24);
    qs.push_back(std::move(q));
  }
  double prev_hit = 0.0, prev_ndcg = 0.0;
  for (int k = 1; k <= 25; ++k) {
    const double h = hit_at_k(qs, k);
    const double n = ndcg_at_k(qs, k);
    CHECK(h >= prev_hit);
    CHECK(n >= prev_ndcg);
    CHECK(n <= h + 1e-12);  // each hit contributes at most 1
    prev_hit = h;
    prev_ndcg = n;
  }
}

TEST_CASE("level diagnostics chain telescopes to greedy hit@1") {
  using B4 = std::array<bool, 4>;
  std::vector<B4> tf = {
      {true, true, false, false},  {true, false, true, false},
      {false, true, true, false},  {true, true, true, false},
      {true, false, false, false},
  };
  std::vector<B4> greedy = {
      {true, true, true, false},  {true, true, false, false},
      {true, false, true, false},  // level-1 miss cuts the chain despite level 2
      {false, true, true, false},  // level-0 miss leaves the whole chain out
      {true, true, true, false},
  };
  auto d = level_diagnostics(tf, greedy, 3);
  CHECK(d.n == 5);
  CHECK(d.acc == std::vector<double>{0.8, 0.6, 0.6});
  CHECK(d.chain_counts == std::vector<int>{4, 3, 2});
  REQUIRE(d.precision.size() == 3);
  CHECK(*d.precision[0] == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(*d.precision[1] == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(*d.precision[2] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

  const double product = *d.precision[0] * *d.precision[1] * *d.precision[2];
  CHECK(std::abs(product - 2.0 / 5.0) < 1e-12);  // 2 of 5 fully correct
}

TEST_CASE("level diagnostics handle dead chains and empty input") {
  using B4 = std::array<bool, 4>;
  std::vector<B4> none = {{false, true, true, false}, {false, false, false, false}};
  auto d = level_diagnostics(none, none, 3);
  CHECK(d.chain_counts == std::vector<int>{0, 0, 0});
  REQUIRE(d.precision[0].has_value());
  CHECK(*d.precision[0] == 0.0);
  CHECK(!d.precision[1].has_value());
  CHECK(!d.precision[2].has_value());

  auto empty = level_diagnostics({}, {}, 3);
  CHECK(empty.n == 0);
  CHECK(empty.acc == std::vector<double>{0.0, 0.0, 0.0});
  CHECK(!empty.precision[0].has_value());

  std::vector<B4> one = {{true, true, true, false}};
  CHECK_THROWS_AS(level_diagnostics(one, {}, 3), ConfigError);
}

TEST_CASE("telescoping holds on randomized chains") {
  using B4 = std::array<bool, 4>;
  Rng rng(47);
  std::vector<B4> tf, greedy;
  for (int i = 0; i < 200; ++i) {
    B4 g{};
    for (int l = 0; l < 3; ++l) g[l] = rng.uniform() < 0.7;
    greedy.push_back(g);
    tf.push_back(g);
  }
  auto d = level_diagnostics(tf, greedy, 3);
  CHECK(d.chain_counts[0] >= d.chain_counts[1]);
  CHECK(d.chain_counts[1] >= d.chain_counts[2]);
  if (d.precision[0] && d.precision[1] && d.precision[2]) {
    const double product = *d.precision[0] * *d.precision[1] * *d.precision[2];
    const double greedy_hit1 = static_cast<double>(d.chain_counts[2]) / d.n;
    CHECK(std::abs(product - greedy_hit1) < 1e-12);
  }
}

namespace {

DecodeTrace trace_of(const std::vector<std::vector<std::vector<int>>>& depth_tokens) {
  DecodeTrace t;
  for (const auto& entries : depth_tokens) {
    std::vector<DepthEntry> es;
    double lp = -0.1;
    for (const auto& toks : entries) {
      es.push_back({toks, lp});
      lp -= 0.1;
    }
    t.depths.push_back(std::move(es));
  }
  return t;
}

}  // namespace

TEST_CASE("prefix ranks average over eligible queries per depth") {
  std::vector<DecodeTrace> traces;
  std::vector<std::vector<int>> truths;

  traces.push_back(trace_of({{{2}, {1}}, {{2, 7}, {1, 5}}}));
  truths.push_back({1, 5});  // ranks 2, 2

  traces.push_back(trace_of({{{2}, {1}}, {{2, 7}, {1, 5}}}));
  truths.push_back({3, 9});  // absent at both depths

  traces.push_back(trace_of({{{2}, {1}}, {{2, 7}, {1, 5}}}));
  truths.push_back({2, 7});  // ranks 1, 1

  auto r = crp_from_traces(traces, truths);
  REQUIRE(r.crp.size() == 2);
  CHECK(r.eligible == std::vector<int>{2, 2});
  CHECK(r.crp[0] == doctest::Approx(1.5).epsilon(1e-12));
  CHECK(r.crp[1] == doctest::Approx(1.5).epsilon(1e-12));
}

TEST_CASE("prefix rank bookkeeping skips malformed and short inputs") {
  // entry with the wrong token count for its depth is never a match
  std::vector<DecodeTrace> traces = {trace_of({{{2, 9}, {1}}, {{1, 5}}})};
  std::vector<std::vector<int>> truths = {{1, 5}};
  auto r = crp_from_traces(traces, truths);
  CHECK(r.eligible == std::vector<int>{1, 1});
  CHECK(r.crp[0] == 2.0);  // the malformed first entry still occupies rank 1
  CHECK(r.crp[1] == 1.0);

  // truth shorter than the trace depth only counts the depths it covers
  traces = {trace_of({{{2}}, {{2, 7}}})};
  truths = {{2}};
  r = crp_from_traces(traces, truths);
  CHECK(r.eligible == std::vector<int>{1, 0});
  CHECK(r.crp[1] == 0.0);

  CHECK_THROWS_AS(crp_from_traces(traces, {}), ConfigError);
  auto empty = crp_from_traces({}, {});
  CHECK(empty.crp.empty());
  CHECK(empty.eligible.empty());
}

TEST_CASE("spearman handles monotone, reversed, and tied data") {
  CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
  CHECK(spearman({1, 2, 3, 4}, {9, 7, 5, 3}) == doctest::Approx(-1.0));
  // tied x ranks [1, 2.5, 2.5, 4] vs y ranks [1, 4, 2, 3]: 3 / sqrt(4.5 * 5)
  CHECK(spearman({1, 2, 2, 3}, {10, 40, 20, 30}) ==
        doctest::Approx(2.0 / std::sqrt(10.0)).epsilon(1e-12));
  CHECK(spearman({5, 5, 5}, {1, 2, 3}) == 0.0);  // no variance in x
  CHECK(spearman({1}, {2}) == 0.0);
  CHECK(spearman({1, 2}, {3}) == 0.0);
}

TEST_CASE("gate points bin by retrieved length") {
  std::vector<GatePoint> pts = {{0, 0.2}, {3, 0.4}, {4, 0.6}, {9, 0.8}, {11, 1.0}};
  auto rep = gate_trace_report(pts);
  CHECK(rep.n_points == 5);
  CHECK(rep.mean_ret_len == doctest::Approx(5.4).epsilon(1e-12));
  REQUIRE(rep.bins.size() == 3);

  CHECK(rep.bins[0].lo == 0);
  CHECK(rep.bins[0].hi == 4);
  CHECK(rep.bins[0].count == 2);
  CHECK(rep.bins[0].mean_gate == doctest::Approx(0.3).epsilon(1e-12));

  CHECK(rep.bins[1].lo == 4);
  CHECK(rep.bins[1].hi == 8);
  CHECK(rep.bins[1].count == 1);
  CHECK(rep.bins[1].mean_gate == doctest::Approx(0.6).epsilon(1e-12));

  CHECK(rep.bins[2].lo == 8);
  CHECK(rep.bins[2].hi == 12);
  CHECK(rep.bins[2].count == 2);
  CHECK(rep.bins[2].mean_gate == doctest::Approx(0.9).epsilon(1e-12));

  CHECK(rep.spearman == doctest::Approx(1.0));
}

TEST_CASE("gate report edge cases") {
  auto empty = gate_trace_report({});
  CHECK(empty.n_points == 0);
  CHECK(empty.bins.empty());
  CHECK(empty.spearman == 0.0);

  // forced-zero points dilute the first bin
  std::vector<GatePoint> pts = {{0, 0.0}, {2, 0.8}};
  auto rep = gate_trace_report(pts);
  REQUIRE(rep.bins.size() == 1);
  CHECK(rep.bins[0].mean_gate == doctest::Approx(0.4).epsilon(1e-12));
  CHECK(rep.spearman == 0.0);  // a single bin has no ordering

  // custom width separates them
  auto fine = gate_trace_report(pts, 1);
  REQUIRE(fine.bins.size() == 2);
  CHECK(fine.bins[0].lo == 0);
  CHECK(fine.bins[1].lo == 2);
  CHECK(fine.bins[1].hi == 3);

  CHECK_THROWS_AS(gate_trace_report(pts, 0), ConfigError);
}
