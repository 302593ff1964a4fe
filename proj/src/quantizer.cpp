#include "genrec/quantizer.hpp"

#include <algorithm>
#include <cstring>
#include <set>
#include <string>

#include "genrec/io.hpp"

namespace genrec {

namespace {

std::string row_bytes(const MatF& m, int r) {
  std::string s(sizeof(float) * m.cols(), '\0');
  std::memcpy(s.data(), m.row(r).data(), s.size());
  return s;
}

int count_distinct_rows(const MatF& m, int stop_at) {
  std::set<std::string> seen;
  for (int r = 0; r < m.rows(); ++r) {
    seen.insert(row_bytes(m, r));
    if (static_cast<int>(seen.size()) >= stop_at) break;
  }
  return static_cast<int>(seen.size());
}

// Makes every row of the codebook unique by nudging later duplicates.
// Only reachable when the data itself has fewer distinct points than
// requested centroids at some residual level.
void dedupe_rows(MatF& m) {
  for (int pass = 0; pass < 64; ++pass) {
    std::set<std::string> seen;
    bool changed = false;
    for (int r = 0; r < m.rows(); ++r) {
      std::string key = row_bytes(m, r);
      if (!seen.insert(key).second) {
        m(r, 0) += std::ldexp(static_cast<float>(r + 1), -12);
        changed = true;
      }
    }
    if (!changed) return;
  }
  throw DataError("quantizer: unable to produce distinct codebook vectors");
}

// Lloyd iterations with farthest-point seeding. Ties in assignment and in
// seeding break toward the smaller index. Empty clusters are re-seeded to
// the point with the largest current distortion.
MatF kmeans(const MatF& X, int K, int max_iters, Rng& rng, std::vector<int>* assign_out) {
  const int N = static_cast<int>(X.rows());
  const int d = static_cast<int>(X.cols());
  MatF centroids(K, d);

  int first = static_cast<int>(rng.uniform_int(N));
  centroids.row(0) = X.row(first);
  VecD min_d2 = VecD::Constant(N, std::numeric_limits<double>::infinity());
  for (int k = 1; k < K; ++k) {
    for (int i = 0; i < N; ++i) {
      const double d2 = (X.row(i) - centroids.row(k - 1)).squaredNorm();
      if (d2 < min_d2[i]) min_d2[i] = d2;
    }
    int best = 0;
    for (int i = 1; i < N; ++i)
      if (min_d2[i] > min_d2[best]) best = i;
    centroids.row(k) = X.row(best);
  }

  std::vector<int> assign(N, -1), prev(N, -2);
  for (int iter = 0; iter < max_iters; ++iter) {
    for (int i = 0; i < N; ++i) assign[i] = nearest_codeword(centroids, X.row(i).transpose());
    if (assign == prev) break;
    prev = assign;

    MatD sums = MatD::Zero(K, d);
    std::vector<int> counts(K, 0);
    for (int i = 0; i < N; ++i) {
      sums.row(assign[i]) += X.row(i).cast<double>();
      ++counts[assign[i]];
    }
    std::vector<bool> stolen(N, false);
    for (int k = 0; k < K; ++k) {
      if (counts[k] > 0) {
        centroids.row(k) = (sums.row(k) / counts[k]).cast<float>();
        continue;
      }
      // Re-seed to the most distorted point not already stolen this round.
      int best = -1;
      double best_d2 = -1.0;
      for (int i = 0; i < N; ++i) {
        if (stolen[i]) continue;
        const double d2 = (X.row(i) - centroids.row(assign[i])).squaredNorm();
        if (d2 > best_d2) {
          best_d2 = d2;
          best = i;
        }
      }
      centroids.row(k) = X.row(best);
      if (best_d2 <= 0.0)  // perfect fit already; nudge so rows stay distinct
        centroids(k, 0) += std::ldexp(static_cast<float>(k + 1), -12);
      stolen[best] = true;
    }
  }
  for (int i = 0; i < N; ++i) assign[i] = nearest_codeword(centroids, X.row(i).transpose());
  dedupe_rows(centroids);
  if (assign_out) *assign_out = std::move(assign);
  return centroids;
}

}  // namespace

int nearest_codeword(const MatF& codebook, const VecF& v) {
  int best = 0;
  float best_d2 = (codebook.row(0).transpose() - v).squaredNorm();
  for (int r = 1; r < codebook.rows(); ++r) {
    const float d2 = (codebook.row(r).transpose() - v).squaredNorm();
    if (d2 < best_d2) {
      best_d2 = d2;
      best = r;
    }
  }
  return best;
}

Quantizer Quantizer::fit(const Corpus& corpus, const std::array<int, 3>& sizes,
                         int max_iters, std::uint64_t seed) {
  const int N = static_cast<int>(corpus.items().size());
  const int d = corpus.embedding_dim();
  if (N == 0) throw DataError("quantizer: empty corpus");
  for (int s : sizes)
    if (s < 2) throw ConfigError("quantizer: codebook sizes must be >= 2");
  if (max_iters <= 0) throw ConfigError("quantizer: max_iters must be positive");

  MatF X(N, d);
  for (int i = 0; i < N; ++i) X.row(i) = corpus.items()[i].embedding.transpose();
  if (!X.allFinite()) throw DataError("quantizer: non-finite embedding values");
  if (count_distinct_rows(X, sizes[0]) < sizes[0])
    throw DataError("quantizer: fewer distinct embeddings than first-level codewords");

  Quantizer q;
  q.sizes_ = sizes;
  Rng rng = Rng::derive(seed, 0x514e54ull);  // quantizer stream
  MatF residual = X;
  for (int level = 0; level < kLevels; ++level) {
    std::vector<int> assign;
    q.codebooks_[level] = kmeans(residual, sizes[level], max_iters, rng, &assign);
    for (int i = 0; i < N; ++i)
      residual.row(i) -= q.codebooks_[level].row(assign[i]);
  }

  for (const Item& it : corpus.items()) q.assignments_[it.id] = q.encode(it.embedding);
  q.resolve_collisions(corpus);
  q.build_prototypes(corpus);
  return q;
}

SemanticId Quantizer::encode(const VecF& embedding) const {
  SemanticId sid;
  VecF r = embedding;
  for (int level = 0; level < kLevels; ++level) {
    const int c = nearest_codeword(codebooks_[level], r);
    sid.codes[level] = c;
    r -= codebooks_[level].row(c).transpose();
  }
  return sid;
}

void Quantizer::resolve_collisions(const Corpus&) {
  std::map<std::array<int, 3>, std::vector<std::int64_t>> groups;
  for (const auto& [id, sid] : assignments_) groups[sid.codes].push_back(id);
  max_suffix_ = 0;
  for (auto& [codes, ids] : groups) {
    std::sort(ids.begin(), ids.end());
    for (int i = 0; i < static_cast<int>(ids.size()); ++i) {
      assignments_[ids[i]].suffix = i;
      max_suffix_ = std::max(max_suffix_, i);
    }
  }
}

void Quantizer::build_prototypes(const Corpus& corpus) {
  const int K0 = sizes_[0];
  const int d = corpus.embedding_dim();
  MatD sums = MatD::Zero(K0, d);
  std::vector<int> counts(K0, 0);
  for (const Item& it : corpus.items()) {
    const int c0 = id_of(it.id).codes[0];
    sums.row(c0) += it.embedding.cast<double>().transpose();
    ++counts[c0];
  }
  prototypes_.assign(K0, VecF());
  for (int c = 0; c < K0; ++c)
    if (counts[c] > 0) prototypes_[c] = (sums.row(c) / counts[c]).cast<float>().transpose();
}

void Quantizer::build_neighbor_dict(int k) {
  if (k < 0) throw ConfigError("neighbor dictionary: k must be non-negative");
  const int K0 = sizes_[0];
  const MatF& cb = codebooks_[0];
  VecD norms(K0);
  for (int a = 0; a < K0; ++a) {
    norms[a] = cb.row(a).cast<double>().norm();
    if (norms[a] == 0.0)
      throw DataError("neighbor dictionary: zero-norm codeword vector");
  }
  neighbors_.assign(K0, {});
  neighbor_k_ = k;
  for (int a = 0; a < K0; ++a) {
    std::vector<std::pair<double, int>> scored;
    scored.reserve(K0 - 1);
    for (int b = 0; b < K0; ++b) {
      if (b == a) continue;
      const double cos =
          cb.row(a).cast<double>().dot(cb.row(b).cast<double>()) / (norms[a] * norms[b]);
      scored.emplace_back(cos, b);
    }
    std::sort(scored.begin(), scored.end(), [](const auto& x, const auto& y) {
      if (x.first != y.first) return x.first > y.first;
      return x.second < y.second;
    });
    const int take = std::min<int>(k, static_cast<int>(scored.size()));
    for (int i = 0; i < take; ++i) neighbors_[a].push_back(scored[i].second);
  }
}

const SemanticId& Quantizer::id_of(std::int64_t item_id) const {
  auto it = assignments_.find(item_id);
  if (it == assignments_.end())
    throw DataError("quantizer: no assignment for item " + std::to_string(item_id));
  return it->second;
}

double Quantizer::mean_residual_energy(const Corpus& corpus, int levels) const {
  if (levels < 0 || levels > kLevels) throw ConfigError("mean_residual_energy: bad level count");
  double total = 0.0;
  for (const Item& it : corpus.items()) {
    VecD r = it.embedding.cast<double>();
    const SemanticId& sid = id_of(it.id);
    for (int l = 0; l < levels; ++l)
      r -= codebooks_[l].row(sid.codes[l]).cast<double>().transpose();
    total += r.squaredNorm();
  }
  return total / static_cast<double>(corpus.items().size());
}

void Quantizer::save(const std::filesystem::path& p) const {
  std::string out = "genrec-quantizer 1\n";
  out += "sizes " + std::to_string(sizes_[0]) + ' ' + std::to_string(sizes_[1]) + ' ' +
         std::to_string(sizes_[2]) + '\n';
  for (int level = 0; level < kLevels; ++level) {
    const MatF& cb = codebooks_[level];
    out += "codebook " + std::to_string(level) + ' ' + std::to_string(cb.rows()) + ' ' +
           std::to_string(cb.cols()) + '\n';
    for (int r = 0; r < cb.rows(); ++r) {
      for (int c = 0; c < cb.cols(); ++c) {
        if (c) out += ' ';
        out += io::fmt(cb(r, c));
      }
      out += '\n';
    }
  }
  out += "assignments " + std::to_string(assignments_.size()) + ' ' +
         std::to_string(max_suffix_) + '\n';
  for (const auto& [id, sid] : assignments_) {
    out += std::to_string(id);
    for (int c : sid.codes) out += ' ' + std::to_string(c);
    out += ' ' + std::to_string(sid.suffix) + '\n';
  }
  io::write_file(p, out);
}

Quantizer Quantizer::load(const std::filesystem::path& p) {
  const auto toks = io::tokenize(io::read_file(p));
  std::size_t i = 0;
  auto need = [&](const char* what) -> const std::string& {
    if (i >= toks.size()) throw DataError(std::string("quantizer file: truncated at ") + what);
    return toks[i++];
  };
  if (need("magic") != "genrec-quantizer" || need("version") != "1")
    throw DataError("quantizer file: bad header");

  Quantizer q;
  if (need("sizes") != "sizes") throw DataError("quantizer file: expected sizes");
  for (int l = 0; l < kLevels; ++l)
    q.sizes_[l] = static_cast<int>(io::parse_int(need("sizes"), "quantizer sizes"));

  for (int level = 0; level < kLevels; ++level) {
    if (need("codebook") != "codebook") throw DataError("quantizer file: expected codebook");
    const int lev = static_cast<int>(io::parse_int(need("codebook level"), "codebook level"));
    const int rows = static_cast<int>(io::parse_int(need("codebook rows"), "codebook rows"));
    const int cols = static_cast<int>(io::parse_int(need("codebook cols"), "codebook cols"));
    if (lev != level || rows != q.sizes_[level] || rows < 1 || cols < 1)
      throw DataError("quantizer file: inconsistent codebook header");
    q.codebooks_[level].resize(rows, cols);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c)
        q.codebooks_[level](r, c) =
            static_cast<float>(io::parse_double(need("codebook value"), "codebook value"));
  }

  if (need("assignments") != "assignments")
    throw DataError("quantizer file: expected assignments");
  const std::int64_t n = io::parse_int(need("assignment count"), "assignment count");
  q.max_suffix_ = static_cast<int>(io::parse_int(need("max suffix"), "max suffix"));
  for (std::int64_t r = 0; r < n; ++r) {
    const std::int64_t id = io::parse_int(need("assignment id"), "assignment id");
    SemanticId sid;
    for (int l = 0; l < kLevels; ++l) {
      sid.codes[l] = static_cast<int>(io::parse_int(need("assignment code"), "assignment code"));
      if (sid.codes[l] < 0 || sid.codes[l] >= q.sizes_[l])
        throw DataError("quantizer file: code out of range");
    }
    sid.suffix = static_cast<int>(io::parse_int(need("assignment suffix"), "assignment suffix"));
    if (!q.assignments_.emplace(id, sid).second)
      throw DataError("quantizer file: duplicate assignment");
  }
  if (i != toks.size()) throw DataError("quantizer file: trailing tokens");
  return q;
}

bool Quantizer::same_codebooks_and_assignments(const Quantizer& o) const {
  if (sizes_ != o.sizes_ || max_suffix_ != o.max_suffix_) return false;
  for (int l = 0; l < kLevels; ++l) {
    if (codebooks_[l].rows() != o.codebooks_[l].rows() ||
        codebooks_[l].cols() != o.codebooks_[l].cols())
      return false;
    if (std::memcmp(codebooks_[l].data(), o.codebooks_[l].data(),
                    sizeof(float) * codebooks_[l].size()) != 0)
      return false;
  }
  if (assignments_.size() != o.assignments_.size()) return false;
  auto a = assignments_.begin();
  auto b = o.assignments_.begin();
  for (; a != assignments_.end(); ++a, ++b)
    if (a->first != b->first || !(a->second == b->second)) return false;
  return true;
}

}  // namespace genrec
