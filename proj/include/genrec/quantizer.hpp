#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <vector>

#include "genrec/common.hpp"
#include "genrec/corpus.hpp"

namespace genrec {

// Hierarchical code of one item: three codebook levels plus a collision
// suffix that disambiguates items sharing all three codes.
struct SemanticId {
  std::array<int, 3> codes{0, 0, 0};
  int suffix = 0;

  bool operator==(const SemanticId& o) const {
    return codes == o.codes && suffix == o.suffix;
  }
};

// Residual multi-level k-means quantizer over item embeddings.
class Quantizer {
 public:
  static constexpr int kLevels = 3;

  // Fits level codebooks on the corpus embeddings, then assigns every item
  // (greedy nearest per level, collisions resolved by suffix) and builds
  // first-level prototypes and the codeword neighbor dictionary.
  static Quantizer fit(const Corpus& corpus, const std::array<int, 3>& sizes,
                       int max_iters, std::uint64_t seed);

  // Greedy per-level nearest-codeword assignment; ties break toward the
  // smaller codeword index. Suffix is always 0 here.
  SemanticId encode(const VecF& embedding) const;

  // Orders items sharing a full code by ascending item id and assigns
  // suffixes 0, 1, 2, ...
  void resolve_collisions(const Corpus& corpus);

  // Prototype of a first-level codeword: mean embedding over all items
  // assigned to it.
  void build_prototypes(const Corpus& corpus);

  // Top-k nearest first-level codewords by cosine similarity between
  // codebook vectors, self excluded; ties break toward the smaller index.
  void build_neighbor_dict(int k);

  const MatF& codebook(int level) const { return codebooks_[level]; }
  int codebook_size(int level) const { return static_cast<int>(codebooks_[level].rows()); }
  const std::array<int, 3>& sizes() const { return sizes_; }

  const std::map<std::int64_t, SemanticId>& assignments() const { return assignments_; }
  const SemanticId& id_of(std::int64_t item_id) const;
  int max_suffix() const { return max_suffix_; }
  bool has_collisions() const { return max_suffix_ > 0; }

  // Prototypes are indexed by first-level codeword; a codeword with no
  // assigned items has an empty (size-0) prototype.
  const std::vector<VecF>& prototypes() const { return prototypes_; }
  const std::vector<std::vector<int>>& neighbors() const { return neighbors_; }
  int neighbor_k() const { return neighbor_k_; }

  // Mean squared residual norm after quantizing through `levels` levels
  // (0 = raw embeddings). Non-increasing in `levels`.
  double mean_residual_energy(const Corpus& corpus, int levels) const;

  void save(const std::filesystem::path& p) const;
  // Restores codebooks and assignments bit-exactly. Prototypes and the
  // neighbor dictionary are derived state; rebuild them from the corpus
  // after loading.
  static Quantizer load(const std::filesystem::path& p);

  bool same_codebooks_and_assignments(const Quantizer& o) const;

 private:
  std::array<int, 3> sizes_{0, 0, 0};
  std::array<MatF, 3> codebooks_;
  std::map<std::int64_t, SemanticId> assignments_;
  std::vector<VecF> prototypes_;
  std::vector<std::vector<int>> neighbors_;
  int neighbor_k_ = 0;
  int max_suffix_ = 0;
};

// Index of the nearest row of `codebook` to `v` in squared Euclidean
// distance; ties break toward the smaller row index.
int nearest_codeword(const MatF& codebook, const VecF& v);

}  // namespace genrec
