#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "genrec/corpus.hpp"
#include "genrec/quantizer.hpp"

namespace genrec {

// Cosine similarities between one prototype and every item of a history.
// A zero-norm history embedding contributes similarity 0; a zero-norm
// prototype is a data error.
std::vector<float> similarity_set(const VecF& prototype,
                                  std::span<const std::int64_t> history,
                                  const Corpus& corpus);

// Histogram of similarities over n_tiers equal-width bins spanning [-1, 1].
// Bin i covers [-1 + 2i/N, -1 + 2(i+1)/N); the last bin also includes +1.
std::vector<int> tier_histogram(std::span<const float> sims, int n_tiers);

// Flattened tier counts over all first-level codewords: entry a*N + i is
// bin i of codeword a. Codewords without a prototype contribute zeros.
std::vector<float> build_tier_feature(std::span<const std::int64_t> long_items,
                                      const Corpus& corpus, const Quantizer& quantizer,
                                      int n_tiers);

}  // namespace genrec
