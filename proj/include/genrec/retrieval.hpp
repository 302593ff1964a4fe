#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "genrec/quantizer.hpp"

namespace genrec {

// Inverted index over one user's long history: first-level codeword ->
// ascending positions in the history.
struct RetrievalIndex {
  std::vector<std::int64_t> history;            // by position, oldest first
  std::vector<std::vector<int>> postings;       // codeword -> positions
};

RetrievalIndex build_index(std::span<const std::int64_t> long_items,
                           const Quantizer& quantizer);

struct RetrievedContext {
  std::vector<int> positions;           // ascending (chronological)
  std::vector<std::int64_t> item_ids;   // aligned with positions
  std::vector<int> source_codewords;    // query codeword first, then neighbors used
  bool augmented = false;
};

// All positions whose item quantizes to `codeword`, most recent `cap` kept,
// chronological order preserved. cap <= 0 means unlimited.
RetrievedContext hard_search(const RetrievalIndex& index, int codeword, int cap);

// If the context holds fewer than tau items, appends whole neighbor
// postings in neighbor-rank order until the threshold is met or neighbors
// run out, then restores chronological order and re-applies the cap.
RetrievedContext augment_if_sparse(RetrievedContext ctx, int codeword,
                                   const Quantizer& quantizer,
                                   const RetrievalIndex& index, int tau, int cap);

}  // namespace genrec
