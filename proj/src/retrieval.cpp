#include "genrec/retrieval.hpp"

#include <algorithm>
#include <set>

namespace genrec {

namespace {

void apply_cap(RetrievedContext& ctx, int cap) {
  if (cap <= 0) return;
  const int n = static_cast<int>(ctx.positions.size());
  if (n <= cap) return;
  ctx.positions.erase(ctx.positions.begin(), ctx.positions.end() - cap);
  ctx.item_ids.erase(ctx.item_ids.begin(), ctx.item_ids.end() - cap);
}

}  // namespace

RetrievalIndex build_index(std::span<const std::int64_t> long_items,
                           const Quantizer& quantizer) {
  RetrievalIndex index;
  index.history.assign(long_items.begin(), long_items.end());
  index.postings.assign(quantizer.sizes()[0], {});
  for (int pos = 0; pos < static_cast<int>(index.history.size()); ++pos) {
    const int c0 = quantizer.id_of(index.history[pos]).codes[0];
    index.postings[c0].push_back(pos);
  }
  return index;
}

RetrievedContext hard_search(const RetrievalIndex& index, int codeword, int cap) {
  if (codeword < 0 || codeword >= static_cast<int>(index.postings.size()))
    throw ConfigError("hard_search: codeword out of range");
  RetrievedContext ctx;
  ctx.positions = index.postings[codeword];
  ctx.item_ids.reserve(ctx.positions.size());
  for (int p : ctx.positions) ctx.item_ids.push_back(index.history[p]);
  ctx.source_codewords = {codeword};
  apply_cap(ctx, cap);
  return ctx;
}

RetrievedContext augment_if_sparse(RetrievedContext ctx, int codeword,
                                   const Quantizer& quantizer,
                                   const RetrievalIndex& index, int tau, int cap) {
  if (static_cast<int>(ctx.positions.size()) >= tau) return ctx;
  const auto& neighbor_lists = quantizer.neighbors();
  if (codeword < 0 || codeword >= static_cast<int>(neighbor_lists.size()))
    throw ConfigError("augment_if_sparse: codeword out of range");

  std::set<int> have(ctx.positions.begin(), ctx.positions.end());
  ctx.augmented = true;
  for (int nb : neighbor_lists[codeword]) {
    if (static_cast<int>(have.size()) >= tau) break;
    ctx.source_codewords.push_back(nb);
    for (int p : index.postings[nb]) have.insert(p);
  }
  ctx.positions.assign(have.begin(), have.end());
  ctx.item_ids.clear();
  ctx.item_ids.reserve(ctx.positions.size());
  for (int p : ctx.positions) ctx.item_ids.push_back(index.history[p]);
  apply_cap(ctx, cap);
  return ctx;
}

}  // namespace genrec
