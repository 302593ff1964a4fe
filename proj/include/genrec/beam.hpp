#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "genrec/model.hpp"
#include "genrec/quantizer.hpp"
#include "genrec/retrieval.hpp"

namespace genrec {

// Trie over the catalog's SID token paths. Every path has uniform depth
// (3 levels, or 4 when collision suffixes exist) and ends at exactly one
// item.
class PrefixTrie {
 public:
  struct Node {
    std::vector<std::pair<int, int>> children;  // (token, node index), sorted by token
    std::int64_t item = -1;                     // set on leaves only
  };

  static PrefixTrie build(const Quantizer& quantizer, const Vocab& vocab);

  int root() const { return 0; }
  const Node& node(int idx) const { return nodes_[idx]; }
  int depth() const { return depth_; }
  int n_items() const { return n_items_; }

  // Walks tokens from the root; returns the node index or -1.
  int walk(std::span<const int> tokens) const;

 private:
  std::vector<Node> nodes_{Node{}};
  int depth_ = 3;
  int n_items_ = 0;
};

struct BeamOptions {
  int beam_k = 20;
  bool use_shs = true;
  bool use_aug = true;
  int tau = 8;
  int ret_cap = 64;
};

struct GatePoint {
  int ret_len = 0;
  double gate = 0.0;
};

struct DepthEntry {
  std::vector<int> tokens;
  double logprob = 0.0;
};

struct DecodeTrace {
  std::vector<std::vector<DepthEntry>> depths;  // beams kept at each depth, ranked
  std::vector<GatePoint> gate_points;           // one per beam expansion at steps >= 2
};

struct ScoredItem {
  std::int64_t item = 0;
  double logprob = 0.0;
};

// Trie-constrained beam search. Step 1 expands bos with no retrieved
// context; each surviving first-level hypothesis then attaches its own
// context (hard search keyed by its codeword, optionally augmented) which
// it carries for the remaining steps. Candidates are ranked by cumulative
// log-probability, ties broken by lexicographic token order.
template <typename S>
std::vector<ScoredItem> beam_search(const InferenceModel<S>& model,
                                    const PrefixTrie& trie, const Vocab& vocab,
                                    const Quantizer& quantizer,
                                    const RetrievalIndex& index, const BeamOptions& opt,
                                    DecodeTrace* trace = nullptr);

// Deduplicated top-k item ids from a beam result.
std::vector<std::int64_t> rank_for_eval(const std::vector<ScoredItem>& scored, int k_max);

// 3 level tokens per retrieved item, in context order.
std::vector<int> context_tokens(const RetrievedContext& ctx, const Quantizer& quantizer,
                                const Vocab& vocab);

extern template std::vector<ScoredItem> beam_search<float>(
    const InferenceModel<float>&, const PrefixTrie&, const Vocab&, const Quantizer&,
    const RetrievalIndex&, const BeamOptions&, DecodeTrace*);
extern template std::vector<ScoredItem> beam_search<double>(
    const InferenceModel<double>&, const PrefixTrie&, const Vocab&, const Quantizer&,
    const RetrievalIndex&, const BeamOptions&, DecodeTrace*);

}  // namespace genrec
