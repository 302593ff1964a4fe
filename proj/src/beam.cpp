#include "genrec/beam.hpp"

#include <algorithm>

namespace genrec {

PrefixTrie PrefixTrie::build(const Quantizer& quantizer, const Vocab& vocab) {
  PrefixTrie trie;
  trie.depth_ = vocab.n_levels();
  for (const auto& [item_id, sid] : quantizer.assignments()) {
    std::vector<int> path;
    for (int l = 0; l < 3; ++l) path.push_back(vocab.token(l, sid.codes[l]));
    if (trie.depth_ == 4) path.push_back(vocab.token(3, sid.suffix));
    int at = 0;
    for (int d = 0; d < trie.depth_; ++d) {
      const int tok = path[d];
      auto& ch = trie.nodes_[at].children;
      auto it = std::lower_bound(ch.begin(), ch.end(), tok,
                                 [](const auto& e, int t) { return e.first < t; });
      if (it != ch.end() && it->first == tok) {
        at = it->second;
      } else {
        trie.nodes_.emplace_back();
        const int idx = static_cast<int>(trie.nodes_.size()) - 1;
        // nodes_ growth may invalidate ch; re-fetch.
        auto& ch2 = trie.nodes_[at].children;
        auto it2 = std::lower_bound(ch2.begin(), ch2.end(), tok,
                                    [](const auto& e, int t) { return e.first < t; });
        ch2.insert(it2, {tok, idx});
        at = idx;
      }
    }
    if (trie.nodes_[at].item != -1)
      throw DataError("trie: two items share a full SID path");
    trie.nodes_[at].item = item_id;
    ++trie.n_items_;
  }
  return trie;
}

int PrefixTrie::walk(std::span<const int> tokens) const {
  int at = 0;
  for (int tok : tokens) {
    const auto& ch = nodes_[at].children;
    auto it = std::lower_bound(ch.begin(), ch.end(), tok,
                               [](const auto& e, int t) { return e.first < t; });
    if (it == ch.end() || it->first != tok) return -1;
    at = it->second;
  }
  return at;
}

std::vector<int> context_tokens(const RetrievedContext& ctx, const Quantizer& quantizer,
                                const Vocab& vocab) {
  std::vector<int> toks;
  toks.reserve(3 * ctx.item_ids.size());
  for (std::int64_t id : ctx.item_ids) {
    const SemanticId& sid = quantizer.id_of(id);
    for (int l = 0; l < 3; ++l) toks.push_back(vocab.token(l, sid.codes[l]));
  }
  return toks;
}

namespace {

struct Hypo {
  std::vector<int> tokens;
  double logprob = 0.0;
  int trie_node = 0;
  std::vector<int> ret_tokens;
  int ret_items = 0;
};

}  // namespace

template <typename S>
std::vector<ScoredItem> beam_search(const InferenceModel<S>& model,
                                    const PrefixTrie& trie, const Vocab& vocab,
                                    const Quantizer& quantizer,
                                    const RetrievalIndex& index, const BeamOptions& opt,
                                    DecodeTrace* trace) {
  if (opt.beam_k < 1) throw ConfigError("beam_search: beam_k must be >= 1");
  const int depth = trie.depth();
  if (trace) {
    trace->depths.clear();
    trace->gate_points.clear();
  }

  std::vector<Hypo> beams(1);
  for (int d = 0; d < depth; ++d) {
    std::vector<Hypo> cands;
    for (const Hypo& b : beams) {
      std::vector<int> prefix;
      prefix.reserve(b.tokens.size() + 1);
      prefix.push_back(Vocab::kBos);
      prefix.insert(prefix.end(), b.tokens.begin(), b.tokens.end());
      const auto step = model.step(prefix, b.ret_tokens, d);
      if (trace && d >= 1)
        trace->gate_points.push_back({b.ret_items, step.gate_mean});
      for (const auto& [tok, child] : trie.node(b.trie_node).children) {
        Hypo h;
        h.tokens = b.tokens;
        h.tokens.push_back(tok);
        h.logprob = b.logprob + static_cast<double>(step.logprobs[vocab.code(d, tok)]);
        h.trie_node = child;
        h.ret_tokens = b.ret_tokens;
        h.ret_items = b.ret_items;
        cands.push_back(std::move(h));
      }
    }
    std::sort(cands.begin(), cands.end(), [](const Hypo& a, const Hypo& b) {
      if (a.logprob != b.logprob) return a.logprob > b.logprob;
      return a.tokens < b.tokens;
    });
    if (static_cast<int>(cands.size()) > opt.beam_k) cands.resize(opt.beam_k);
    beams = std::move(cands);

    if (d == 0 && opt.use_shs) {
      for (Hypo& b : beams) {
        const int c0 = vocab.code(0, b.tokens[0]);
        RetrievedContext ctx = hard_search(index, c0, opt.ret_cap);
        if (opt.use_aug)
          ctx = augment_if_sparse(std::move(ctx), c0, quantizer, index, opt.tau,
                                  opt.ret_cap);
        b.ret_tokens = context_tokens(ctx, quantizer, vocab);
        b.ret_items = static_cast<int>(ctx.item_ids.size());
      }
    }
    if (trace) {
      std::vector<DepthEntry> entries;
      entries.reserve(beams.size());
      for (const Hypo& b : beams) entries.push_back({b.tokens, b.logprob});
      trace->depths.push_back(std::move(entries));
    }
  }

  std::vector<ScoredItem> out;
  out.reserve(beams.size());
  for (const Hypo& b : beams) {
    const auto& leaf = trie.node(b.trie_node);
    if (leaf.item == -1) throw DataError("beam_search: full-depth path is not a leaf");
    out.push_back({leaf.item, b.logprob});
  }
  return out;
}

std::vector<std::int64_t> rank_for_eval(const std::vector<ScoredItem>& scored, int k_max) {
  std::vector<std::int64_t> out;
  for (const ScoredItem& s : scored) {
    if (std::find(out.begin(), out.end(), s.item) == out.end()) out.push_back(s.item);
    if (static_cast<int>(out.size()) >= k_max) break;
  }
  return out;
}

template std::vector<ScoredItem> beam_search<float>(const InferenceModel<float>&,
                                                    const PrefixTrie&, const Vocab&,
                                                    const Quantizer&, const RetrievalIndex&,
                                                    const BeamOptions&, DecodeTrace*);
template std::vector<ScoredItem> beam_search<double>(const InferenceModel<double>&,
                                                     const PrefixTrie&, const Vocab&,
                                                     const Quantizer&, const RetrievalIndex&,
                                                     const BeamOptions&, DecodeTrace*);

}  // namespace genrec
